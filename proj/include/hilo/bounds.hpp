#pragma once

// Computable generalisation-bound quantities: the proxy A-distance from a
// domain classifier, the VC confidence term and the two bound right-hand sides.

#include <cstddef>

namespace hilo {

struct BoundsConfig {
  double vc_dim = 0.0;  // proxy; 0 selects the domain-head parameter count
  double delta = 0.05;
  bool mi_clamp = true;

  void validate() const;
};

// 2 (1 - min(s, 2 - s)) with s = err_a + err_b; the complement classifier
// supplies the min.
double proxy_a_distance(double err_a, double err_b);

struct Confidence {
  double value = 0.0;
  bool vacuous = false;  // a radicand was negative; value is then +inf
};

// 4 max over both domains of sqrt((d log(2m) - log(2/delta)) / m).
Confidence confidence_term(double vc_dim, std::size_t m_a, std::size_t m_b, double delta);

// JS estimate minus the -2 log 2 floor, clamped at 0 (and at 1 when requested).
double dependence_score(double mi_estimate, bool clamp_to_unit);

struct BoundReport {
  double d_hat = 0.0;
  double confidence = 0.0;
  bool vacuous = false;
  double dependence = 0.0;
  double e_l = 0.0;
  double e_u = 0.0;
  double thm1_rhs = 0.0;  // e_l + d_hat / 2 + confidence / 2
  double thm2_rhs = 0.0;  // e_l + sqrt(dependence)
  double thm1_slack = 0.0;  // thm1_rhs - e_u
  double thm2_slack = 0.0;
};

BoundReport thm_bounds(double e_l, double e_u, double d_hat, const Confidence& confidence, double mi_estimate,
                       const BoundsConfig& cfg);

}  // namespace hilo
