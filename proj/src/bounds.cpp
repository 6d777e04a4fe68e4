#include "hilo/bounds.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace hilo {

void BoundsConfig::validate() const {
  if (!(vc_dim == 0 || vc_dim >= 1)) throw std::invalid_argument("BoundsConfig: vc_dim must be 0 (auto) or at least 1");
  if (!(delta > 0 && delta < 1)) throw std::invalid_argument("BoundsConfig: delta must lie in (0, 1)");
}

namespace {

void require_rate(const char* what, double r) {
  if (!(r >= 0 && r <= 1)) throw std::invalid_argument(std::string(what) + " must lie in [0, 1]");
}

}  // namespace

double proxy_a_distance(double err_a, double err_b) {
  require_rate("err_a", err_a);
  require_rate("err_b", err_b);
  const double s = err_a + err_b;
  return std::clamp(2.0 * (1.0 - std::min(s, 2.0 - s)), 0.0, 2.0);
}

Confidence confidence_term(double vc_dim, std::size_t m_a, std::size_t m_b, double delta) {
  if (m_a == 0 || m_b == 0) throw std::invalid_argument("confidence_term: sample counts must be positive");
  if (!(delta > 0 && delta < 1)) throw std::invalid_argument("confidence_term: delta must lie in (0, 1)");
  if (!(vc_dim > 0)) throw std::invalid_argument("confidence_term: vc_dim must be positive");
  Confidence c;
  double worst = 0.0;
  for (std::size_t m : {m_a, m_b}) {
    const double md = static_cast<double>(m);
    const double rad = (vc_dim * std::log(2.0 * md) - std::log(2.0 / delta)) / md;
    if (rad < 0) {
      c.vacuous = true;
      continue;
    }
    worst = std::max(worst, std::sqrt(rad));
  }
  c.value = c.vacuous ? std::numeric_limits<double>::infinity() : 4.0 * worst;
  return c;
}

double dependence_score(double mi_estimate, bool clamp_to_unit) {
  double s = std::max(0.0, mi_estimate + 2.0 * std::log(2.0));
  if (clamp_to_unit) s = std::min(s, 1.0);
  return s;
}

BoundReport thm_bounds(double e_l, double e_u, double d_hat, const Confidence& confidence, double mi_estimate,
                       const BoundsConfig& cfg) {
  require_rate("e_l", e_l);
  require_rate("e_u", e_u);
  if (!(d_hat >= 0 && d_hat <= 2)) throw std::invalid_argument("d_hat must lie in [0, 2]");
  BoundReport r;
  r.d_hat = d_hat;
  r.confidence = confidence.value;
  r.vacuous = confidence.vacuous;
  r.dependence = dependence_score(mi_estimate, cfg.mi_clamp);
  r.e_l = e_l;
  r.e_u = e_u;
  r.thm1_rhs = e_l + d_hat / 2.0 + confidence.value / 2.0;
  r.thm2_rhs = e_l + std::sqrt(r.dependence);
  r.thm1_slack = r.thm1_rhs - e_u;
  r.thm2_slack = r.thm2_rhs - e_u;
  return r;
}

}  // namespace hilo
