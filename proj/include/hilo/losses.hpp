#pragma once

// Training objectives: InfoNCE representation loss, prototype
// cross-entropy with sharpened teachers, the mean-entropy regulariser, the
// Jensen-Shannon mutual-information estimator, and their SimGCD / HiLo
// combinations.

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "hilo/autodiff.hpp"

namespace hilo {

struct LossConfig {
  double tau_u = 0.07;          // unsupervised contrastive temperature
  double tau_c = 1.0;           // supervised contrastive temperature
  double tau_s = 0.1;           // student classification temperature
  double tau_t = 0.07;          // teacher sharpening temperature
  double lambda = 0.35;         // weight of the all-batch terms
  // 0.1 at full scale; the micro encoder collapses clusters below about 1.
  double entropy_weight = 1.0;  // SimGCD entropy weight
  double hilo_entropy_weight = 1.0;
  double domain_weight = 1.0;   // scales L_d and its entropy term

  void validate() const;
};

// Per-batch scalar values.
struct LossBundle {
  double rep = 0;  // semantic representation terms (weighted)
  double cls = 0;  // semantic classification terms (weighted)
  double l_s = 0;
  double l_d = 0;
  double l_m = 0;
  double delta_s = 0;
  double delta_d = 0;
  double total = 0;
};

struct LossResult {
  LossBundle values;
  Var objective;  // the scalar actually differentiated
};

// -log softmax over one anchor's candidates (positives then negatives),
// averaged over positives. anchor [D], positives [p, D], negatives [q, D].
Var rep_loss(Var anchor, Var positives, Var negatives, double tau);
// alpha * rep_loss, alpha in [0, 1].
Var patchmix_rep_loss(Var anchor, Var positives, Var negatives, double alpha, double tau);

// -sum_k q_k log p_k for a probability vector prediction [K].
Var cls_loss(Var prediction, std::span<const double> target);

// softmax(logits / tau_t) with the gradient stopped.
Var sharpen_teacher(Var logits, double tau_t);

// -H(mean of rows) for predictions [n, K].
Var entropy_reg(Var predictions);

using Critic = std::function<Var(Var)>;

// Jensen-Shannon MI estimate. Row i of z_d and z_s is a joint sample; pairs
// (i, j != i) stand in for the product of marginals. Requires n >= 2.
Var mi_js(Var z_d, Var z_s, const Critic& critic);

// Batched InfoNCE over features [N, D]. Every row j != i is a candidate for
// anchor i. positives[i] lists the positive rows of anchor i; rows with an
// empty list are not anchors. Returns the mean over anchors of
// alpha_i * (-1/|P_i|) sum_{p in P_i} log softmax_i(p).
Var batch_rep_loss(Var features, const std::vector<std::vector<std::size_t>>& positives,
                   std::span<const double> alpha, double tau);

// Mean over rows with nonzero target of -sum_k target[r,k] log softmax(logits[r]/tau)_k.
Var batch_cls_loss(Var logits, const Tensor& targets, double tau);

// Two views of n samples, rows v*n + i.
struct HeadBatch {
  std::size_t n = 0;
  Var rep;         // [2n, proj] unit rows
  Var cls;         // [2n, dim] unit rows
  Var prototypes;  // [K, dim]
  std::vector<double> alpha;     // [2n]; 1 when unmixed
  std::vector<int> sup_group;    // [n]; supervised positive group, -1 outside B^l
  Tensor sup_targets;            // [2n, K]; per-view targets, zero rows outside B^l
  // Fixed all-batch classification targets [2n, K]; when absent the other
  // view's sharpened prediction is used.
  std::optional<Tensor> unsup_targets;
};

struct HeadLoss {
  Var rep_u, rep_sup, cls_u, cls_sup;
  Var combined;  // lambda (rep_u + cls_u) + (1 - lambda) (rep_sup + cls_sup)
  Var rep, cls;  // the weighted rep and cls parts of combined
  Var delta;     // entropy regulariser on the student predictions
};

HeadLoss head_loss(const HeadBatch& batch, const LossConfig& cfg);

// lambda sum_B L^{r,c} + (1 - lambda) sum_{B^l} L^{r,c} + eps Delta, with means.
LossResult simgcd_loss(const HeadBatch& semantic, const LossConfig& cfg);

struct HiloOptions {
  bool use_mi = true;
  // Objective uses -I on gradient-reversed features (critic ascends, encoder
  // descends). When false the objective is the plain total.
  bool critic_reversal = true;
};

// L = L_m + L_s + w_d L_d + varpi (Delta_s + w_d Delta_d). MI is averaged over
// the two views.
LossResult hilo_total(const HeadBatch& semantic, const HeadBatch& domain, const Critic& critic,
                      const LossConfig& cfg, const HiloOptions& opts);

}  // namespace hilo
