#include "hilo/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "hilo/encoder.hpp"

namespace hilo {

void LossConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("LossConfig: " + m); };
  if (!(tau_u > 0) || !(tau_c > 0) || !(tau_s > 0) || !(tau_t > 0)) fail("temperatures must be positive");
  if (!(lambda >= 0 && lambda <= 1)) fail("lambda must lie in [0, 1]");
  if (!(entropy_weight >= 0) || !(hilo_entropy_weight >= 0)) fail("entropy weights must be non-negative");
  if (!(domain_weight >= 0)) fail("domain_weight must be non-negative");
}

namespace {

Var zero_like(const Var& v) { return v.tape().constant(Tensor::scalar(0.0)); }

void require_unit_interval(const char* op, double a) {
  if (!(a >= 0.0 && a <= 1.0)) throw std::invalid_argument(std::string(op) + ": alpha must lie in [0, 1]");
}

}  // namespace

Var rep_loss(Var anchor, Var positives, Var negatives, double tau) {
  if (anchor.shape().size() != 1) throw std::invalid_argument("rep_loss: anchor must be a vector");
  if (positives.shape().size() != 2 || positives.shape()[0] == 0) {
    throw std::invalid_argument("rep_loss: positive set must be non-empty");
  }
  const std::size_t d = anchor.shape()[0];
  const std::size_t p = positives.shape()[0];
  Var candidates = positives;
  if (negatives.valid() && negatives.shape().size() == 2 && negatives.shape()[0] > 0) {
    const Var parts[] = {positives, negatives};
    candidates = concat(parts, 0);
  }
  Var a = reshape(anchor, {1, d});
  Var logits = matmul(a, transpose(candidates));  // [1, p + q]
  Var logp = slice(log_softmax(logits, tau), 1, 0, p);
  return scale(sum(logp), -1.0 / static_cast<double>(p));
}

Var patchmix_rep_loss(Var anchor, Var positives, Var negatives, double alpha, double tau) {
  require_unit_interval("patchmix_rep_loss", alpha);
  return scale(rep_loss(anchor, positives, negatives, tau), alpha);
}

Var cls_loss(Var prediction, std::span<const double> target) {
  if (prediction.shape().size() != 1 || prediction.shape()[0] != target.size()) {
    throw std::invalid_argument("cls_loss: prediction " + shape_str(prediction.shape()) +
                                " does not match target length " + std::to_string(target.size()));
  }
  double total = 0;
  for (double q : target) {
    if (!(q >= 0)) throw std::invalid_argument("cls_loss: target entries must be non-negative");
    total += q;
  }
  if (std::abs(total - 1.0) > 1e-6) throw std::invalid_argument("cls_loss: target must sum to 1");
  Var q = prediction.tape().constant(Tensor::vector({target.begin(), target.end()}));
  return neg(sum(mul(q, log(prediction))));
}

Var sharpen_teacher(Var logits, double tau_t) {
  if (!(tau_t > 0)) throw std::invalid_argument("sharpen_teacher: temperature must be positive");
  return stop_gradient(softmax(logits, tau_t));
}

Var entropy_reg(Var predictions) {
  if (predictions.shape().size() != 2 || predictions.shape()[0] == 0) {
    throw std::invalid_argument("entropy_reg: expected non-empty [n, K] predictions");
  }
  return sum(xlogx(mean_axis(predictions, 0)));
}

Var mi_js(Var z_d, Var z_s, const Critic& critic) {
  if (z_d.shape().size() != 2 || z_d.shape() != z_s.shape()) {
    throw std::invalid_argument("mi_js: feature shapes " + shape_str(z_d.shape()) + " and " +
                                shape_str(z_s.shape()) + " must match");
  }
  const std::size_t n = z_d.shape()[0];
  if (n < 2) throw std::invalid_argument("mi_js: need at least two samples");
  std::vector<std::size_t> rows_d(n * n), rows_s(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      rows_d[i * n + j] = i;
      rows_s[i * n + j] = j;
    }
  }
  const Var parts[] = {gather_rows(z_d, rows_d), gather_rows(z_s, rows_s)};
  Var scores = critic(concat(parts, 1));
  if (shape_numel(scores.shape()) != n * n) {
    throw std::invalid_argument("mi_js: critic must return one score per pair");
  }
  Var m = reshape(scores, {n, n});
  Tensor diag({n, n}, 0.0), off({n, n}, 1.0 / static_cast<double>(n * (n - 1)));
  for (std::size_t i = 0; i < n; ++i) {
    diag.at(i, i) = 1.0 / static_cast<double>(n);
    off.at(i, i) = 0.0;
  }
  Tape& tape = m.tape();
  Var joint = neg(sum(mul(softplus(neg(m)), tape.constant(std::move(diag)))));
  Var marginal = sum(mul(softplus(m), tape.constant(std::move(off))));
  return sub(joint, marginal);
}

Var batch_rep_loss(Var features, const std::vector<std::vector<std::size_t>>& positives,
                   std::span<const double> alpha, double tau) {
  if (features.shape().size() != 2) throw std::invalid_argument("batch_rep_loss: features must be [N, D]");
  const std::size_t n = features.shape()[0];
  if (positives.size() != n || alpha.size() != n) {
    throw std::invalid_argument("batch_rep_loss: positives and alpha must have one entry per row");
  }
  std::size_t anchors = 0;
  for (const auto& p : positives) anchors += p.empty() ? 0 : 1;
  if (anchors == 0) return zero_like(features);

  Tensor mask({n, n}, 1.0);
  Tensor weight({n, n}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    mask.at(i, i) = 0.0;
    if (positives[i].empty()) continue;
    require_unit_interval("batch_rep_loss", alpha[i]);
    const double w = alpha[i] / (static_cast<double>(positives[i].size()) * static_cast<double>(anchors));
    for (std::size_t p : positives[i]) {
      if (p >= n || p == i) throw std::invalid_argument("batch_rep_loss: invalid positive index");
      weight.at(i, p) += w;
    }
  }
  Var sim = matmul(features, transpose(features));
  Var logp = log_softmax(sim, tau, &mask);
  return neg(sum(mul(logp, features.tape().constant(std::move(weight)))));
}

namespace {

// Mean over rows with any target mass of the cross-entropy against targets.
Var cls_against(Var logits, Var targets, double tau) {
  const Tensor& t = targets.value();
  const std::size_t k = t.shape().back();
  std::size_t rows = 0;
  for (std::size_t r = 0; r < t.size() / k; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < k; ++c) s += t[r * k + c];
    if (s != 0.0) ++rows;
  }
  if (rows == 0) return zero_like(logits);
  return scale(sum(mul(log_softmax(logits, tau), targets)), -1.0 / static_cast<double>(rows));
}

}  // namespace

Var batch_cls_loss(Var logits, const Tensor& targets, double tau) {
  if (logits.shape() != targets.shape()) {
    throw std::invalid_argument("batch_cls_loss: logits " + shape_str(logits.shape()) + " and targets " +
                                shape_str(targets.shape()) + " differ");
  }
  return cls_against(logits, logits.tape().constant(targets), tau);
}

HeadLoss head_loss(const HeadBatch& b, const LossConfig& cfg) {
  const std::size_t n = b.n;
  const std::size_t rows = 2 * n;
  if (n == 0) throw std::invalid_argument("head_loss: empty batch");
  if (b.rep.shape().size() != 2 || b.rep.shape()[0] != rows || b.cls.shape().size() != 2 ||
      b.cls.shape()[0] != rows) {
    throw std::invalid_argument("head_loss: features must hold two views of every sample");
  }
  if (b.alpha.size() != rows || b.sup_group.size() != n) {
    throw std::invalid_argument("head_loss: alpha needs 2n entries and sup_group n entries");
  }
  const std::size_t k = b.prototypes.shape()[0];
  if (b.sup_targets.shape() != Shape{rows, k}) {
    throw std::invalid_argument("head_loss: sup_targets must be " + shape_str({rows, k}));
  }

  std::vector<std::vector<std::size_t>> pos_u(rows), pos_sup(rows);
  for (std::size_t r = 0; r < rows; ++r) pos_u[r] = {(r + n) % rows};
  for (std::size_t i = 0; i < n; ++i) {
    if (b.sup_group[i] < 0) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (b.sup_group[j] != b.sup_group[i]) continue;
      for (std::size_t v = 0; v < 2; ++v) {
        for (std::size_t w = 0; w < 2; ++w) {
          if (i == j && v == w) continue;
          pos_sup[v * n + i].push_back(w * n + j);
        }
      }
    }
  }

  HeadLoss out;
  out.rep_u = batch_rep_loss(b.rep, pos_u, b.alpha, cfg.tau_u);
  out.rep_sup = batch_rep_loss(b.rep, pos_sup, b.alpha, cfg.tau_c);

  Var scores = prototype_scores(b.cls, b.prototypes);  // [2n, K]
  Var targets;
  if (b.unsup_targets) {
    if (b.unsup_targets->shape() != Shape{rows, k}) {
      throw std::invalid_argument("head_loss: unsup_targets must be " + shape_str({rows, k}));
    }
    targets = scores.tape().constant(*b.unsup_targets);
  } else {
    std::vector<std::size_t> swap(rows);
    for (std::size_t r = 0; r < rows; ++r) swap[r] = (r + n) % rows;
    targets = sharpen_teacher(gather_rows(scores, swap), cfg.tau_t);
  }
  out.cls_u = cls_against(scores, targets, cfg.tau_s);
  out.cls_sup = batch_cls_loss(scores, b.sup_targets, cfg.tau_s);
  out.delta = entropy_reg(softmax(scores, cfg.tau_s));

  out.rep = add(scale(out.rep_u, cfg.lambda), scale(out.rep_sup, 1.0 - cfg.lambda));
  out.cls = add(scale(out.cls_u, cfg.lambda), scale(out.cls_sup, 1.0 - cfg.lambda));
  out.combined = add(out.rep, out.cls);
  return out;
}

LossResult simgcd_loss(const HeadBatch& semantic, const LossConfig& cfg) {
  cfg.validate();
  HeadLoss h = head_loss(semantic, cfg);
  LossResult r;
  r.objective = add(h.combined, scale(h.delta, cfg.entropy_weight));
  r.values.rep = h.rep.value().item();
  r.values.cls = h.cls.value().item();
  r.values.l_s = h.combined.value().item();
  r.values.delta_s = h.delta.value().item();
  r.values.total = r.objective.value().item();
  return r;
}

LossResult hilo_total(const HeadBatch& semantic, const HeadBatch& domain, const Critic& critic,
                      const LossConfig& cfg, const HiloOptions& opts) {
  cfg.validate();
  if (semantic.n != domain.n) throw std::invalid_argument("hilo_total: head batches differ in size");
  const double wd = cfg.domain_weight;
  const double ew = cfg.hilo_entropy_weight;
  HeadLoss hs = head_loss(semantic, cfg);
  LossResult r;
  r.values.rep = hs.rep.value().item();
  r.values.cls = hs.cls.value().item();
  r.values.l_s = hs.combined.value().item();
  r.values.delta_s = hs.delta.value().item();

  Var obj = hs.combined;
  Var delta = hs.delta;
  if (wd != 0.0) {
    HeadLoss hd = head_loss(domain, cfg);
    r.values.l_d = hd.combined.value().item();
    r.values.delta_d = hd.delta.value().item();
    obj = add(obj, scale(hd.combined, wd));
    delta = add(delta, scale(hd.delta, wd));
  }
  obj = add(obj, scale(delta, ew));

  double lm = 0.0;
  if (opts.use_mi) {
    const std::size_t n = semantic.n;
    Var mi;
    for (std::size_t v = 0; v < 2; ++v) {
      Var zd = slice(domain.rep, 0, v * n, n);
      Var zs = slice(semantic.rep, 0, v * n, n);
      if (opts.critic_reversal) {
        zd = grad_reverse(zd);
        zs = grad_reverse(zs);
      }
      Var term = scale(mi_js(zd, zs, critic), 0.5);
      mi = mi.valid() ? add(mi, term) : term;
    }
    lm = mi.value().item();
    obj = opts.critic_reversal ? sub(obj, mi) : add(mi, obj);
  }
  r.values.l_m = lm;
  r.values.total = lm + r.values.l_s + wd * r.values.l_d + ew * (r.values.delta_s + wd * r.values.delta_d);
  r.objective = obj;
  return r;
}

}  // namespace hilo
