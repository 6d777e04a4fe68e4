#include "hilo/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace hilo {

Mode mode_from_string(const std::string& name) {
  if (name == "simgcd") return Mode::simgcd;
  if (name == "hilo") return Mode::hilo;
  throw std::invalid_argument("unknown mode '" + name + "' (expected simgcd or hilo)");
}

std::string to_string(Mode mode) { return mode == Mode::simgcd ? "simgcd" : "hilo"; }

void Ablation::validate() const {
  if (deep_only && shallow_only) throw std::invalid_argument("Ablation: deep_only and shallow_only are exclusive");
}

void TrainConfig::validate() const {
  ablation.validate();
  auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
  if (epochs == 0) fail("epochs must be positive");
  if (batch_size < 2) fail("batch_size must be at least 2");
  if (!(lr0 >= 0) || !(momentum >= 0 && momentum < 1) || !(weight_decay >= 0)) fail("optimizer settings out of range");
  if (eval_every == 0) fail("eval_every must be positive");
  if (!(aug_jitter >= 0) || !(aug_mask >= 0 && aug_mask < 1)) fail("augmentation settings out of range");
  if (!(beta.a > 0) || !(beta.b > 0)) fail("beta parameters must be positive");
  if (mi_block < 2) fail("mi_block must be at least 2");
}

EncoderConfig RunConfig::effective_encoder() const {
  EncoderConfig e = encoder;
  e.patch_count = task.patch_count;
  e.input_dim = task.input_dim;
  if (train.ablation.deep_only) e.domain_tap_layer = e.semantic_tap_layer = e.num_layers;
  if (train.ablation.shallow_only) e.domain_tap_layer = e.semantic_tap_layer = 1;
  return e;
}

void RunConfig::validate() const {
  task.validate();
  train.validate();
  effective_encoder().validate();
  loss.validate();
  curriculum.validate(train.epochs);
  bounds.validate();
  if (encoder.k_s < task.num_classes) {
    throw std::invalid_argument("RunConfig: encoder.k_s must cover every class of the task");
  }
}

double cosine_lr(double lr0, std::size_t t, std::size_t total) {
  if (total == 0) throw std::invalid_argument("cosine_lr: total must be positive");
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total)));
}

namespace {

std::size_t argmax_dot(const std::vector<double>& z, const Tensor& protos) {
  std::size_t best = 0;
  double bv = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < protos.dim(0); ++k) {
    double s = 0;
    for (std::size_t j = 0; j < z.size(); ++j) s += z[j] * protos.at(k, j);
    if (s > bv) {
      bv = s;
      best = k;
    }
  }
  return best;
}

Tensor rows_tensor(const std::vector<ForwardOutputs>& outs, std::size_t begin, std::size_t len,
                   std::vector<double> ForwardOutputs::*field) {
  const std::size_t d = (outs[begin].*field).size();
  Tensor t({len, d});
  for (std::size_t r = 0; r < len; ++r) std::copy_n((outs[begin + r].*field).begin(), d, t.data() + r * d);
  return t;
}

std::set<std::size_t> old_set(const Dataset& data) {
  std::set<std::size_t> s;
  for (std::size_t c = 0; c < data.num_old; ++c) s.insert(c);
  return s;
}

}  // namespace

EvalReport evaluate(const Dataset& data, const EncoderState& state, const RunConfig& cfg) {
  EvalReport rep;
  const std::size_t n = data.samples.size();
  if (n == 0) return rep;
  const auto outs = encode(state, data.all_patches());
  std::vector<std::size_t> t_seen, p_seen, t_unseen, p_unseen, t_lab, p_lab;
  std::size_t n_a = 0, n_b = 0, wrong_a = 0, wrong_b = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Sample& s = data.samples[i];
    const std::size_t ps = argmax_dot(outs[i].z_hat_s, state.params.proto_s);
    const std::size_t pd = argmax_dot(outs[i].z_hat_d, state.params.proto_d);
    if (s.labelled) {
      t_lab.push_back(s.class_id);
      p_lab.push_back(ps);
    } else if (s.domain_id == 0) {
      t_seen.push_back(s.class_id);
      p_seen.push_back(ps);
    } else {
      t_unseen.push_back(s.class_id);
      p_unseen.push_back(ps);
    }
    if (s.domain_id == 0) {
      ++n_a;
      wrong_a += pd != 0;
    } else {
      ++n_b;
      wrong_b += pd == 0;
    }
  }
  const auto old = old_set(data);
  rep.seen = cluster_acc(t_seen, p_seen, old);
  rep.unseen = cluster_acc(t_unseen, p_unseen, old);
  rep.labelled = cluster_acc(t_lab, p_lab, old);
  rep.err_a = n_a ? static_cast<double>(wrong_a) / static_cast<double>(n_a) : 0.0;
  rep.err_b = n_b ? static_cast<double>(wrong_b) / static_cast<double>(n_b) : 0.0;

  double mi_total = 0;
  std::size_t blocks = 0;
  for (std::size_t start = 0; start + 1 < n; start += cfg.train.mi_block) {
    const std::size_t len = std::min(cfg.train.mi_block, n - start);
    if (len < 2) break;
    Tape tape;
    BoundEncoder enc = bind(tape, state, false);
    Var zd = tape.constant(rows_tensor(outs, start, len, &ForwardOutputs::z_d));
    Var zs = tape.constant(rows_tensor(outs, start, len, &ForwardOutputs::z_s));
    mi_total += mi_js(zd, zs, [&enc](Var x) { return critic(enc, x); }).value().item();
    ++blocks;
  }
  rep.mi_estimate = blocks ? mi_total / static_cast<double>(blocks) : -2.0 * std::log(2.0);

  BoundsConfig bc = cfg.bounds;
  if (bc.vc_dim == 0) bc.vc_dim = static_cast<double>(state.domain_head_parameter_count());
  const double d_hat = proxy_a_distance(rep.err_a, rep.err_b);
  const Confidence conf = confidence_term(bc.vc_dim, std::max<std::size_t>(n_a, 1), std::max<std::size_t>(n_b, 1), bc.delta);
  rep.bounds = thm_bounds(1.0 - rep.labelled.acc_all, 1.0 - rep.unseen.acc_all, d_hat, conf, rep.mi_estimate, bc);
  return rep;
}

Trainer::Trainer(const Dataset& data, const RunConfig& cfg, std::uint64_t seed)
    : data_(data), cfg_(cfg), seed_(seed) {
  cfg_.validate();
  if (data.patch_count != cfg.task.patch_count || data.input_dim != cfg.task.input_dim) {
    throw std::invalid_argument("Trainer: dataset geometry does not match the task config");
  }
  if (data.samples.empty()) throw std::invalid_argument("Trainer: empty dataset");
  state_ = init_encoder(cfg_.effective_encoder(), seed);
  velocity_ = state_.params;
  for (auto& [name, t] : velocity_.entries()) *t = Tensor(t->shape(), 0.0);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x68696c6fu};
  rng_.seed(seq);

  double sum = 0, sq = 0;
  std::size_t count = 0;
  for (const auto& s : data.samples) {
    for (double v : s.patches) {
      sum += v;
      sq += v * v;
      ++count;
    }
    labelled_.push_back(s.labelled);
  }
  const double mean = sum / static_cast<double>(count);
  data_std_ = std::sqrt(std::max(sq / static_cast<double>(count) - mean * mean, 0.0));
}

Trainer::StepInputs Trainer::draw_step(const std::vector<std::size_t>& batch) {
  const EncoderConfig& ec = state_.config;
  const std::size_t b = batch.size();
  const std::size_t p = ec.patch_count, in = ec.input_dim, width = p * in;
  const TrainConfig& tc = cfg_.train;

  StepInputs st;
  st.batch = batch;
  const Tensor clean = data_.patches(batch);
  st.views = Tensor({2 * b, p, in});
  std::normal_distribution<double> normal(0.0, tc.aug_jitter * data_std_);
  std::bernoulli_distribution mask(tc.aug_mask);
  for (std::size_t v = 0; v < 2; ++v) {
    for (std::size_t i = 0; i < b; ++i) {
      double* dst = st.views.data() + (v * b + i) * width;
      const double* src = clean.data() + i * width;
      for (std::size_t j = 0; j < p; ++j) {
        const bool drop = mask(rng_);
        for (std::size_t c = 0; c < in; ++c) {
          const double noise = normal(rng_);
          dst[j * in + c] = drop ? 0.0 : src[j * in + c] + noise;
        }
      }
    }
  }

  std::vector<bool> lab(b);
  bool any_unlabelled = false;
  for (std::size_t i = 0; i < b; ++i) {
    lab[i] = labelled_[batch[i]];
    any_unlabelled |= !lab[i];
  }
  st.specs = identity_mix(2 * b, p);
  st.mixed = tc.mode == Mode::hilo && !tc.ablation.no_patchmix && any_unlabelled;
  if (st.mixed) {
    Tape side;
    BoundEncoder frozen = bind(side, state_, false);
    const Tensor attn = forward(frozen, embed(frozen, clean), b).attn_cls;
    for (std::size_t v = 0; v < 2; ++v) {
      auto plan = plan_mix(lab, attn, tc.beta, rng_);
      for (std::size_t i = 0; i < b; ++i) {
        plan[i].partner += v * b;
        st.specs[v * b + i] = std::move(plan[i]);
      }
    }
  }
  return st;
}

LossResult Trainer::step_loss(const BoundEncoder& enc, const StepInputs& in, bool critic_reversal) const {
  const EncoderConfig& ec = state_.config;
  const std::size_t b = in.batch.size();
  const std::size_t p = ec.patch_count;
  const TrainConfig& tc = cfg_.train;
  const bool hilo_mode = tc.mode == Mode::hilo;
  const auto& batch = in.batch;
  const auto& specs = in.specs;
  if (in.views.dim(0) != 2 * b || specs.size() != 2 * b)
    throw std::invalid_argument("step_loss: inputs do not match the batch");
  std::vector<bool> lab(b);
  for (std::size_t i = 0; i < b; ++i) lab[i] = labelled_[batch[i]];

  Var tokens = embed(enc, in.views);
  if (in.mixed) tokens = mix_tokens(tokens, specs, p);
  const EncoderOutputs out = forward(enc, tokens, 2 * b);

  HeadBatch sem;
  sem.n = b;
  sem.rep = out.z_s;
  sem.cls = out.z_hat_s;
  sem.prototypes = enc.params.proto_s;
  sem.alpha.resize(2 * b);
  sem.sup_group.assign(b, -1);
  sem.sup_targets = Tensor({2 * b, ec.k_s}, 0.0);
  for (std::size_t r = 0; r < 2 * b; ++r) sem.alpha[r] = specs[r].alpha;
  for (std::size_t i = 0; i < b; ++i) {
    if (!lab[i]) continue;
    const std::size_t cls = data_.samples[batch[i]].class_id;
    sem.sup_group[i] = static_cast<int>(cls);
    for (std::size_t v = 0; v < 2; ++v) {
      const auto q = smooth_label(cls, ec.k_s, sem.alpha[v * b + i]);
      std::copy(q.begin(), q.end(), sem.sup_targets.data() + (v * b + i) * ec.k_s);
    }
  }
  if (!hilo_mode) return simgcd_loss(sem, cfg_.loss);

  HeadBatch dom;
  dom.n = b;
  dom.rep = out.z_d;
  dom.cls = out.z_hat_d;
  dom.prototypes = enc.params.proto_d;
  dom.alpha = sem.alpha;
  dom.sup_group.assign(b, -1);
  dom.sup_targets = Tensor({2 * b, ec.k_d}, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    if (!lab[i]) continue;
    dom.sup_group[i] = 0;
    for (std::size_t v = 0; v < 2; ++v) {
      const auto q = smooth_label(0, ec.k_d, dom.alpha[v * b + i]);
      std::copy(q.begin(), q.end(), dom.sup_targets.data() + (v * b + i) * ec.k_d);
    }
  }
  if (cfg_.loss.domain_weight != 0.0) {
    std::vector<int> forced(2 * b, -1);
    for (std::size_t v = 0; v < 2; ++v)
      for (std::size_t i = 0; i < b; ++i)
        if (lab[i]) forced[v * b + i] = 0;
    const ClusterResult cr = ss_kmeans(out.z_hat_d.value(), ec.k_d, forced);
    Tensor targets({2 * b, ec.k_d}, 0.0);
    for (std::size_t r = 0; r < 2 * b; ++r) targets.at(r, cr.assignments[r]) = 1.0;
    dom.unsup_targets = std::move(targets);
  }
  HiloOptions opts;
  opts.use_mi = !tc.ablation.no_mi;
  opts.critic_reversal = critic_reversal;
  return hilo_total(sem, dom, [&enc](Var x) { return critic(enc, x); }, cfg_.loss, opts);
}

LossResult Trainer::probe_loss(Tape& tape, const std::vector<std::size_t>& batch) {
  const StepInputs in = draw_step(batch);
  BoundEncoder enc = bind(tape, state_, true);
  return step_loss(enc, in);
}

void Trainer::apply_update(const EncoderParams<Tensor>& grads, double lr) {
  auto params = state_.params.entries();
  auto vel = velocity_.entries();
  auto g = grads.entries();
  const double mu = cfg_.train.momentum, wd = cfg_.train.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k].second;
    Tensor& v = *vel[k].second;
    const Tensor& gk = *g[k].second;
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = mu * v[j] + gk[j] + wd * p[j];
      p[j] -= lr * v[j];
    }
  }
  state_.normalize_prototypes();
}

EpochStats Trainer::train_epoch() {
  const TrainConfig& tc = cfg_.train;
  EpochStats st;
  st.epoch = epoch_ + 1;
  st.lr = cosine_lr(tc.lr0, epoch_, tc.epochs);
  const std::size_t n = data_.samples.size();

  std::vector<double> weights(n, 1.0);
  std::vector<bool> unseen_pool(n, false);
  if (tc.mode == Mode::hilo && !tc.ablation.no_curriculum) {
    const auto outs = encode(state_, data_.all_patches());
    Tensor feats({n, outs.front().z_d.size()});
    for (std::size_t i = 0; i < n; ++i) std::copy(outs[i].z_d.begin(), outs[i].z_d.end(), feats.data() + i * feats.dim(1));
    partition_ = partition_domains(feats, labelled_, cfg_.curriculum.k_partition, seed_ + st.epoch);
    weights = sample_weights(labelled_, partition_, st.epoch, cfg_.curriculum);
    for (std::size_t i : partition_.unseen) unseen_pool[i] = true;
  }

  const std::size_t steps = (n + tc.batch_size - 1) / tc.batch_size;
  for (std::size_t s = 0; s < steps; ++s) {
    const std::vector<std::size_t> batch = draw_batch(weights, tc.batch_size, rng_);
    for (std::size_t i : batch) st.unseen_drawn += unseen_pool[i];
    const StepInputs in = draw_step(batch);
    Tape tape;
    BoundEncoder enc = bind(tape, state_, true);
    LossResult res = step_loss(enc, in);
    const LossBundle& v = res.values;
    if (!std::isfinite(v.total) || !std::isfinite(res.objective.value().item())) {
      std::ostringstream msg;
      msg << "non-finite loss at epoch " << st.epoch << " step " << s + 1 << ": total " << v.total << " l_s " << v.l_s
          << " l_d " << v.l_d << " l_m " << v.l_m << " delta_s " << v.delta_s << " delta_d " << v.delta_d;
      throw std::runtime_error(msg.str());
    }
    tape.backward(res.objective);
    apply_update(gradients(tape, enc), st.lr);
    st.step_totals.push_back(v.total);
    st.mean.rep += v.rep;
    st.mean.cls += v.cls;
    st.mean.l_s += v.l_s;
    st.mean.l_d += v.l_d;
    st.mean.l_m += v.l_m;
    st.mean.delta_s += v.delta_s;
    st.mean.delta_d += v.delta_d;
    st.mean.total += v.total;
  }
  st.steps = steps;
  const double inv = 1.0 / static_cast<double>(steps);
  for (double* f : {&st.mean.rep, &st.mean.cls, &st.mean.l_s, &st.mean.l_d, &st.mean.l_m, &st.mean.delta_s,
                    &st.mean.delta_d, &st.mean.total}) {
    *f *= inv;
  }
  ++epoch_;
  return st;
}

RunResult train_run(const Dataset& data, const RunConfig& cfg, std::uint64_t seed,
                    const std::function<void(const EvalRow&)>& on_row) {
  Trainer tr(data, cfg, seed);
  RunResult res;
  res.seed = seed;
  const std::size_t total = cfg.train.epochs;
  for (std::size_t e = 1; e <= total; ++e) {
    const EpochStats st = tr.train_epoch();
    if (e % cfg.train.eval_every == 0 || e == total) {
      EvalRow row{e, st.lr, st.mean, tr.evaluate()};
      if (on_row) on_row(row);
      res.rows.push_back(std::move(row));
    }
  }
  return res;
}

}  // namespace hilo
