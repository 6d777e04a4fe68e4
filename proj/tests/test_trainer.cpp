#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <stdexcept>

#include "doctest.h"
#include "hilo/trainer.hpp"

using namespace hilo;

namespace {

RunConfig small_run() {
  RunConfig c;
  c.task.samples_per_class_per_domain = 6;
  c.task.seed = 3;
  c.encoder.num_layers = 2;
  c.encoder.token_dim = 16;
  c.encoder.head_count = 2;
  c.encoder.mlp_hidden = 16;
  c.encoder.head_hidden = 16;
  c.encoder.proj_dim = 8;
  c.encoder.critic_hidden = 8;
  c.encoder.semantic_tap_layer = 2;
  c.train.epochs = 3;
  c.train.batch_size = 16;
  c.train.eval_every = 2;
  c.curriculum.t_switch = 1;
  return c;
}

double max_param_diff(const EncoderState& a, const EncoderState& b) {
  const auto ea = a.params.entries();
  const auto eb = b.params.entries();
  double m = 0;
  for (std::size_t k = 0; k < ea.size(); ++k) {
    for (std::size_t j = 0; j < ea[k].second->size(); ++j) {
      m = std::max(m, std::abs((*ea[k].second)[j] - (*eb[k].second)[j]));
    }
  }
  return m;
}

}  // namespace

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0.1, 0, 10) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(cosine_lr(0.1, 5, 10) == doctest::Approx(0.05).epsilon(1e-12));
  CHECK(std::abs(cosine_lr(0.1, 10, 10)) < 1e-15);
  for (std::size_t t = 1; t <= 10; ++t) CHECK(cosine_lr(0.1, t, 10) < cosine_lr(0.1, t - 1, 10));
  CHECK_THROWS_AS(cosine_lr(0.1, 0, 0), std::invalid_argument);
}

TEST_CASE("mode names and config validation") {
  CHECK(mode_from_string("simgcd") == Mode::simgcd);
  CHECK(to_string(mode_from_string("hilo")) == "hilo");
  CHECK_THROWS_AS(mode_from_string("gcd"), std::invalid_argument);

  RunConfig c = small_run();
  CHECK_NOTHROW(c.validate());
  RunConfig bad = c;
  bad.train.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.train.batch_size = 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.train.momentum = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.encoder.k_s = 4;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.train.ablation.deep_only = bad.train.ablation.shallow_only = true;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.curriculum.t_switch = 4;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("ablation flags move the taps") {
  RunConfig c = small_run();
  CHECK(c.effective_encoder().domain_tap_layer == 1);
  CHECK(c.effective_encoder().semantic_tap_layer == 2);
  c.train.ablation.deep_only = true;
  CHECK(c.effective_encoder().domain_tap_layer == 2);
  CHECK(c.effective_encoder().semantic_tap_layer == 2);
  c.train.ablation = {};
  c.train.ablation.shallow_only = true;
  CHECK(c.effective_encoder().domain_tap_layer == 1);
  CHECK(c.effective_encoder().semantic_tap_layer == 1);
  c.task.input_dim = 5;
  CHECK(c.effective_encoder().input_dim == 5);
}

TEST_CASE("trainer rejects a dataset of another geometry") {
  RunConfig c = small_run();
  const Dataset data = generate(c.task);
  RunConfig other = c;
  other.task.input_dim = 4;
  CHECK_THROWS_AS(Trainer(data, other, 0), std::invalid_argument);
  Dataset empty = data;
  empty.samples.clear();
  CHECK_THROWS_AS(Trainer(empty, c, 0), std::invalid_argument);
}

TEST_CASE("zero learning rate leaves the parameters untouched") {
  for (Mode mode : {Mode::simgcd, Mode::hilo}) {
    RunConfig c = small_run();
    c.train.mode = mode;
    c.train.lr0 = 0.0;
    const Dataset data = generate(c.task);
    Trainer tr(data, c, 5);
    const EncoderState before = tr.state();
    const EpochStats st = tr.train_epoch();
    CHECK(st.lr == 0.0);
    CHECK(st.steps == (data.samples.size() + 15) / 16);
    CHECK(st.step_totals.size() == st.steps);
    CHECK(max_param_diff(tr.state(), before) <= 1e-15);
    CHECK(tr.epoch() == 1);
  }
}

TEST_CASE("training is reproducible and seed dependent") {
  RunConfig c = small_run();
  const Dataset data = generate(c.task);
  Trainer a(data, c, 11), b(data, c, 11), other(data, c, 12);
  for (int e = 0; e < 2; ++e) {
    const EpochStats sa = a.train_epoch();
    const EpochStats sb = b.train_epoch();
    CHECK(sa.step_totals == sb.step_totals);
    CHECK(sa.unseen_drawn == sb.unseen_drawn);
    other.train_epoch();
  }
  CHECK(a.state() == b.state());
  CHECK_FALSE(a.state() == other.state());
  CHECK(max_param_diff(a.state(), other.state()) > 1e-6);
}

TEST_CASE("prototypes stay on the unit sphere and losses stay finite") {
  RunConfig c = small_run();
  c.train.lr0 = 0.2;
  const Dataset data = generate(c.task);
  Trainer tr(data, c, 2);
  for (int e = 0; e < 2; ++e) {
    const EpochStats st = tr.train_epoch();
    for (double v : st.step_totals) CHECK(std::isfinite(v));
    CHECK(std::isfinite(st.mean.l_m));
  }
  for (const Tensor* protos : {&tr.state().params.proto_s, &tr.state().params.proto_d}) {
    for (std::size_t k = 0; k < protos->dim(0); ++k) {
      double s = 0;
      for (std::size_t j = 0; j < protos->dim(1); ++j) s += protos->at(k, j) * protos->at(k, j);
      CHECK(std::sqrt(s) == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("labels of unlabelled samples never reach the training path") {
  for (Mode mode : {Mode::simgcd, Mode::hilo}) {
    RunConfig c = small_run();
    c.train.mode = mode;
    const Dataset data = generate(c.task);
    Dataset shuffled = data;
    std::mt19937_64 rng(9);
    std::uniform_int_distribution<std::size_t> cls(0, data.num_classes - 1);
    for (auto& s : shuffled.samples) {
      if (!s.labelled) s.class_id = cls(rng);
    }
    Trainer a(data, c, 4), b(shuffled, c, 4);
    for (int e = 0; e < 2; ++e) CHECK(a.train_epoch().step_totals == b.train_epoch().step_totals);
    CHECK(a.state() == b.state());
  }
}

TEST_CASE("probe loss consumes a step's draws without updating") {
  RunConfig c = small_run();
  const Dataset data = generate(c.task);
  Trainer a(data, c, 1), b(data, c, 1);
  const EncoderState before = a.state();
  const std::vector<std::size_t> batch{0, 1, 2, 3, 40, 41, 80, 81, 100, 119};
  Tape ta, tb;
  const LossResult ra = a.probe_loss(ta, batch);
  const LossResult rb = b.probe_loss(tb, batch);
  CHECK(ra.values.total == rb.values.total);
  CHECK(std::isfinite(ra.values.total));
  CHECK(ra.values.total == doctest::Approx(ra.objective.value().item() + 2.0 * ra.values.l_m).epsilon(1e-9));
  CHECK(a.state() == before);
}

TEST_CASE("hilo with every component off reproduces simgcd") {
  RunConfig base = small_run();
  const Dataset data = generate(base.task);
  RunConfig sim = base;
  sim.train.mode = Mode::simgcd;
  RunConfig off = base;
  off.train.ablation.no_mi = off.train.ablation.no_curriculum = off.train.ablation.no_patchmix = true;
  off.loss.domain_weight = 0.0;
  Trainer a(data, sim, 7), b(data, off, 7);
  for (int e = 0; e < 2; ++e) {
    const EpochStats sa = a.train_epoch();
    const EpochStats sb = b.train_epoch();
    REQUIRE(sa.step_totals.size() == sb.step_totals.size());
    for (std::size_t s = 0; s < sa.step_totals.size(); ++s) {
      CHECK(std::abs(sa.step_totals[s] - sb.step_totals[s]) <= 1e-10);
    }
  }
  CHECK(max_param_diff(a.state(), b.state()) <= 1e-10);
}

TEST_CASE("nothing from the unseen pool is drawn before the switch") {
  RunConfig c = small_run();
  c.train.epochs = 4;
  c.curriculum.t_switch = 2;
  const Dataset data = generate(c.task);
  Trainer tr(data, c, 0);
  CHECK(tr.train_epoch().unseen_drawn == 0);
  CHECK(tr.train_epoch().unseen_drawn == 0);
  const DomainPartition& part = tr.partition();
  CHECK(part.seen.size() + part.unseen.size() + data.labelled_count() == data.samples.size());

  RunConfig plain = c;
  plain.train.ablation.no_curriculum = true;
  Trainer flat(data, plain, 0);
  for (int e = 0; e < 4; ++e) CHECK(flat.train_epoch().unseen_drawn == 0);
}

TEST_CASE("evaluation with collapsed prototypes") {
  RunConfig c = small_run();
  const Dataset data = generate(c.task);
  EncoderState st = init_encoder(c.effective_encoder(), 0);
  for (Tensor* protos : {&st.params.proto_s, &st.params.proto_d}) {
    for (std::size_t k = 1; k < protos->dim(0); ++k) {
      for (std::size_t j = 0; j < protos->dim(1); ++j) protos->at(k, j) = protos->at(0, j);
    }
  }
  const EvalReport rep = evaluate(data, st, c);

  // Every sample falls in the first cluster: accuracy is the largest class share.
  std::map<std::size_t, std::size_t> seen_counts;
  std::size_t seen_total = 0;
  for (const auto& s : data.samples) {
    if (s.labelled || s.domain_id != 0) continue;
    ++seen_counts[s.class_id];
    ++seen_total;
  }
  std::size_t top = 0;
  for (const auto& [k, n] : seen_counts) top = std::max(top, n);
  CHECK(rep.seen.acc_all == doctest::Approx(static_cast<double>(top) / static_cast<double>(seen_total)));
  CHECK(rep.unseen.acc_all == doctest::Approx(0.1));

  CHECK(rep.err_a == 0.0);
  CHECK(rep.err_b == 1.0);
  CHECK(rep.bounds.d_hat == 0.0);
  CHECK(rep.bounds.e_l == doctest::Approx(1.0 - rep.labelled.acc_all));
  CHECK(rep.bounds.e_u == doctest::Approx(1.0 - rep.unseen.acc_all));
  CHECK(rep.bounds.thm1_rhs >= rep.bounds.e_l);
  CHECK(rep.bounds.thm2_rhs >= rep.bounds.e_l);
  CHECK(std::isfinite(rep.mi_estimate));
}

TEST_CASE("evaluation is a pure function of the state") {
  RunConfig c = small_run();
  const Dataset data = generate(c.task);
  Trainer tr(data, c, 3);
  tr.train_epoch();
  const EvalReport a = tr.evaluate();
  const EvalReport b = tr.evaluate();
  CHECK(a.seen.acc_all == b.seen.acc_all);
  CHECK(a.unseen.acc_all == b.unseen.acc_all);
  CHECK(a.mi_estimate == b.mi_estimate);
  for (double acc : {a.seen.acc_all, a.unseen.acc_all, a.labelled.acc_all}) {
    CHECK(acc >= 0.1 - 1e-12);
    CHECK(acc <= 1.0);
  }
  CHECK(a.err_a >= 0.0);
  CHECK(a.err_a <= 1.0);
  CHECK(a.bounds.d_hat >= 0.0);
  CHECK(a.bounds.d_hat <= 2.0);
}

TEST_CASE("train_run reports every eval point and the final epoch") {
  RunConfig c = small_run();
  const Dataset data = generate(c.task);
  std::vector<std::size_t> seen;
  const RunResult r = train_run(data, c, 6, [&](const EvalRow& row) { seen.push_back(row.epoch); });
  REQUIRE(r.rows.size() == 2);
  CHECK(r.rows[0].epoch == 2);
  CHECK(r.rows[1].epoch == 3);
  CHECK(seen == std::vector<std::size_t>{2, 3});
  CHECK(r.rows[1].lr == doctest::Approx(cosine_lr(c.train.lr0, 2, 3)));
  CHECK(r.seed == 6);
}

TEST_CASE("non-finite inputs abort training") {
  RunConfig c = small_run();
  c.train.mode = Mode::simgcd;
  Dataset data = generate(c.task);
  for (auto& s : data.samples) s.patches[0] = std::numeric_limits<double>::infinity();
  Trainer tr(data, c, 0);
  CHECK_THROWS_AS(tr.train_epoch(), std::runtime_error);
}
