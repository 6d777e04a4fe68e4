#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "doctest.h"
#include "hilo/encoder.hpp"
#include "hilo/losses.hpp"
#include "op_cases.hpp"

using namespace hilo;

namespace {

Tensor unit_rows(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  Tensor t = testing::random_tensor({n, d}, rng, -1, 1);
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += t.at(r, j) * t.at(r, j);
    for (std::size_t j = 0; j < d; ++j) t.at(r, j) /= std::sqrt(s);
  }
  return t;
}

Tensor rows_of(const Tensor& t, const std::vector<std::size_t>& idx) {
  const std::size_t d = t.dim(1);
  Tensor out({idx.size(), d});
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t j = 0; j < d; ++j) out.at(r, j) = t.at(idx[r], j);
  return out;
}

struct RawHead {
  std::size_t n;
  Tensor rep, cls, protos;
  std::vector<double> alpha;
  std::vector<int> group;
  Tensor sup;
};

RawHead random_head(std::size_t n, std::size_t k, std::mt19937_64& rng, bool labelled = true) {
  RawHead h{n, unit_rows(2 * n, 6, rng), unit_rows(2 * n, 5, rng), unit_rows(k, 5, rng), {}, {}, Tensor({2 * n, k}, 0.0)};
  h.alpha.assign(2 * n, 1.0);
  h.group.assign(n, -1);
  if (labelled) {
    for (std::size_t i = 0; i < n; i += 2) {
      h.group[i] = static_cast<int>(i % 3);
      for (std::size_t v = 0; v < 2; ++v) h.sup.at(v * n + i, i % 3) = 1.0;
    }
  }
  return h;
}

HeadBatch bind_head(Tape& tape, const RawHead& h) {
  HeadBatch b;
  b.n = h.n;
  b.rep = tape.leaf(h.rep);
  b.cls = tape.leaf(h.cls);
  b.prototypes = tape.leaf(h.protos);
  b.alpha = h.alpha;
  b.sup_group = h.group;
  b.sup_targets = h.sup;
  return b;
}

}  // namespace

TEST_CASE("rep_loss worked values") {
  Tape tape;
  Var a = tape.constant(Tensor::vector({1, 0}));
  Var pos = tape.constant(Tensor::matrix(1, 2, {1, 0}));
  Var neg_ = tape.constant(Tensor::matrix(1, 2, {0, 1}));
  CHECK(rep_loss(a, pos, Var{}, 1.0).value().item() == doctest::Approx(0.0));
  const double v = rep_loss(a, pos, neg_, 1.0).value().item();
  CHECK(v == doctest::Approx(-std::log(std::exp(1.0) / (std::exp(1.0) + 1.0))).epsilon(1e-12));
  CHECK(v == doctest::Approx(0.3133).epsilon(1e-3));
  Var pos2 = tape.constant(Tensor::matrix(2, 2, {1, 0, 1, 0}));
  // Duplicated positives also appear twice in the denominator.
  const double dup = rep_loss(a, pos2, neg_, 1.0).value().item();
  CHECK(dup == doctest::Approx(-std::log(std::exp(1.0) / (2 * std::exp(1.0) + 1.0))));
  CHECK_THROWS_AS(rep_loss(a, tape.constant(Tensor({0, 2})), neg_, 1.0), std::invalid_argument);
}

TEST_CASE("patchmix_rep_loss scales by alpha") {
  Tape tape;
  Var a = tape.constant(Tensor::vector({1, 0}));
  Var pos = tape.constant(Tensor::matrix(1, 2, {1, 0}));
  Var ng = tape.constant(Tensor::matrix(1, 2, {0, 1}));
  const double base = rep_loss(a, pos, ng, 1.0).value().item();
  CHECK(patchmix_rep_loss(a, pos, ng, 0.0, 1.0).value().item() == 0.0);
  CHECK(patchmix_rep_loss(a, pos, ng, 1.0, 1.0).value().item() == doctest::Approx(base));
  CHECK(patchmix_rep_loss(a, pos, ng, 0.4, 1.0).value().item() == doctest::Approx(0.1253).epsilon(1e-3));
  CHECK_THROWS_AS(patchmix_rep_loss(a, pos, ng, 1.5, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(patchmix_rep_loss(a, pos, ng, -0.1, 1.0), std::invalid_argument);
}

TEST_CASE("cls_loss worked values") {
  Tape tape;
  const std::vector<double> onehot{1, 0};
  CHECK(cls_loss(tape.constant(Tensor::vector({0.99, 0.01})), onehot).value().item() ==
        doctest::Approx(0.01005).epsilon(1e-3));
  const std::vector<double> u(4, 0.25);
  CHECK(cls_loss(tape.constant(Tensor::vector(u)), u).value().item() == doctest::Approx(std::log(4.0)));
  const std::vector<double> p{0.2, 0.3, 0.5};
  const double h = -(0.2 * std::log(0.2) + 0.3 * std::log(0.3) + 0.5 * std::log(0.5));
  CHECK(cls_loss(tape.constant(Tensor::vector(p)), p).value().item() == doctest::Approx(h));
  const std::vector<double> bad{0.5, 0.4};
  CHECK_THROWS_AS(cls_loss(tape.constant(Tensor::vector({0.5, 0.5})), bad), std::invalid_argument);
  CHECK_THROWS_AS(cls_loss(tape.constant(Tensor::vector({0.5, 0.5})), u), std::invalid_argument);
}

TEST_CASE("sharpen_teacher") {
  Tape tape;
  Var x = tape.leaf(Tensor::matrix(1, 2, {1, 0}));
  Var q = sharpen_teacher(x, 0.07);
  const double small = 1.0 / (1.0 + std::exp(1.0 / 0.07));
  CHECK(q.value()[1] == doctest::Approx(small).epsilon(1e-9));
  CHECK(q.value()[1] < 1e-6);
  CHECK(q.value()[0] == doctest::Approx(1.0 - small));
  Var u = sharpen_teacher(tape.constant(Tensor::matrix(1, 3, {2, 2, 2})), 0.07);
  for (std::size_t k = 0; k < 3; ++k) CHECK(u.value()[k] == doctest::Approx(1.0 / 3));
  tape.backward(sum(mul(q, q)));
  CHECK(tape.grad(x) == Tensor({1, 2}, 0.0));
  CHECK_THROWS_AS(sharpen_teacher(x, 0.0), std::invalid_argument);
}

TEST_CASE("entropy_reg worked values and range") {
  Tape tape;
  CHECK(entropy_reg(tape.constant(Tensor::matrix(2, 2, {1, 0, 1, 0}))).value().item() == 0.0);
  CHECK(entropy_reg(tape.constant(Tensor::matrix(1, 4, {.25, .25, .25, .25}))).value().item() ==
        doctest::Approx(-std::log(4.0)));
  CHECK(entropy_reg(tape.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}))).value().item() ==
        doctest::Approx(-0.6931).epsilon(1e-4));
  std::mt19937_64 rng(5);
  for (int t = 0; t < 20; ++t) {
    Var p = softmax(tape.constant(testing::random_tensor({7, 5}, rng, -4, 4)));
    const double d = entropy_reg(p).value().item();
    CHECK(d <= 1e-15);
    CHECK(d >= -std::log(5.0) - 1e-12);
  }
}

TEST_CASE("mi_js constant critics") {
  Tape tape;
  std::mt19937_64 rng(1);
  Var zd = tape.constant(unit_rows(5, 3, rng));
  Var zs = tape.constant(unit_rows(5, 3, rng));
  auto constant_critic = [](double c) {
    return [c](Var pairs) { return add_scalar(scale(slice(pairs, 1, 0, 1), 0.0), c); };
  };
  CHECK(std::abs(mi_js(zd, zs, constant_critic(0.0)).value().item() + 2 * std::log(2.0)) < 1e-12);
  const double big = 40.0;
  CHECK(mi_js(zd, zs, constant_critic(big)).value().item() == doctest::Approx(-big).epsilon(1e-9));
  CHECK_THROWS_AS(mi_js(slice(zd, 0, 0, 1), slice(zs, 0, 0, 1), constant_critic(0)), std::invalid_argument);
  CHECK_THROWS_AS(mi_js(zd, slice(zs, 0, 0, 4), constant_critic(0)), std::invalid_argument);
}

TEST_CASE("mi_js pairs the diagonal as joint samples") {
  // A critic that reads only whether the pair halves coincide.
  Tape tape;
  Tensor z = Tensor::matrix(3, 1, {1, 2, 3});
  Var zd = tape.constant(z), zs = tape.constant(z);
  auto same = [](Var pairs) {
    Var d = sub(slice(pairs, 1, 0, 1), slice(pairs, 1, 1, 1));
    return add_scalar(scale(mul(d, d), -10.0), 5.0);
  };
  const Tensor m = same(concat(std::vector<Var>{zd, zs}, 1)).value();
  CHECK(m[0] == 5.0);
  const double v = mi_js(zd, zs, same).value().item();
  // Hand evaluation of the 3x3 score grid.
  double off = 0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (i != j) off += std::log1p(std::exp(5.0 - 10.0 * (i - j) * (i - j)));
  const double expect = -std::log1p(std::exp(-5.0)) - off / 6.0;
  CHECK(v == doctest::Approx(expect).epsilon(1e-12));
  CHECK(v > -2 * std::log(2.0));
}

TEST_CASE("batch_rep_loss matches per-anchor rep_loss") {
  std::mt19937_64 rng(11);
  const std::size_t n = 7;
  const Tensor f = unit_rows(n, 4, rng);
  std::vector<std::vector<std::size_t>> pos(n);
  pos[0] = {3};
  pos[1] = {2, 5};
  pos[4] = {6, 0, 1};
  pos[6] = {4};
  const std::vector<double> alpha{0.3, 1.0, 1.0, 1.0, 0.6, 1.0, 0.9};
  Tape tape;
  const double batched = batch_rep_loss(tape.constant(f), pos, alpha, 0.5).value().item();
  double expect = 0;
  std::size_t anchors = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (pos[i].empty()) continue;
    ++anchors;
    std::vector<std::size_t> neg_idx;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && std::find(pos[i].begin(), pos[i].end(), j) == pos[i].end()) neg_idx.push_back(j);
    Var a = tape.constant(Tensor::vector(f.row(i)));
    expect += patchmix_rep_loss(a, tape.constant(rows_of(f, pos[i])), tape.constant(rows_of(f, neg_idx)), alpha[i], 0.5)
                  .value()
                  .item();
  }
  CHECK(batched == doctest::Approx(expect / static_cast<double>(anchors)).epsilon(1e-12));
  std::vector<std::vector<std::size_t>> self(n);
  self[2] = {2};
  CHECK_THROWS_AS(batch_rep_loss(tape.constant(f), self, alpha, 0.5), std::invalid_argument);
  CHECK(batch_rep_loss(tape.constant(f), std::vector<std::vector<std::size_t>>(n), alpha, 0.5).value().item() == 0.0);
}

TEST_CASE("head_loss is invariant to sample order") {
  std::mt19937_64 rng(21);
  const RawHead h = random_head(6, 4, rng);
  LossConfig cfg;
  Tape t1;
  const double base = head_loss(bind_head(t1, h), cfg).combined.value().item();
  std::vector<std::size_t> perm(h.n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  RawHead p = h;
  std::vector<std::size_t> rows(2 * h.n);
  for (std::size_t v = 0; v < 2; ++v)
    for (std::size_t i = 0; i < h.n; ++i) rows[v * h.n + i] = v * h.n + perm[i];
  p.rep = rows_of(h.rep, rows);
  p.cls = rows_of(h.cls, rows);
  p.sup = rows_of(h.sup, rows);
  for (std::size_t i = 0; i < h.n; ++i) p.group[i] = h.group[perm[i]];
  Tape t2;
  const HeadLoss hl = head_loss(bind_head(t2, p), cfg);
  CHECK(hl.combined.value().item() == doctest::Approx(base).epsilon(1e-12));
  CHECK(hl.rep_u.value().item() >= 0);
  CHECK(hl.cls_u.value().item() >= 0);
}

TEST_CASE("simgcd_loss weights and label independence") {
  std::mt19937_64 rng(31);
  RawHead h = random_head(6, 4, rng);
  LossConfig cfg;
  cfg.lambda = 1.0;
  cfg.entropy_weight = 0.0;
  Tape t1;
  const LossResult a = simgcd_loss(bind_head(t1, h), cfg);
  // Perturb every label; lambda = 1 removes the supervised terms.
  RawHead g = h;
  g.sup = Tensor(h.sup.shape(), 0.0);
  for (std::size_t i = 0; i < h.n; ++i) {
    if (g.group[i] < 0) continue;
    g.group[i] = (g.group[i] + 1) % 4;
    for (std::size_t v = 0; v < 2; ++v) g.sup.at(v * h.n + i, g.group[i]) = 1.0;
  }
  Tape t2;
  CHECK(simgcd_loss(bind_head(t2, g), cfg).values.total == a.values.total);

  // Empty B^l: the supervised part vanishes and the rest is weighted by lambda.
  LossConfig c2;
  c2.entropy_weight = 0.0;
  RawHead u = random_head(5, 3, rng, false);
  Tape t3;
  const HeadLoss hl = head_loss(bind_head(t3, u), c2);
  CHECK(hl.rep_sup.value().item() == 0.0);
  CHECK(hl.cls_sup.value().item() == 0.0);
  CHECK(hl.combined.value().item() ==
        doctest::Approx(c2.lambda * (hl.rep_u.value().item() + hl.cls_u.value().item())));
}

TEST_CASE("simgcd_loss on a coinciding labelled sample") {
  // One labelled sample, views identical, prediction equal to its one-hot label.
  Tape tape;
  HeadBatch b;
  b.n = 1;
  b.rep = tape.constant(Tensor::matrix(2, 2, {1, 0, 1, 0}));
  b.cls = tape.constant(Tensor::matrix(2, 2, {1, 0, 1, 0}));
  b.prototypes = tape.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  b.alpha = {1, 1};
  b.sup_group = {0};
  b.sup_targets = Tensor::matrix(2, 2, {1, 0, 1, 0});
  LossConfig cfg;
  cfg.entropy_weight = 0.0;
  cfg.tau_s = 0.01;
  cfg.tau_t = 0.01;
  const LossResult r = simgcd_loss(b, cfg);
  // Single candidate per anchor: both rep terms are 0 as well.
  CHECK(r.values.rep == doctest::Approx(0.0));
  CHECK(r.values.cls < 1e-30);
  CHECK(r.values.total == doctest::Approx(r.values.rep));
}

TEST_CASE("hilo_total reduces to the head losses plus MI") {
  std::mt19937_64 rng(41);
  const RawHead s = random_head(4, 5, rng);
  RawHead d = random_head(4, 2, rng);
  d.rep = unit_rows(8, 6, rng);
  LossConfig cfg;
  cfg.lambda = 1.0;
  cfg.hilo_entropy_weight = 0.0;
  cfg.entropy_weight = 0.0;
  EncoderConfig ec;
  ec.proj_dim = 6;
  const EncoderState st = init_encoder(ec, 3);
  Tape tape;
  BoundEncoder enc = bind(tape, st, true);
  auto phi = [&enc](Var x) { return critic(enc, x); };
  HeadBatch hs = bind_head(tape, s), hd = bind_head(tape, d);
  const LossResult r = hilo_total(hs, hd, phi, cfg, {});
  const double ls = simgcd_loss(hs, cfg).values.total;
  const double ld = simgcd_loss(hd, cfg).values.total;
  double mi = 0;
  for (std::size_t v = 0; v < 2; ++v) mi += 0.5 * mi_js(slice(hd.rep, 0, 4 * v, 4), slice(hs.rep, 0, 4 * v, 4), phi).value().item();
  CHECK(r.values.l_s == doctest::Approx(ls).epsilon(1e-12));
  CHECK(r.values.l_d == doctest::Approx(ld).epsilon(1e-12));
  CHECK(r.values.l_m == doctest::Approx(mi).epsilon(1e-12));
  CHECK(r.values.total == doctest::Approx(ls + ld + mi).epsilon(1e-12));
  // The differentiated objective subtracts the reversed MI term.
  CHECK(r.objective.value().item() == doctest::Approx(ls + ld - mi).epsilon(1e-12));
  CHECK(std::isfinite(r.values.total));
}

TEST_CASE("critic ascends and encoder features descend the MI estimate") {
  std::mt19937_64 rng(51);
  const RawHead s = random_head(4, 5, rng);
  RawHead d = random_head(4, 2, rng);
  EncoderConfig ec;
  ec.proj_dim = 6;
  const EncoderState st = init_encoder(ec, 9);
  LossConfig cfg;
  HiloOptions only_mi;
  // Gradient of the reported MI for reference, without reversal.
  Tape ref;
  BoundEncoder e1 = bind(ref, st, true);
  HeadBatch s1 = bind_head(ref, s), d1 = bind_head(ref, d);
  Var mi_ref;
  for (std::size_t v = 0; v < 2; ++v) {
    Var t = scale(mi_js(slice(d1.rep, 0, 4 * v, 4), slice(s1.rep, 0, 4 * v, 4), [&e1](Var x) { return critic(e1, x); }), 0.5);
    mi_ref = mi_ref.valid() ? add(mi_ref, t) : t;
  }
  ref.backward(mi_ref);

  Tape tape;
  BoundEncoder e2 = bind(tape, st, true);
  HeadBatch s2 = bind_head(tape, s), d2 = bind_head(tape, d);
  const LossResult with = hilo_total(s2, d2, [&e2](Var x) { return critic(e2, x); }, cfg, only_mi);
  HiloOptions plain;
  plain.use_mi = false;
  const LossResult without = hilo_total(s2, d2, [&e2](Var x) { return critic(e2, x); }, cfg, plain);
  tape.backward(sub(with.objective, without.objective));
  const Tensor gc = tape.grad(e2.params.critic.fc1_weight);
  const Tensor gc_ref = ref.grad(e1.params.critic.fc1_weight);
  const Tensor gz = tape.grad(s2.rep), gz_ref = ref.grad(s1.rep);
  double dc = 0, dz = 0, norm = 0;
  for (std::size_t i = 0; i < gc.size(); ++i) {
    dc = std::max(dc, std::abs(gc[i] + gc_ref[i]));  // objective carries -I at the critic
    norm = std::max(norm, std::abs(gc_ref[i]));
  }
  for (std::size_t i = 0; i < gz.size(); ++i) dz = std::max(dz, std::abs(gz[i] - gz_ref[i]));  // +I at the features
  CHECK(norm > 0);
  CHECK(dc < 1e-12);
  CHECK(dz < 1e-12);
}
