#pragma once

// Scalar programs exercising each differentiable op, shared by the unit
// tests and the acceptance runner. Each output is contracted with a fixed
// random weight so every input coordinate gets an O(1) gradient.

#include <random>
#include <string>
#include <vector>

#include "hilo/autodiff.hpp"

namespace hilo::testing {

struct OpCase {
  std::string name;
  ScalarProgram program;
  std::vector<Tensor> point;
};

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

// sum(x * W) for a fixed pseudo-random W of x's shape.
inline Var contract(Var x, std::uint64_t salt = 7) {
  std::mt19937_64 rng(salt);
  return sum(mul(x, x.tape().constant(random_tensor(x.shape(), rng))));
}

inline std::vector<OpCase> op_cases() {
  std::mt19937_64 rng(2024);
  auto r = [&](Shape s, double lo = -1.0, double hi = 1.0) { return random_tensor(std::move(s), rng, lo, hi); };
  auto unary_case = [&](std::string name, Var (*op)(Var), Tensor x) {
    return OpCase{std::move(name), [op](Tape&, std::span<const Var> v) { return contract(op(v[0])); }, {std::move(x)}};
  };
  std::vector<OpCase> c;
  c.push_back({"matmul", [](Tape&, std::span<const Var> v) { return contract(matmul(v[0], v[1])); }, {r({3, 4}), r({4, 5})}});
  c.push_back({"bmm", [](Tape&, std::span<const Var> v) { return contract(bmm(v[0], v[1])); }, {r({2, 3, 4}), r({2, 4, 2})}});
  c.push_back({"transpose2", [](Tape&, std::span<const Var> v) { return contract(transpose(v[0])); }, {r({3, 4})}});
  c.push_back({"transpose3", [](Tape&, std::span<const Var> v) { return contract(transpose(v[0])); }, {r({2, 3, 4})}});
  c.push_back({"add", [](Tape&, std::span<const Var> v) { return contract(add(v[0], v[1])); }, {r({3, 4}), r({3, 4})}});
  c.push_back({"sub", [](Tape&, std::span<const Var> v) { return contract(sub(v[0], v[1])); }, {r({3, 4}), r({3, 4})}});
  c.push_back({"mul", [](Tape&, std::span<const Var> v) { return contract(mul(v[0], v[1])); }, {r({3, 4}), r({3, 4})}});
  c.push_back({"add_row", [](Tape&, std::span<const Var> v) { return contract(add_row(v[0], v[1])); }, {r({2, 3, 4}), r({4})}});
  c.push_back({"mul_row", [](Tape&, std::span<const Var> v) { return contract(mul_row(v[0], v[1])); }, {r({3, 4}), r({4})}});
  c.push_back({"scale", [](Tape&, std::span<const Var> v) { return contract(scale(v[0], -2.5)); }, {r({3, 4})}});
  c.push_back({"add_scalar", [](Tape&, std::span<const Var> v) { return contract(add_scalar(v[0], 1.5)); }, {r({3, 4})}});
  c.push_back(unary_case("neg", &neg, r({3, 4})));
  c.push_back(unary_case("exp", &exp, r({3, 4})));
  c.push_back(unary_case("log", &log, r({3, 4}, 0.2, 2.0)));
  c.push_back(unary_case("softplus", &softplus, r({3, 4}, -3.0, 3.0)));
  c.push_back(unary_case("gelu", &gelu, r({3, 4}, -3.0, 3.0)));
  c.push_back(unary_case("relu", &relu, Tensor::matrix(2, 3, {-0.7, 0.4, 1.2, -0.3, 0.9, -1.5})));
  c.push_back(unary_case("xlogx", &xlogx, r({3, 4}, 0.05, 1.0)));
  c.push_back({"softmax", [](Tape&, std::span<const Var> v) { return contract(softmax(v[0], 0.7)); }, {r({3, 5})}});
  c.push_back({"log_softmax", [](Tape&, std::span<const Var> v) { return contract(log_softmax(v[0], 0.5)); }, {r({3, 5})}});
  c.push_back({"log_softmax_masked",
               [](Tape&, std::span<const Var> v) {
                 Tensor mask({3, 4}, 1.0);
                 for (std::size_t i = 0; i < 3; ++i) mask.at(i, i) = 0.0;
                 return contract(log_softmax(v[0], 0.3, &mask));
               },
               {r({3, 4})}});
  c.push_back(unary_case("logsumexp", &logsumexp, r({3, 5}, -2.0, 2.0)));
  c.push_back(unary_case("sum", &sum, r({3, 4})));
  c.push_back(unary_case("mean", &mean, r({3, 4})));
  c.push_back({"sum_axis0", [](Tape&, std::span<const Var> v) { return contract(sum_axis(v[0], 0)); }, {r({3, 4})}});
  c.push_back({"sum_axis1", [](Tape&, std::span<const Var> v) { return contract(sum_axis(v[0], 1)); }, {r({2, 3, 4})}});
  c.push_back({"mean_axis", [](Tape&, std::span<const Var> v) { return contract(mean_axis(v[0], 0)); }, {r({3, 4})}});
  c.push_back({"concat0",
               [](Tape&, std::span<const Var> v) {
                 const Var parts[] = {v[0], v[1]};
                 return contract(concat(parts, 0));
               },
               {r({2, 3}), r({4, 3})}});
  c.push_back({"concat1",
               [](Tape&, std::span<const Var> v) {
                 const Var parts[] = {v[0], v[1]};
                 return contract(concat(parts, 1));
               },
               {r({3, 2}), r({3, 4})}});
  c.push_back({"slice", [](Tape&, std::span<const Var> v) { return contract(slice(v[0], 1, 1, 2)); }, {r({3, 5})}});
  c.push_back({"reshape", [](Tape&, std::span<const Var> v) { return contract(reshape(v[0], {2, 6})); }, {r({3, 4})}});
  c.push_back({"gather_rows",
               [](Tape&, std::span<const Var> v) {
                 const std::size_t rows[] = {2, 0, 2, 1};
                 return contract(gather_rows(v[0], rows));
               },
               {r({3, 4})}});
  c.push_back({"layer_norm", [](Tape&, std::span<const Var> v) { return contract(layer_norm(v[0])); }, {r({3, 6})}});
  c.push_back({"l2_normalize", [](Tape&, std::span<const Var> v) { return contract(l2_normalize(v[0])); }, {r({3, 4})}});
  c.push_back({"split_heads", [](Tape&, std::span<const Var> v) { return contract(split_heads(v[0], 2, 3, 2)); }, {r({6, 4})}});
  c.push_back({"merge_heads", [](Tape&, std::span<const Var> v) { return contract(merge_heads(v[0], 2, 3, 2)); }, {r({4, 3, 2})}});
  c.push_back({"composite_attention",
               [](Tape&, std::span<const Var> v) {
                 Var att = softmax(scale(bmm(v[0], transpose(v[1])), 0.5));
                 return contract(bmm(att, v[1]));
               },
               {r({2, 3, 4}), r({2, 3, 4})}});
  return c;
}

}  // namespace hilo::testing
