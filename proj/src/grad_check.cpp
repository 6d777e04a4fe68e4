#include <cmath>
#include <stdexcept>

#include "hilo/autodiff.hpp"

namespace hilo {

namespace {

double evaluate(const ScalarProgram& f, std::span<const Tensor> point) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(point.size());
  for (const auto& t : point) vars.push_back(tape.constant(t));
  const double v = f(tape, vars).value().item();
  if (!std::isfinite(v)) throw std::domain_error("grad_check: non-finite forward value");
  return v;
}

double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12);
}

std::vector<Tensor> analytic_grads(const ScalarProgram& f, std::span<const Tensor> point) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : point) vars.push_back(tape.leaf(t));
  Var out = f(tape, vars);
  if (!std::isfinite(out.value().item())) throw std::domain_error("grad_check: non-finite forward value");
  tape.backward(out);
  std::vector<Tensor> grads;
  for (const auto& v : vars) grads.push_back(tape.grad(v));
  return grads;
}

}  // namespace

GradCheckReport grad_check(const ScalarProgram& f, std::span<const Tensor> point, double step,
                           const std::vector<std::vector<std::size_t>>* coords) {
  if (!(step > 0 && step <= 1e-2)) throw std::invalid_argument("grad_check: step must lie in (0, 1e-2]");
  if (coords && coords->size() != point.size()) {
    throw std::invalid_argument("grad_check: coordinate selection does not match tensor count");
  }
  const auto grads = analytic_grads(f, point);
  std::vector<Tensor> probe(point.begin(), point.end());
  GradCheckReport report;
  auto check_one = [&](std::size_t k, std::size_t i) {
    const double orig = probe[k][i];
    probe[k][i] = orig + step;
    const double up = evaluate(f, probe);
    probe[k][i] = orig - step;
    const double down = evaluate(f, probe);
    probe[k][i] = orig;
    const double err = rel_error(grads[k][i], (up - down) / (2 * step));
    ++report.coordinates;
    if (err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_tensor = k;
      report.worst_index = i;
    }
  };
  for (std::size_t k = 0; k < point.size(); ++k) {
    if (coords) {
      for (auto i : (*coords)[k]) check_one(k, i);
    } else {
      for (std::size_t i = 0; i < point[k].size(); ++i) check_one(k, i);
    }
  }
  return report;
}

double grad_check(const std::function<Var(Var)>& f, const Tensor& point, double step) {
  const Tensor pts[] = {point};
  return grad_check([&](Tape&, std::span<const Var> v) { return f(v[0]); }, pts, step).max_rel_error;
}

double directional_check(const ScalarProgram& f, std::span<const Tensor> point,
                         std::span<const Tensor> direction, double step) {
  if (direction.size() != point.size()) throw std::invalid_argument("directional_check: direction count mismatch");
  const auto grads = analytic_grads(f, point);
  double analytic = 0;
  std::vector<Tensor> up(point.begin(), point.end()), down(point.begin(), point.end());
  for (std::size_t k = 0; k < point.size(); ++k) {
    if (direction[k].shape() != point[k].shape()) {
      throw std::invalid_argument("directional_check: direction shape " + shape_str(direction[k].shape()) +
                                  " vs " + shape_str(point[k].shape()));
    }
    for (std::size_t i = 0; i < point[k].size(); ++i) {
      analytic += grads[k][i] * direction[k][i];
      up[k][i] += step * direction[k][i];
      down[k][i] -= step * direction[k][i];
    }
  }
  const double numeric = (evaluate(f, up) - evaluate(f, down)) / (2 * step);
  return rel_error(analytic, numeric);
}

}  // namespace hilo
