#include "hilo/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace hilo {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                              shape_str(b));
}

void require_rank(const char* op, const Var& x, std::size_t rank) {
  if (x.shape().size() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got shape " + shape_str(x.shape()));
  }
}

void require_same_tape(const char* op, const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

// Elementwise y = f(x) with dy/dx = df(x, y).
template <class F, class DF>
Var unary(Var x, F f, DF df) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {xid}, [xid, df](Tape& t, std::size_t self) {
    if (!t.tracked(xid)) return;
    const Tensor& g = *t.grad_if_any(self);
    const Tensor& xv = t.value(xid);
    const Tensor& yv = t.value(self);
    Tensor& gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Var / Tape

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::tracked() const { return tape_->tracked(id_); }

Var Tape::leaf(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.tracked = true;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (auto p : parents) {
    if (p >= nodes_.size()) throw std::logic_error("Tape::record: parent id not on tape");
    n.tracked = n.tracked || nodes_[p].tracked;
  }
  if (n.tracked) {
    n.parents = std::move(parents);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Tensor Tape::grad(std::size_t id) const {
  const Node& n = nodes_.at(id);
  if (n.has_grad) return n.grad;
  return Tensor(n.value.shape());
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.tracked) throw std::logic_error("Tape::grad_buffer: node is not tracked");
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

const Tensor* Tape::grad_if_any(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.has_grad ? &n.grad : nullptr;
}

void Tape::zero_grads() {
  for (auto& n : nodes_) {
    n.grad = Tensor();
    n.has_grad = false;
  }
}

void Tape::backward(Var root) {
  if (&root.tape() != this) throw std::invalid_argument("Tape::backward: root belongs to another tape");
  if (root.value().size() != 1) {
    throw std::invalid_argument("Tape::backward: root must be a single value, got shape " +
                                shape_str(root.shape()));
  }
  zero_grads();
  if (!nodes_[root.id()].tracked) return;
  grad_buffer(root.id())[0] = 1.0;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, i);
  }
}

// ---------------------------------------------------------------------------
// Products

Var matmul(Var a, Var b) {
  require_same_tape("matmul", a, b);
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  if (b.shape()[0] != k) shape_error("matmul", a.shape(), b.shape());
  Tensor out(Shape{n, m});
  MutMap(out.data(), n, m).noalias() =
      ConstMap(a.value().data(), n, k) * ConstMap(b.value().data(), k, m);
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().record(std::move(out), {aid, bid}, [aid, bid, n, k, m](Tape& t, std::size_t self) {
    ConstMap g(t.grad_if_any(self)->data(), n, m);
    if (t.tracked(aid)) {
      MutMap(t.grad_buffer(aid).data(), n, k).noalias() += g * ConstMap(t.value(bid).data(), k, m).transpose();
    }
    if (t.tracked(bid)) {
      MutMap(t.grad_buffer(bid).data(), k, m).noalias() += ConstMap(t.value(aid).data(), n, k).transpose() * g;
    }
  });
}

Var bmm(Var a, Var b) {
  require_same_tape("bmm", a, b);
  require_rank("bmm", a, 3);
  require_rank("bmm", b, 3);
  const std::size_t g = a.shape()[0], n = a.shape()[1], k = a.shape()[2], m = b.shape()[2];
  if (b.shape()[0] != g || b.shape()[1] != k) shape_error("bmm", a.shape(), b.shape());
  Tensor out(Shape{g, n, m});
  for (std::size_t i = 0; i < g; ++i) {
    MutMap(out.data() + i * n * m, n, m).noalias() =
        ConstMap(a.value().data() + i * n * k, n, k) * ConstMap(b.value().data() + i * k * m, k, m);
  }
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().record(std::move(out), {aid, bid}, [aid, bid, g, n, k, m](Tape& t, std::size_t self) {
    const double* gd = t.grad_if_any(self)->data();
    const bool ta = t.tracked(aid), tb = t.tracked(bid);
    double* ga = ta ? t.grad_buffer(aid).data() : nullptr;
    double* gb = tb ? t.grad_buffer(bid).data() : nullptr;
    const double* av = t.value(aid).data();
    const double* bv = t.value(bid).data();
    for (std::size_t i = 0; i < g; ++i) {
      ConstMap gi(gd + i * n * m, n, m);
      if (ta) MutMap(ga + i * n * k, n, k).noalias() += gi * ConstMap(bv + i * k * m, k, m).transpose();
      if (tb) MutMap(gb + i * k * m, k, m).noalias() += ConstMap(av + i * n * k, n, k).transpose() * gi;
    }
  });
}

Var transpose(Var a) {
  const Shape& s = a.shape();
  if (s.size() != 2 && s.size() != 3) {
    throw std::invalid_argument("transpose: expected rank 2 or 3, got " + shape_str(s));
  }
  const std::size_t g = s.size() == 3 ? s[0] : 1;
  const std::size_t r = s[s.size() - 2], c = s.back();
  Shape os = s;
  std::swap(os[os.size() - 1], os[os.size() - 2]);
  Tensor out(os);
  const double* src = a.value().data();
  for (std::size_t i = 0; i < g; ++i)
    for (std::size_t x = 0; x < r; ++x)
      for (std::size_t y = 0; y < c; ++y) out[i * r * c + y * r + x] = src[i * r * c + x * c + y];
  const std::size_t aid = a.id();
  return a.tape().record(std::move(out), {aid}, [aid, g, r, c](Tape& t, std::size_t self) {
    const Tensor& gd = *t.grad_if_any(self);
    Tensor& ga = t.grad_buffer(aid);
    for (std::size_t i = 0; i < g; ++i)
      for (std::size_t x = 0; x < r; ++x)
        for (std::size_t y = 0; y < c; ++y) ga[i * r * c + x * c + y] += gd[i * r * c + y * r + x];
  });
}

// ---------------------------------------------------------------------------
// Elementwise binary

namespace {

template <class F, class DA, class DB>
Var binary(const char* op, Var a, Var b, F f, DA da, DB db) {
  require_same_tape(op, a, b);
  if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i]);
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().record(std::move(out), {aid, bid}, [aid, bid, da, db](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if_any(self);
    const Tensor& av = t.value(aid);
    const Tensor& bv = t.value(bid);
    if (t.tracked(aid)) {
      Tensor& ga = t.grad_buffer(aid);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(av[i], bv[i]);
    }
    if (t.tracked(bid)) {
      Tensor& gb = t.grad_buffer(bid);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * db(av[i], bv[i]);
    }
  });
}

}  // namespace

Var add(Var a, Var b) {
  return binary("add", a, b, [](double x, double y) { return x + y; },
                [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary("sub", a, b, [](double x, double y) { return x - y; },
                [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary("mul", a, b, [](double x, double y) { return x * y; },
                [](double, double y) { return y; }, [](double x, double) { return x; });
}

Var add_row(Var x, Var row) {
  require_same_tape("add_row", x, row);
  const std::size_t d = last_dim(x.shape());
  if (row.value().size() != d || x.shape().empty()) shape_error("add_row", x.shape(), row.shape());
  const Tensor& xv = x.value();
  const Tensor& rv = row.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] + rv[i % d];
  const std::size_t xid = x.id(), rid = row.id();
  return x.tape().record(std::move(out), {xid, rid}, [xid, rid, d](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if_any(self);
    if (t.tracked(xid)) {
      Tensor& gx = t.grad_buffer(xid);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.tracked(rid)) {
      Tensor& gr = t.grad_buffer(rid);
      for (std::size_t i = 0; i < g.size(); ++i) gr[i % d] += g[i];
    }
  });
}

Var mul_row(Var x, Var row) {
  require_same_tape("mul_row", x, row);
  const std::size_t d = last_dim(x.shape());
  if (row.value().size() != d || x.shape().empty()) shape_error("mul_row", x.shape(), row.shape());
  const Tensor& xv = x.value();
  const Tensor& rv = row.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * rv[i % d];
  const std::size_t xid = x.id(), rid = row.id();
  return x.tape().record(std::move(out), {xid, rid}, [xid, rid, d](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if_any(self);
    const Tensor& xv = t.value(xid);
    const Tensor& rv = t.value(rid);
    if (t.tracked(xid)) {
      Tensor& gx = t.grad_buffer(xid);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * rv[i % d];
    }
    if (t.tracked(rid)) {
      Tensor& gr = t.grad_buffer(rid);
      for (std::size_t i = 0; i < g.size(); ++i) gr[i % d] += g[i] * xv[i];
    }
  });
}

Var scale(Var x, double c) {
  return unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Var add_scalar(Var x, double c) {
  return unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Var neg(Var x) { return scale(x, -1.0); }

Var exp(Var x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(Var x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var softplus(Var x) {
  // log(1 + e^v) = max(v, 0) + log1p(e^{-|v|})
  return unary(
      x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      });
}

Var gelu(Var x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
      });
}

Var relu(Var x) {
  return unary(x, [](double v) { return v > 0 ? v : 0.0; },
               [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Var xlogx(Var x) {
  return unary(x, [](double v) { return v > 0 ? v * std::log(v) : 0.0; },
               [](double v, double) { return v > 0 ? std::log(v) + 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Softmax family (last axis)

Var softmax(Var x, double tau) {
  if (!(tau > 0)) throw std::invalid_argument("softmax: temperature must be positive");
  if (x.shape().empty()) throw std::invalid_argument("softmax: scalar input");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.value().size() / std::max<std::size_t>(d, 1);
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * d;
    double* o = out.data() + r * d;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < d; ++j) mx = std::max(mx, in[j] / tau);
    double z = 0;
    for (std::size_t j = 0; j < d; ++j) z += (o[j] = std::exp(in[j] / tau - mx));
    for (std::size_t j = 0; j < d; ++j) o[j] /= z;
  }
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {xid}, [xid, rows, d, tau](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if_any(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad_buffer(xid);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += y[r * d + j] * (g[r * d + j] - dot) / tau;
    }
  });
}

Var log_softmax(Var x, double tau, const Tensor* mask) {
  if (!(tau > 0)) throw std::invalid_argument("log_softmax: temperature must be positive");
  if (x.shape().empty()) throw std::invalid_argument("log_softmax: scalar input");
  if (mask && mask->shape() != x.shape()) shape_error("log_softmax(mask)", x.shape(), mask->shape());
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.value().size() / std::max<std::size_t>(d, 1);
  const Tensor& xv = x.value();
  std::vector<double> keep(xv.size(), 1.0);
  if (mask) {
    for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = (*mask)[i] != 0.0 ? 1.0 : 0.0;
  }
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * d;
    const double* k = keep.data() + r * d;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < d; ++j)
      if (k[j] != 0.0) mx = std::max(mx, in[j] / tau);
    if (!std::isfinite(mx)) continue;  // fully masked row
    double z = 0;
    for (std::size_t j = 0; j < d; ++j)
      if (k[j] != 0.0) z += std::exp(in[j] / tau - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = k[j] != 0.0 ? in[j] / tau - lz : 0.0;
  }
  const std::size_t xid = x.id();
  return x.tape().record(
      std::move(out), {xid}, [xid, rows, d, tau, keep = std::move(keep)](Tape& t, std::size_t self) {
        const Tensor& g = *t.grad_if_any(self);
        const Tensor& y = t.value(self);
        Tensor& gx = t.grad_buffer(xid);
        for (std::size_t r = 0; r < rows; ++r) {
          double gs = 0;
          for (std::size_t j = 0; j < d; ++j) gs += keep[r * d + j] * g[r * d + j];
          for (std::size_t j = 0; j < d; ++j) {
            const std::size_t i = r * d + j;
            if (keep[i] == 0.0) continue;
            gx[i] += (g[i] - std::exp(y[i]) * gs) / tau;
          }
        }
      });
}

Var logsumexp(Var x) {
  if (x.shape().empty()) throw std::invalid_argument("logsumexp: scalar input");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.value().size() / std::max<std::size_t>(d, 1);
  Shape os(x.shape().begin(), x.shape().end() - 1);
  const Tensor& xv = x.value();
  Tensor out(os);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * d;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < d; ++j) mx = std::max(mx, in[j]);
    double z = 0;
    for (std::size_t j = 0; j < d; ++j) z += std::exp(in[j] - mx);
    out[r] = mx + std::log(z);
  }
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {xid}, [xid, rows, d](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if_any(self);
    const Tensor& y = t.value(self);
    const Tensor& xv = t.value(xid);
    Tensor& gx = t.grad_buffer(xid);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[r] * std::exp(xv[r * d + j] - y[r]);
  });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(Var x) {
  double s = 0;
  for (double v : x.value().values()) s += v;
  const std::size_t xid = x.id();
  return x.tape().record(Tensor::scalar(s), {xid}, [xid](Tape& t, std::size_t self) {
    const double g = (*t.grad_if_any(self))[0];
    for (double& v : t.grad_buffer(xid).values()) v += g;
  });
}

Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var sum_axis(Var x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) {
    throw std::invalid_argument("sum_axis: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  const AxisSplit sp = split_axis(s, axis);
  Shape os = s;
  os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(os);
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += xv[(o * sp.len + l) * sp.inner + i];
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {xid}, [xid, sp](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if_any(self);
    Tensor& gx = t.grad_buffer(xid);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t l = 0; l < sp.len; ++l)
        for (std::size_t i = 0; i < sp.inner; ++i) gx[(o * sp.len + l) * sp.inner + i] += g[o * sp.inner + i];
  });
}

Var mean_axis(Var x, std::size_t axis) {
  if (axis >= x.shape().size() || x.shape()[axis] == 0) {
    throw std::invalid_argument("mean_axis: empty or missing axis in " + shape_str(x.shape()));
  }
  return scale(sum_axis(x, axis), 1.0 / static_cast<double>(x.shape()[axis]));
}

// ---------------------------------------------------------------------------
// Shape manipulation

Var concat(std::span<const Var> xs, std::size_t axis) {
  if (xs.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& s0 = xs[0].shape();
  if (axis >= s0.size()) throw std::invalid_argument("concat: axis out of range for " + shape_str(s0));
  Shape os = s0;
  os[axis] = 0;
  std::vector<std::size_t> ids, lens;
  for (const Var& v : xs) {
    require_same_tape("concat", xs[0], v);
    const Shape& s = v.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == s0[i];
    if (!ok) shape_error("concat", s0, s);
    os[axis] += s[axis];
    ids.push_back(v.id());
    lens.push_back(s[axis]);
  }
  const AxisSplit sp = split_axis(os, axis);
  Tensor out(os);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const Tensor& v = xs[k].value();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(v.data() + o * lens[k] * sp.inner, lens[k] * sp.inner,
                  out.data() + (o * sp.len + offset) * sp.inner);
    offset += lens[k];
  }
  std::vector<std::size_t> parents = ids;
  return xs[0].tape().record(std::move(out), std::move(parents), [ids, lens, sp](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if_any(self);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.tracked(ids[k])) {
        Tensor& gk = t.grad_buffer(ids[k]);
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t i = 0; i < lens[k] * sp.inner; ++i)
            gk[o * lens[k] * sp.inner + i] += g[(o * sp.len + offset) * sp.inner + i];
      }
      offset += lens[k];
    }
  });
}

Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t length) {
  const Shape& s = x.shape();
  if (axis >= s.size() || begin + length > s[axis]) {
    throw std::invalid_argument("slice: range [" + std::to_string(begin) + ", " +
                                std::to_string(begin + length) + ") on axis " + std::to_string(axis) +
                                " invalid for " + shape_str(s));
  }
  const AxisSplit sp = split_axis(s, axis);
  Shape os = s;
  os[axis] = length;
  Tensor out(os);
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(xv.data() + (o * sp.len + begin) * sp.inner, length * sp.inner,
                out.data() + o * length * sp.inner);
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {xid}, [xid, sp, begin, length](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if_any(self);
    Tensor& gx = t.grad_buffer(xid);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < length * sp.inner; ++i)
        gx[(o * sp.len + begin) * sp.inner + i] += g[o * length * sp.inner + i];
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {xid}, [xid](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if_any(self);
    Tensor& gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var gather_rows(Var x, std::span<const std::size_t> rows) {
  require_rank("gather_rows", x, 2);
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  Tensor out(Shape{rows.size(), d});
  const Tensor& xv = x.value();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) {
      throw std::out_of_range("gather_rows: row " + std::to_string(rows[r]) + " out of range for " +
                              shape_str(x.shape()));
    }
    std::copy_n(xv.data() + rows[r] * d, d, out.data() + r * d);
  }
  const std::size_t xid = x.id();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return x.tape().record(std::move(out), {xid}, [xid, d, idx = std::move(idx)](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if_any(self);
    Tensor& gx = t.grad_buffer(xid);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) gx[idx[r] * d + j] += g[r * d + j];
  });
}

// ---------------------------------------------------------------------------
// Normalisation

Var layer_norm(Var x, double eps) {
  if (x.shape().empty()) throw std::invalid_argument("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.value().size() / std::max<std::size_t>(d, 1);
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * d;
    double mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<double>(d);
    double var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (in[j] - mu) * inv_std[r];
  }
  const std::size_t xid = x.id();
  return x.tape().record(
      std::move(out), {xid}, [xid, rows, d, inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
        const Tensor& g = *t.grad_if_any(self);
        const Tensor& y = t.value(self);
        Tensor& gx = t.grad_buffer(xid);
        const double dn = static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double gm = 0, gy = 0;
          for (std::size_t j = 0; j < d; ++j) {
            gm += g[r * d + j];
            gy += g[r * d + j] * y[r * d + j];
          }
          for (std::size_t j = 0; j < d; ++j) {
            const std::size_t i = r * d + j;
            gx[i] += inv_std[r] * (g[i] - gm / dn - y[i] * gy / dn);
          }
        }
      });
}

Var l2_normalize(Var x, double eps) {
  if (x.shape().empty()) throw std::invalid_argument("l2_normalize: scalar input");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.value().size() / std::max<std::size_t>(d, 1);
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += xv[r * d + j] * xv[r * d + j];
    norms[r] = std::sqrt(s);
    const double denom = std::max(norms[r], eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] / denom;
  }
  const std::size_t xid = x.id();
  return x.tape().record(
      std::move(out), {xid}, [xid, rows, d, eps, norms = std::move(norms)](Tape& t, std::size_t self) {
        const Tensor& g = *t.grad_if_any(self);
        const Tensor& y = t.value(self);
        Tensor& gx = t.grad_buffer(xid);
        for (std::size_t r = 0; r < rows; ++r) {
          if (norms[r] < eps) {
            for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j] / eps;
            continue;
          }
          double gy = 0;
          for (std::size_t j = 0; j < d; ++j) gy += g[r * d + j] * y[r * d + j];
          for (std::size_t j = 0; j < d; ++j) {
            const std::size_t i = r * d + j;
            gx[i] += (g[i] - y[i] * gy) / norms[r];
          }
        }
      });
}

namespace {
thread_local DetachReplay* active_replay = nullptr;
}

DetachReplay::DetachReplay() : prev_(active_replay) { active_replay = this; }

DetachReplay::~DetachReplay() { active_replay = prev_; }

void DetachReplay::replay() {
  replaying_ = true;
  next_ = 0;
}

Var stop_gradient(Var x) {
  DetachReplay* r = active_replay;
  if (!r) return x.tape().constant(x.value());
  if (!r->replaying_) {
    r->values_.push_back(x.value());
    return x.tape().constant(x.value());
  }
  if (r->next_ >= r->values_.size() || r->values_[r->next_].shape() != x.shape()) {
    throw std::runtime_error("stop_gradient: replayed pass diverges from the recorded one");
  }
  return x.tape().constant(r->values_[r->next_++]);
}

Var grad_reverse(Var x) {
  return unary(x, [](double v) { return v; }, [](double, double) { return -1.0; });
}

Var split_heads(Var x, std::size_t batch, std::size_t tokens, std::size_t heads) {
  require_rank("split_heads", x, 2);
  const std::size_t d = x.shape()[1];
  if (x.shape()[0] != batch * tokens || heads == 0 || d % heads != 0) {
    throw std::invalid_argument("split_heads: shape " + shape_str(x.shape()) + " incompatible with batch " +
                                std::to_string(batch) + ", tokens " + std::to_string(tokens) + ", heads " +
                                std::to_string(heads));
  }
  const std::size_t dh = d / heads;
  Tensor out(Shape{batch * heads, tokens, dh});
  const Tensor& xv = x.value();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(xv.data() + (b * tokens + t) * d + h * dh, dh,
                    out.data() + ((b * heads + h) * tokens + t) * dh);
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {xid}, [=](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad_if_any(self);
    Tensor& gx = tp.grad_buffer(xid);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < tokens; ++t)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t j = 0; j < dh; ++j)
            gx[(b * tokens + t) * d + h * dh + j] += g[((b * heads + h) * tokens + t) * dh + j];
  });
}

Var merge_heads(Var x, std::size_t batch, std::size_t tokens, std::size_t heads) {
  require_rank("merge_heads", x, 3);
  if (x.shape()[0] != batch * heads || x.shape()[1] != tokens) {
    throw std::invalid_argument("merge_heads: shape " + shape_str(x.shape()) + " incompatible with batch " +
                                std::to_string(batch) + ", tokens " + std::to_string(tokens) + ", heads " +
                                std::to_string(heads));
  }
  const std::size_t dh = x.shape()[2];
  const std::size_t d = dh * heads;
  Tensor out(Shape{batch * tokens, d});
  const Tensor& xv = x.value();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(xv.data() + ((b * heads + h) * tokens + t) * dh, dh,
                    out.data() + (b * tokens + t) * d + h * dh);
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {xid}, [=](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad_if_any(self);
    Tensor& gx = tp.grad_buffer(xid);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < tokens; ++t)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t j = 0; j < dh; ++j)
            gx[((b * heads + h) * tokens + t) * dh + j] += g[(b * tokens + t) * d + h * dh + j];
  });
}

}  // namespace hilo
