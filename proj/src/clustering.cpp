#include "hilo/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

namespace hilo {

namespace {

double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0;
  for (std::size_t j = 0; j < d; ++j) {
    const double t = a[j] - b[j];
    s += t * t;
  }
  return s;
}

}  // namespace

ClusterResult ss_kmeans(const Tensor& points, std::size_t k, std::span<const int> forced,
                        const KMeansOptions& opts) {
  if (points.rank() != 2 || points.dim(0) == 0) throw std::invalid_argument("ss_kmeans: points must be non-empty [N, dim]");
  const std::size_t n = points.dim(0);
  const std::size_t d = points.dim(1);
  if (k == 0) throw std::invalid_argument("ss_kmeans: k must be positive");
  if (k > n) throw std::invalid_argument("ss_kmeans: k = " + std::to_string(k) + " exceeds " + std::to_string(n) + " points");
  if (!forced.empty() && forced.size() != n) throw std::invalid_argument("ss_kmeans: forced map must cover every point");
  if (!points.all_finite()) throw std::invalid_argument("ss_kmeans: non-finite point");

  auto pin = [&](std::size_t i) { return forced.empty() ? -1 : forced[i]; };
  const double* x = points.data();
  Tensor cent({k, d}, 0.0);
  std::vector<bool> ready(k, false);
  std::vector<std::size_t> counts(k, 0);
  std::vector<std::size_t> free_points;
  for (std::size_t i = 0; i < n; ++i) {
    const int f = pin(i);
    if (f < -1 || f >= static_cast<int>(k)) throw std::invalid_argument("ss_kmeans: forced cluster out of range");
    if (f < 0) {
      free_points.push_back(i);
      continue;
    }
    for (std::size_t j = 0; j < d; ++j) cent.at(f, j) += x[i * d + j];
    ++counts[f];
  }
  std::size_t chosen = 0;
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c] == 0) continue;
    for (std::size_t j = 0; j < d; ++j) cent.at(c, j) /= static_cast<double>(counts[c]);
    ready[c] = true;
    ++chosen;
  }
  if (k - chosen > free_points.size()) throw std::invalid_argument("ss_kmeans: not enough free points to seed every cluster");

  // Greedy farthest-point seeding of the remaining clusters.
  std::mt19937_64 rng(opts.seed);
  std::vector<double> near(n, std::numeric_limits<double>::infinity());
  auto refresh = [&](std::size_t c) {
    for (std::size_t i : free_points) near[i] = std::min(near[i], sq_dist(x + i * d, &cent.at(c, 0), d));
  };
  for (std::size_t c = 0; c < k; ++c)
    if (ready[c]) refresh(c);
  for (std::size_t c = 0; c < k; ++c) {
    if (ready[c]) continue;
    std::size_t pick;
    if (chosen == 0) {
      std::uniform_int_distribution<std::size_t> u(0, free_points.size() - 1);
      pick = free_points[u(rng)];
    } else {
      pick = free_points.front();
      for (std::size_t i : free_points)
        if (near[i] > near[pick]) pick = i;
    }
    for (std::size_t j = 0; j < d; ++j) cent.at(c, j) = x[pick * d + j];
    ready[c] = true;
    ++chosen;
    refresh(c);
  }

  ClusterResult res;
  res.initial_centroids = cent;
  res.assignments.assign(n, 0);
  std::vector<double> dist(n, 0.0);
  for (std::size_t it = 0; it < std::max<std::size_t>(opts.max_iter, 1); ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      const int f = pin(i);
      if (f >= 0) {
        res.assignments[i] = static_cast<std::size_t>(f);
        dist[i] = sq_dist(x + i * d, &cent.at(f, 0), d);
        continue;
      }
      std::size_t best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double v = sq_dist(x + i * d, &cent.at(c, 0), d);
        if (v < bd) {
          bd = v;
          best = c;
        }
      }
      res.assignments[i] = best;
      dist[i] = bd;
    }
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) ++counts[res.assignments[i]];
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      std::size_t far = n;
      for (std::size_t i : free_points) {
        if (counts[res.assignments[i]] < 2) continue;
        if (far == n || dist[i] > dist[far]) far = i;
      }
      if (far == n || !(dist[far] > 0.0)) continue;
      --counts[res.assignments[far]];
      res.assignments[far] = c;
      counts[c] = 1;
      dist[far] = 0.0;
    }

    Tensor next({k, d}, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) next.at(res.assignments[i], j) += x[i * d + j];
    double moved = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        for (std::size_t j = 0; j < d; ++j) next.at(c, j) = cent.at(c, j);
        continue;
      }
      for (std::size_t j = 0; j < d; ++j) next.at(c, j) /= static_cast<double>(counts[c]);
      moved = std::max(moved, std::sqrt(sq_dist(&next.at(c, 0), &cent.at(c, 0), d)));
    }
    cent = std::move(next);
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) inertia += sq_dist(x + i * d, &cent.at(res.assignments[i], 0), d);
    res.inertia_trace.push_back(inertia);
    res.iterations = it + 1;
    if (moved < opts.tol) break;
  }
  res.centroids = std::move(cent);
  res.inertia = res.inertia_trace.back();
  return res;
}

Assignment hungarian(const Tensor& cost) {
  if (cost.rank() != 2) throw std::invalid_argument("hungarian: cost must be a matrix");
  if (!cost.all_finite()) throw std::invalid_argument("hungarian: non-finite cost");
  const std::size_t rows = cost.dim(0), cols = cost.dim(1);
  const std::size_t n = std::max(rows, cols);
  Assignment out;
  out.row_to_col.assign(rows, 0);
  if (n == 0) return out;
  auto a = [&](std::size_t i, std::size_t j) { return (i < rows && j < cols) ? cost.at(i, j) : 0.0; };

  // Potentials formulation, 1-based with a virtual column 0.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> col_of(n, 0);
  for (std::size_t j = 1; j <= n; ++j) col_of[p[j] - 1] = j - 1;
  for (std::size_t i = 0; i < rows; ++i) {
    out.row_to_col[i] = col_of[i];
    out.cost += a(i, col_of[i]);
  }
  return out;
}

AccReport cluster_acc(std::span<const std::size_t> y_true, std::span<const std::size_t> y_pred,
                      const std::set<std::size_t>& old_classes) {
  if (y_true.size() != y_pred.size()) {
    throw std::invalid_argument("cluster_acc: " + std::to_string(y_true.size()) + " labels but " +
                                std::to_string(y_pred.size()) + " predictions");
  }
  AccReport r;
  if (y_true.empty()) return r;
  const std::size_t dim =
      std::max(*std::max_element(y_true.begin(), y_true.end()), *std::max_element(y_pred.begin(), y_pred.end())) + 1;
  Tensor neg_counts({dim, dim}, 0.0);
  for (std::size_t i = 0; i < y_true.size(); ++i) neg_counts.at(y_pred[i], y_true[i]) -= 1.0;
  r.permutation = hungarian(neg_counts).row_to_col;

  std::size_t hit_all = 0, hit_old = 0, hit_new = 0;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    const bool hit = r.permutation[y_pred[i]] == y_true[i];
    const bool old = old_classes.count(y_true[i]) != 0;
    ++r.count_all;
    hit_all += hit;
    if (old) {
      ++r.count_old;
      hit_old += hit;
    } else {
      ++r.count_new;
      hit_new += hit;
    }
  }
  auto frac = [](std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); };
  r.acc_all = frac(hit_all, r.count_all);
  r.acc_old = frac(hit_old, r.count_old);
  r.acc_new = frac(hit_new, r.count_new);
  return r;
}

}  // namespace hilo
