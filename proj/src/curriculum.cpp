#include "hilo/curriculum.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "hilo/clustering.hpp"

namespace hilo {

void CurriculumConfig::validate(std::size_t epochs) const {
  if (t_switch > epochs) throw std::invalid_argument("CurriculumConfig: t_switch exceeds the epoch count");
  if (!(r0 >= 0) || !(r_prime >= 0)) throw std::invalid_argument("CurriculumConfig: weights must be non-negative");
  if (k_partition < 2) throw std::invalid_argument("CurriculumConfig: k_partition must be at least 2");
}

DomainPartition partition_domains(const Tensor& features, const std::vector<bool>& labelled, std::size_t k_partition,
                                  std::uint64_t seed) {
  if (features.rank() != 2 || features.dim(0) != labelled.size()) {
    throw std::invalid_argument("partition_domains: need one feature row per sample");
  }
  std::vector<int> forced(labelled.size(), -1);
  for (std::size_t i = 0; i < labelled.size(); ++i)
    if (labelled[i]) forced[i] = 0;
  KMeansOptions opts;
  opts.seed = seed;
  const ClusterResult cr = ss_kmeans(features, k_partition, forced, opts);
  DomainPartition p;
  for (std::size_t i = 0; i < labelled.size(); ++i) {
    if (labelled[i]) continue;
    (cr.assignments[i] == 0 ? p.seen : p.unseen).push_back(i);
  }
  return p;
}

double curriculum_weight(SampleGroup group, std::size_t epoch, std::size_t labelled_count, std::size_t seen_count,
                         std::size_t unseen_count, const CurriculumConfig& cfg) {
  switch (group) {
    case SampleGroup::labelled:
      return 1.0;
    case SampleGroup::seen:
      if (seen_count == 0) return 1.0;
      return static_cast<double>(labelled_count) / static_cast<double>(seen_count);
    case SampleGroup::unseen: {
      double r0 = cfg.r0;
      if (cfg.r0_from_counts) {
        r0 = unseen_count == 0 ? 1.0 : static_cast<double>(labelled_count) / static_cast<double>(unseen_count);
      }
      return r0 + (cfg.r_prime - r0) * (epoch > cfg.t_switch ? 1.0 : 0.0);
    }
  }
  throw std::invalid_argument("curriculum_weight: unknown group");
}

std::vector<double> sample_weights(const std::vector<bool>& labelled, const DomainPartition& partition,
                                   std::size_t epoch, const CurriculumConfig& cfg) {
  std::size_t nl = 0;
  for (bool b : labelled) nl += b;
  std::vector<double> w(labelled.size(), -1.0);
  for (std::size_t i = 0; i < labelled.size(); ++i)
    if (labelled[i]) w[i] = 1.0;
  const std::size_t ns = partition.seen.size(), nu = partition.unseen.size();
  auto fill = [&](const std::vector<std::size_t>& idx, SampleGroup g) {
    const double v = curriculum_weight(g, epoch, nl, ns, nu, cfg);
    for (std::size_t i : idx) {
      if (i >= w.size() || labelled[i]) throw std::invalid_argument("sample_weights: partition index invalid");
      w[i] = v;
    }
  };
  fill(partition.seen, SampleGroup::seen);
  fill(partition.unseen, SampleGroup::unseen);
  for (double v : w)
    if (v < 0) throw std::invalid_argument("sample_weights: partition does not cover every unlabelled sample");
  return w;
}

std::vector<std::size_t> draw_batch(std::span<const double> weights, std::size_t batch, std::mt19937_64& rng) {
  double total = 0;
  for (double v : weights) {
    if (!(v >= 0) || !std::isfinite(v)) throw std::invalid_argument("draw_batch: weights must be finite and non-negative");
    total += v;
  }
  if (!(total > 0)) throw std::invalid_argument("draw_batch: all weights are zero");
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  std::vector<std::size_t> out(batch);
  for (auto& i : out) i = pick(rng);
  return out;
}

}  // namespace hilo
