#pragma once

// Domain pseudo-partition of the unlabelled pool and the epoch-dependent
// sampling weights that hold back predicted unseen-domain samples.

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "hilo/tensor.hpp"

namespace hilo {

struct CurriculumConfig {
  // Weights of predicted unseen-domain samples switch after this epoch; 80 of
  // 200 epochs at full scale, kept at the same fraction of the desk default.
  std::size_t t_switch = 12;
  double r0 = 0.0;
  double r_prime = 0.05;
  std::size_t k_partition = 2;
  // When set, r0 is taken as |D^l| / |D^b_hat| instead of the constant.
  bool r0_from_counts = false;

  void validate(std::size_t epochs) const;
};

struct DomainPartition {
  std::vector<std::size_t> seen;    // unlabelled samples clustered with the labelled ones
  std::vector<std::size_t> unseen;  // every other unlabelled sample
};

// ss_kmeans on features [N, dim] with every labelled sample forced into cluster 0.
DomainPartition partition_domains(const Tensor& features, const std::vector<bool>& labelled, std::size_t k_partition,
                                  std::uint64_t seed);

enum class SampleGroup { labelled, seen, unseen };

// 1 for labelled; |D^l| / |D^a_hat| for predicted seen (1 when that set is
// empty); r0 + (r' - r0) [t > t'] for predicted unseen.
double curriculum_weight(SampleGroup group, std::size_t epoch, std::size_t labelled_count, std::size_t seen_count,
                         std::size_t unseen_count, const CurriculumConfig& cfg);

// Weights for every sample index.
std::vector<double> sample_weights(const std::vector<bool>& labelled, const DomainPartition& partition,
                                   std::size_t epoch, const CurriculumConfig& cfg);

// batch draws with replacement, proportional to weight.
std::vector<std::size_t> draw_batch(std::span<const double> weights, std::size_t batch, std::mt19937_64& rng);

}  // namespace hilo
