#pragma once

// Synthetic category-discovery task with domain shift: class prototypes in
// patch space, per-domain affine styles and corruption kernels.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hilo/tensor.hpp"

namespace hilo {

enum class CorruptionKind { none, gaussian, shot, impulse, speckle, fog };

CorruptionKind corruption_from_string(const std::string& name);
std::string to_string(CorruptionKind kind);
// Every kind except none.
std::vector<CorruptionKind> corruption_kinds();

struct Corruption {
  CorruptionKind kind = CorruptionKind::none;
  int severity = 1;
};

struct TaskConfig {
  std::size_t num_classes = 10;
  std::size_t num_old = 5;
  std::size_t num_domains = 2;
  std::size_t samples_per_class_per_domain = 100;
  std::size_t patch_count = 16;
  std::size_t input_dim = 8;
  double class_separation = 8.0;
  double position_scale = 1.0;  // std of the per-position offsets
  double jitter = 0.3;
  double style_strength = 0.25;
  double corruption_scale = 1.0;
  // One entry per unseen domain (domain 1, 2, ...); the last entry repeats.
  std::vector<Corruption> corruptions{{CorruptionKind::gaussian, 3}};
  double labelled_fraction = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class Split { labelled, unlabelled_seen, unlabelled_unseen };
std::string to_string(Split split);
Split split_from_string(const std::string& name);

struct Sample {
  std::vector<double> patches;  // patch_count * input_dim, patch-major
  std::size_t class_id = 0;
  std::size_t domain_id = 0;
  bool labelled = false;
  Split split = Split::unlabelled_seen;

  bool operator==(const Sample&) const = default;
};

struct Dataset {
  std::size_t patch_count = 0;
  std::size_t input_dim = 0;
  std::size_t num_classes = 0;
  std::size_t num_old = 0;
  std::size_t num_domains = 0;
  std::vector<Sample> samples;

  std::size_t labelled_count() const;
  // Patches of the given samples as [n, P, input_dim].
  Tensor patches(std::span<const std::size_t> indices) const;
  Tensor all_patches() const;

  bool operator==(const Dataset&) const = default;
};

Dataset generate(const TaskConfig& config);

// Corrupts one sample's patches in place, laid out as patch_count rows.
void corrupt(std::span<double> patches, std::size_t patch_count, CorruptionKind kind, int severity,
             std::mt19937_64& rng, double scale = 1.0);

// Per-severity schedule value of a kind (noise std, photon count, fraction, ...).
double severity_parameter(CorruptionKind kind, int severity);

// Diamond-square field on a (2^n + 1)^2 lattice with side >= side, cropped to
// side x side and normalised to [0, 1]; row-major.
std::vector<double> plasma_fractal(std::size_t side, std::mt19937_64& rng, double roughness = 0.5);

// Line format: "<split> <class> <domain> <labelled> v_1 ... v_{P*input_dim}"
// after a "# hilo-dataset v1 ..." header. Values use %.17g.
void save_dataset(const Dataset& data, std::ostream& out);
Dataset load_dataset(std::istream& in);
void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace hilo
