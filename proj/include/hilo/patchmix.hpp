#pragma once

// Patch-level mixing in embedding space with attention-weighted semantic
// proportions and label smoothing.

#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "hilo/autodiff.hpp"

namespace hilo {

struct BetaParams {
  double a = std::log1p(std::exp(1.0));
  double b = std::log1p(std::exp(1.0));
};

struct MixSpec {
  std::size_t partner = 0;
  std::vector<double> beta;  // per patch, in [0, 1]
  double alpha = 1.0;
};

// P independent Beta(a, b) draws, via the gamma ratio X / (X + Y).
std::vector<double> sample_beta(std::size_t patches, const BetaParams& params, std::mt19937_64& rng);

// Tokens [(P+1), d] with the CLS token in row 0. Patch row j+1 becomes
// beta_j x + (1 - beta_j) x'; the CLS row of x is kept.
Tensor mix(const Tensor& tokens_x, const Tensor& tokens_partner, std::span<const double> beta);

// beta.s / (beta.s + (1 - beta).s'); 0.5 when the denominator is below 1e-12.
double mix_alpha(std::span<const double> beta, std::span<const double> s, std::span<const double> s_partner);

// alpha q + (1 - alpha) / K for a probability vector q.
std::vector<double> smooth_label(std::span<const double> q, double alpha);
// Same for the one-hot vector of class index c over k classes.
std::vector<double> smooth_label(std::size_t c, std::size_t k, double alpha);

// One mixed view per sample: partner drawn uniformly from the unlabelled
// members (not the sample itself when another exists), fresh beta, and alpha
// from attention scores attn [B, P]. Draw order per sample: partner, beta.
std::vector<MixSpec> plan_mix(const std::vector<bool>& labelled, const Tensor& attn, const BetaParams& params,
                              std::mt19937_64& rng);
// Self partner, beta = 1, alpha = 1 for every sample.
std::vector<MixSpec> identity_mix(std::size_t batch, std::size_t patches);

// Batched mixing of embedded tokens [B*(P+1), d] (CLS first per sample).
Var mix_tokens(Var tokens, std::span<const MixSpec> specs, std::size_t patches);

}  // namespace hilo
