#include "hilo/patchmix.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace hilo {

std::vector<double> sample_beta(std::size_t patches, const BetaParams& params, std::mt19937_64& rng) {
  if (!(params.a > 0) || !(params.b > 0)) throw std::invalid_argument("sample_beta: parameters must be positive");
  std::gamma_distribution<double> ga(params.a, 1.0), gb(params.b, 1.0);
  std::vector<double> out(patches);
  for (auto& v : out) {
    const double x = ga(rng);
    const double y = gb(rng);
    v = (x + y > 0) ? x / (x + y) : 0.5;
  }
  return out;
}

Tensor mix(const Tensor& tokens_x, const Tensor& tokens_partner, std::span<const double> beta) {
  if (tokens_x.rank() != 2 || tokens_x.shape() != tokens_partner.shape()) {
    throw std::invalid_argument("mix: token shapes " + shape_str(tokens_x.shape()) + " and " +
                                shape_str(tokens_partner.shape()) + " differ");
  }
  if (beta.size() + 1 != tokens_x.dim(0)) {
    throw std::invalid_argument("mix: beta length " + std::to_string(beta.size()) + " does not match " +
                                std::to_string(tokens_x.dim(0) - 1) + " patches");
  }
  Tensor out = tokens_x;
  const std::size_t d = tokens_x.dim(1);
  for (std::size_t j = 0; j < beta.size(); ++j) {
    for (std::size_t c = 0; c < d; ++c) {
      out.at(j + 1, c) = beta[j] * tokens_x.at(j + 1, c) + (1.0 - beta[j]) * tokens_partner.at(j + 1, c);
    }
  }
  return out;
}

double mix_alpha(std::span<const double> beta, std::span<const double> s, std::span<const double> s_partner) {
  if (beta.size() != s.size() || beta.size() != s_partner.size()) {
    throw std::invalid_argument("mix_alpha: beta and attention lengths differ");
  }
  double keep = 0, lost = 0;
  for (std::size_t j = 0; j < beta.size(); ++j) {
    if (s[j] < 0 || s_partner[j] < 0) throw std::invalid_argument("mix_alpha: negative attention score");
    keep += beta[j] * s[j];
    lost += (1.0 - beta[j]) * s_partner[j];
  }
  const double den = keep + lost;
  if (den < 1e-12) return 0.5;
  return std::clamp(keep / den, 0.0, 1.0);
}

std::vector<double> smooth_label(std::span<const double> q, double alpha) {
  if (q.empty()) throw std::invalid_argument("smooth_label: empty label");
  if (!(alpha >= 0 && alpha <= 1)) throw std::invalid_argument("smooth_label: alpha must lie in [0, 1]");
  const double floor = (1.0 - alpha) / static_cast<double>(q.size());
  std::vector<double> out(q.size());
  for (std::size_t k = 0; k < q.size(); ++k) out[k] = alpha * q[k] + floor;
  return out;
}

std::vector<double> smooth_label(std::size_t c, std::size_t k, double alpha) {
  if (c >= k) throw std::invalid_argument("smooth_label: class index out of range");
  std::vector<double> q(k, 0.0);
  q[c] = 1.0;
  return smooth_label(q, alpha);
}

std::vector<MixSpec> plan_mix(const std::vector<bool>& labelled, const Tensor& attn, const BetaParams& params,
                              std::mt19937_64& rng) {
  const std::size_t b = labelled.size();
  if (attn.rank() != 2 || attn.dim(0) != b) {
    throw std::invalid_argument("plan_mix: attention must be [batch, patches]");
  }
  const std::size_t p = attn.dim(1);
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < b; ++i)
    if (!labelled[i]) pool.push_back(i);
  if (pool.empty()) throw std::invalid_argument("plan_mix: batch has no unlabelled sample to mix with");

  std::vector<MixSpec> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    MixSpec& m = out[i];
    const bool self_in_pool = !labelled[i];
    if (self_in_pool && pool.size() > 1) {
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 2);
      std::size_t k = pick(rng);
      if (pool[k] >= i) ++k;  // skip self (pool is sorted)
      m.partner = pool[k];
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      m.partner = pool[pick(rng)];
    }
    m.beta = sample_beta(p, params, rng);
    m.alpha = mix_alpha(m.beta, attn.row(i), attn.row(m.partner));
  }
  return out;
}

std::vector<MixSpec> identity_mix(std::size_t batch, std::size_t patches) {
  std::vector<MixSpec> out(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    out[i].partner = i;
    out[i].beta.assign(patches, 1.0);
    out[i].alpha = 1.0;
  }
  return out;
}

Var mix_tokens(Var tokens, std::span<const MixSpec> specs, std::size_t patches) {
  const std::size_t t = patches + 1;
  const std::size_t b = specs.size();
  if (tokens.shape().size() != 2 || tokens.shape()[0] != b * t) {
    throw std::invalid_argument("mix_tokens: tokens " + shape_str(tokens.shape()) + " do not hold " +
                                std::to_string(b) + " samples of " + std::to_string(t) + " tokens");
  }
  const std::size_t d = tokens.shape()[1];
  std::vector<std::size_t> rows(b * t);
  Tensor keep({b * t, d}, 1.0), take({b * t, d}, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    const MixSpec& m = specs[i];
    if (m.partner >= b || m.beta.size() != patches) throw std::invalid_argument("mix_tokens: malformed mix spec");
    rows[i * t] = i * t;
    for (std::size_t j = 0; j < patches; ++j) {
      const std::size_t r = i * t + j + 1;
      rows[r] = m.partner * t + j + 1;
      for (std::size_t c = 0; c < d; ++c) {
        keep.at(r, c) = m.beta[j];
        take.at(r, c) = 1.0 - m.beta[j];
      }
    }
  }
  Tape& tape = tokens.tape();
  Var partner = gather_rows(tokens, rows);
  return add(mul(tokens, tape.constant(std::move(keep))), mul(partner, tape.constant(std::move(take))));
}

}  // namespace hilo
