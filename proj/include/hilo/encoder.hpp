#pragma once

// Micro patch-token transformer with dual projection heads, cosine
// prototype banks and the mutual-information critic.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <type_traits>
#include <string>
#include <utility>
#include <vector>

#include "hilo/autodiff.hpp"

namespace hilo {

struct EncoderConfig {
  std::size_t num_layers = 4;
  std::size_t patch_count = 16;
  std::size_t input_dim = 8;
  std::size_t token_dim = 32;
  std::size_t head_count = 4;
  std::size_t mlp_hidden = 64;
  std::size_t head_hidden = 32;
  std::size_t proj_dim = 16;
  std::size_t critic_hidden = 32;
  // 1-based block indices whose CLS output feeds the domain / semantic heads.
  std::size_t domain_tap_layer = 1;
  std::size_t semantic_tap_layer = 4;
  // A domain tap below the last block reads a detached copy of the trunk, so
  // L_d and the critic train only the domain head and W^d, as with a frozen
  // lower trunk. A tap on the last block is always attached.
  bool detach_domain_tap = true;
  std::size_t k_s = 10;
  std::size_t k_d = 2;

  void validate() const;
};

// Linear layers store weights as [fan_in, fan_out].
template <class T>
struct BlockParams {
  T ln1_gain, ln1_bias, qkv_weight, qkv_bias, out_weight, out_bias;
  T ln2_gain, ln2_bias, fc1_weight, fc1_bias, fc2_weight, fc2_bias;
};

template <class T>
struct MlpParams {
  T fc1_weight, fc1_bias, fc2_weight, fc2_bias;
};

template <class T>
struct EncoderParams {
  T embed_weight, embed_bias, pos, cls;
  std::vector<BlockParams<T>> blocks;
  MlpParams<T> head_d, head_s;
  T proto_s, proto_d;
  MlpParams<T> critic;

  // Every parameter with its stable name, in serialization order.
  template <class Self>
  static auto entries_of(Self& self) {
    using Ptr = std::conditional_t<std::is_const_v<Self>, const T*, T*>;
    std::vector<std::pair<std::string, Ptr>> out;
    out.emplace_back("embed.weight", &self.embed_weight);
    out.emplace_back("embed.bias", &self.embed_bias);
    out.emplace_back("embed.pos", &self.pos);
    out.emplace_back("embed.cls", &self.cls);
    for (std::size_t l = 0; l < self.blocks.size(); ++l) {
      auto& b = self.blocks[l];
      const std::string p = "block" + std::to_string(l + 1) + ".";
      out.emplace_back(p + "ln1.gain", &b.ln1_gain);
      out.emplace_back(p + "ln1.bias", &b.ln1_bias);
      out.emplace_back(p + "attn.qkv.weight", &b.qkv_weight);
      out.emplace_back(p + "attn.qkv.bias", &b.qkv_bias);
      out.emplace_back(p + "attn.out.weight", &b.out_weight);
      out.emplace_back(p + "attn.out.bias", &b.out_bias);
      out.emplace_back(p + "ln2.gain", &b.ln2_gain);
      out.emplace_back(p + "ln2.bias", &b.ln2_bias);
      out.emplace_back(p + "mlp.fc1.weight", &b.fc1_weight);
      out.emplace_back(p + "mlp.fc1.bias", &b.fc1_bias);
      out.emplace_back(p + "mlp.fc2.weight", &b.fc2_weight);
      out.emplace_back(p + "mlp.fc2.bias", &b.fc2_bias);
    }
    auto mlp = [&out](const std::string& p, auto& m) {
      out.emplace_back(p + ".fc1.weight", &m.fc1_weight);
      out.emplace_back(p + ".fc1.bias", &m.fc1_bias);
      out.emplace_back(p + ".fc2.weight", &m.fc2_weight);
      out.emplace_back(p + ".fc2.bias", &m.fc2_bias);
    };
    mlp("head_d", self.head_d);
    mlp("head_s", self.head_s);
    out.emplace_back("proto_s", &self.proto_s);
    out.emplace_back("proto_d", &self.proto_d);
    mlp("critic", self.critic);
    return out;
  }
  auto entries() { return entries_of(*this); }
  auto entries() const { return entries_of(*this); }
};

struct EncoderState {
  EncoderConfig config;
  EncoderParams<Tensor> params;

  std::size_t parameter_count() const;
  // Parameters of the domain projection head only.
  std::size_t domain_head_parameter_count() const;
  // Re-projects every prototype row onto the unit sphere.
  void normalize_prototypes();
  bool operator==(const EncoderState& other) const;
};

EncoderState init_encoder(const EncoderConfig& config, std::uint64_t seed);

// Parameters registered on a tape, either as tracked leaves or constants.
struct BoundEncoder {
  const EncoderConfig* config = nullptr;
  EncoderParams<Var> params;
};

BoundEncoder bind(Tape& tape, const EncoderState& state, bool track);
// Gradients of every bound parameter, in entries() order of EncoderParams.
EncoderParams<Tensor> gradients(const Tape& tape, const BoundEncoder& bound);

// Patches [B, P, input_dim] (or [P, input_dim]) -> tokens [B*(P+1), token_dim],
// CLS token at row b*(P+1).
Var embed(const BoundEncoder& enc, const Tensor& patches);
Var embed(const BoundEncoder& enc, Var patches);

struct EncoderOutputs {
  Var z_d;      // [B, proj_dim], unit rows
  Var z_s;      // [B, proj_dim], unit rows
  Var z_hat;    // [B, token_dim], unit CLS output of the last block
  Var z_hat_s;  // unit CLS output at the semantic tap
  Var z_hat_d;  // unit CLS output at the domain tap
  Tensor attn_cls;  // [B, P], final-block CLS attention over patches, head-averaged
};

// Runs all blocks on tokens [B*(P+1), token_dim].
EncoderOutputs forward(const BoundEncoder& enc, Var tokens, std::size_t batch);

// Critic scores for concatenated pairs [N, 2*proj_dim] -> [N, 1].
Var critic(const BoundEncoder& enc, Var pairs);

// Plain-value single-sample view of the forward pass.
struct ForwardOutputs {
  std::vector<double> z_d, z_s, z_hat, z_hat_s, z_hat_d;
  std::vector<double> attn_cls;
};

// tokens [(P+1), token_dim] (already embedded).
ForwardOutputs forward(const EncoderState& state, const Tensor& tokens);
// Embeds then runs forward on a batch of raw patches [B, P, input_dim].
std::vector<ForwardOutputs> encode(const EncoderState& state, const Tensor& patches);

// softmax(prototypes . feature / tau). prototypes is [k, dim].
std::vector<double> cosine_logits(std::span<const double> feature, const Tensor& prototypes, double tau);
// Raw cosine scores features [B, dim] . prototypes [k, dim]^T -> [B, k].
Var prototype_scores(Var features, Var prototypes);

// Text checkpoint: "hilo-encoder v1", config lines, then per parameter
// "param <name> <rank> <dims...>" followed by one line of %.17g values.
void save_encoder(const EncoderState& state, std::ostream& out);
EncoderState load_encoder(std::istream& in);
void save_encoder(const EncoderState& state, const std::filesystem::path& path);
EncoderState load_encoder(const std::filesystem::path& path);

}  // namespace hilo
