#include "hilo/encoder.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace hilo {

void EncoderConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("EncoderConfig: " + m); };
  if (num_layers == 0) fail("num_layers must be positive");
  if (patch_count == 0 || input_dim == 0 || token_dim == 0) fail("patch_count, input_dim and token_dim must be positive");
  if (head_count == 0 || token_dim % head_count != 0) fail("head_count must divide token_dim");
  if (mlp_hidden == 0 || head_hidden == 0 || proj_dim == 0 || critic_hidden == 0) fail("hidden sizes must be positive");
  if (domain_tap_layer < 1 || domain_tap_layer > num_layers) fail("domain_tap_layer must lie in [1, num_layers]");
  if (semantic_tap_layer < 1 || semantic_tap_layer > num_layers) fail("semantic_tap_layer must lie in [1, num_layers]");
  if (k_s < 1) fail("k_s must be positive");
  if (k_d < 2) fail("k_d must be at least 2");
}

namespace {

template <class T>
EncoderParams<T> shaped_like(std::size_t layers) {
  EncoderParams<T> p;
  p.blocks.resize(layers);
  return p;
}

void normalize_rows(Tensor& t) {
  const std::size_t d = t.shape().back();
  for (std::size_t r = 0; r < t.size() / d; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += t.at(r, j) * t.at(r, j);
    const double n = std::max(std::sqrt(s), kNormFloor);
    for (std::size_t j = 0; j < d; ++j) t.at(r, j) /= n;
  }
}

Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

Var mlp(Var x, const MlpParams<Var>& m) {
  return linear(gelu(linear(x, m.fc1_weight, m.fc1_bias)), m.fc2_weight, m.fc2_bias);
}

void check_finite(const Var& v, std::size_t layer) {
  if (!v.value().all_finite()) {
    throw std::runtime_error("encoder: non-finite activation after block " + std::to_string(layer));
  }
}

}  // namespace

std::size_t EncoderState::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params.entries()) n += t->size();
  return n;
}

std::size_t EncoderState::domain_head_parameter_count() const {
  const auto& h = params.head_d;
  return h.fc1_weight.size() + h.fc1_bias.size() + h.fc2_weight.size() + h.fc2_bias.size();
}

void EncoderState::normalize_prototypes() {
  normalize_rows(params.proto_s);
  normalize_rows(params.proto_d);
}

bool EncoderState::operator==(const EncoderState& other) const {
  auto a = params.entries();
  auto b = other.params.entries();
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].first != b[i].first || !(*a[i].second == *b[i].second)) return false;
  }
  return true;
}

EncoderState init_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto weight = [&](std::size_t fan_in, std::size_t fan_out) {
    Tensor w(Shape{fan_in, fan_out});
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : w.values()) v = s * normal(rng);
    return w;
  };
  auto make_mlp = [&](std::size_t in, std::size_t hidden, std::size_t out) {
    MlpParams<Tensor> m;
    m.fc1_weight = weight(in, hidden);
    m.fc1_bias = Tensor(Shape{hidden});
    m.fc2_weight = weight(hidden, out);
    m.fc2_bias = Tensor(Shape{out});
    return m;
  };
  const std::size_t d = cfg.token_dim;
  EncoderState st;
  st.config = cfg;
  auto& p = st.params;
  p.embed_weight = weight(cfg.input_dim, d);
  p.embed_bias = Tensor(Shape{d});
  p.pos = weight(cfg.patch_count, d);
  p.cls = weight(d, 1).reshaped(Shape{d});
  p.blocks.resize(cfg.num_layers);
  for (auto& b : p.blocks) {
    b.ln1_gain = Tensor(Shape{d}, 1.0);
    b.ln1_bias = Tensor(Shape{d});
    b.qkv_weight = weight(d, 3 * d);
    b.qkv_bias = Tensor(Shape{3 * d});
    b.out_weight = weight(d, d);
    b.out_bias = Tensor(Shape{d});
    b.ln2_gain = Tensor(Shape{d}, 1.0);
    b.ln2_bias = Tensor(Shape{d});
    b.fc1_weight = weight(d, cfg.mlp_hidden);
    b.fc1_bias = Tensor(Shape{cfg.mlp_hidden});
    b.fc2_weight = weight(cfg.mlp_hidden, d);
    b.fc2_bias = Tensor(Shape{d});
  }
  p.head_d = make_mlp(d, cfg.head_hidden, cfg.proj_dim);
  p.head_s = make_mlp(d, cfg.head_hidden, cfg.proj_dim);
  p.proto_s = weight(1, cfg.k_s * d).reshaped(Shape{cfg.k_s, d});
  p.proto_d = weight(1, cfg.k_d * d).reshaped(Shape{cfg.k_d, d});
  st.normalize_prototypes();
  p.critic = make_mlp(2 * cfg.proj_dim, cfg.critic_hidden, 1);
  return st;
}

BoundEncoder bind(Tape& tape, const EncoderState& state, bool track) {
  BoundEncoder b;
  b.config = &state.config;
  b.params = shaped_like<Var>(state.params.blocks.size());
  auto src = state.params.entries();
  auto dst = b.params.entries();
  for (std::size_t i = 0; i < src.size(); ++i) {
    *dst[i].second = track ? tape.leaf(*src[i].second) : tape.constant(*src[i].second);
  }
  return b;
}

EncoderParams<Tensor> gradients(const Tape& tape, const BoundEncoder& bound) {
  auto g = shaped_like<Tensor>(bound.params.blocks.size());
  auto src = bound.params.entries();
  auto dst = g.entries();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = tape.grad(*src[i].second);
  return g;
}

Var embed(const BoundEncoder& enc, const Tensor& patches) {
  return embed(enc, enc.params.embed_weight.tape().constant(patches));
}

Var embed(const BoundEncoder& enc, Var patches) {
  const EncoderConfig& cfg = *enc.config;
  const Shape& s = patches.shape();
  const bool single = s.size() == 2;
  if (!(s.size() == 2 || s.size() == 3) || s[s.size() - 2] != cfg.patch_count || s.back() != cfg.input_dim) {
    throw std::invalid_argument("embed: expected patches [B, " + std::to_string(cfg.patch_count) + ", " +
                                std::to_string(cfg.input_dim) + "], got " + shape_str(s));
  }
  const std::size_t batch = single ? 1 : s[0];
  const std::size_t P = cfg.patch_count, d = cfg.token_dim;
  Var flat = reshape(patches, Shape{batch * P, cfg.input_dim});
  Var tok = linear(flat, enc.params.embed_weight, enc.params.embed_bias);
  std::vector<std::size_t> pos_idx(batch * P);
  for (std::size_t r = 0; r < pos_idx.size(); ++r) pos_idx[r] = r % P;
  tok = add(tok, gather_rows(enc.params.pos, pos_idx));
  std::vector<std::size_t> cls_idx(batch, 0);
  Var cls_rows = gather_rows(reshape(enc.params.cls, Shape{1, d}), cls_idx);
  const Var parts[] = {cls_rows, tok};
  Var stacked = concat(parts, 0);
  std::vector<std::size_t> order(batch * (P + 1));
  for (std::size_t b = 0; b < batch; ++b) {
    order[b * (P + 1)] = b;
    for (std::size_t j = 0; j < P; ++j) order[b * (P + 1) + 1 + j] = batch + b * P + j;
  }
  return gather_rows(stacked, order);
}

EncoderOutputs forward(const BoundEncoder& enc, Var tokens, std::size_t batch) {
  const EncoderConfig& cfg = *enc.config;
  const std::size_t T = cfg.patch_count + 1, d = cfg.token_dim, H = cfg.head_count;
  if (tokens.shape() != Shape{batch * T, d}) {
    throw std::invalid_argument("forward: expected tokens " + shape_str(Shape{batch * T, d}) + ", got " +
                                shape_str(tokens.shape()));
  }
  std::vector<std::size_t> cls_rows(batch);
  for (std::size_t b = 0; b < batch; ++b) cls_rows[b] = b * T;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(d / H));

  Var x = tokens;
  Var cls_d, cls_s, att;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const auto& bp = enc.params.blocks[l];
    Var h = add_row(mul_row(layer_norm(x), bp.ln1_gain), bp.ln1_bias);
    Var qkv = linear(h, bp.qkv_weight, bp.qkv_bias);
    Var q = split_heads(slice(qkv, 1, 0, d), batch, T, H);
    Var k = split_heads(slice(qkv, 1, d, d), batch, T, H);
    Var v = split_heads(slice(qkv, 1, 2 * d, d), batch, T, H);
    att = softmax(scale(bmm(q, transpose(k)), attn_scale));
    Var ctx = merge_heads(bmm(att, v), batch, T, H);
    x = add(x, linear(ctx, bp.out_weight, bp.out_bias));
    Var h2 = add_row(mul_row(layer_norm(x), bp.ln2_gain), bp.ln2_bias);
    x = add(x, linear(gelu(linear(h2, bp.fc1_weight, bp.fc1_bias)), bp.fc2_weight, bp.fc2_bias));
    check_finite(x, l + 1);
    if (l + 1 == cfg.domain_tap_layer) {
      cls_d = gather_rows(x, cls_rows);
      if (cfg.detach_domain_tap && l + 1 < cfg.num_layers) cls_d = stop_gradient(cls_d);
    }
    if (l + 1 == cfg.semantic_tap_layer) cls_s = gather_rows(x, cls_rows);
  }
  EncoderOutputs out;
  Var cls_last = gather_rows(x, cls_rows);
  out.z_hat = l2_normalize(cls_last);
  out.z_hat_s = l2_normalize(cls_s);
  out.z_hat_d = l2_normalize(cls_d);
  out.z_s = l2_normalize(mlp(cls_s, enc.params.head_s));
  out.z_d = l2_normalize(mlp(cls_d, enc.params.head_d));

  const std::size_t P = cfg.patch_count;
  const Tensor& a = att.value();  // [B*H, T, T]
  out.attn_cls = Tensor(Shape{batch, P});
  for (std::size_t b = 0; b < batch; ++b) {
    double total = 0;
    for (std::size_t j = 0; j < P; ++j) {
      double s = 0;
      for (std::size_t hh = 0; hh < H; ++hh) s += a[((b * H + hh) * T + 0) * T + 1 + j];
      out.attn_cls.at(b, j) = s / static_cast<double>(H);
      total += out.attn_cls.at(b, j);
    }
    for (std::size_t j = 0; j < P; ++j) {
      out.attn_cls.at(b, j) = total > 0 ? out.attn_cls.at(b, j) / total : 1.0 / static_cast<double>(P);
    }
  }
  return out;
}

Var critic(const BoundEncoder& enc, Var pairs) { return mlp(pairs, enc.params.critic); }

namespace {

std::vector<double> row_of(const Var& v, std::size_t r) { return v.value().row(r); }

}  // namespace

ForwardOutputs forward(const EncoderState& state, const Tensor& tokens) {
  Tape tape;
  BoundEncoder enc = bind(tape, state, false);
  EncoderOutputs o = forward(enc, tape.constant(tokens), 1);
  return {row_of(o.z_d, 0), row_of(o.z_s, 0), row_of(o.z_hat, 0), row_of(o.z_hat_s, 0), row_of(o.z_hat_d, 0),
          o.attn_cls.row(0)};
}

std::vector<ForwardOutputs> encode(const EncoderState& state, const Tensor& patches) {
  const EncoderConfig& cfg = state.config;
  if (patches.rank() != 3) throw std::invalid_argument("encode: expected [B, P, input_dim], got " + shape_str(patches.shape()));
  const std::size_t n = patches.dim(0);
  const std::size_t per = cfg.patch_count * cfg.input_dim;
  constexpr std::size_t kChunk = 256;
  std::vector<ForwardOutputs> out;
  out.reserve(n);
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t len = std::min(kChunk, n - start);
    Tensor chunk(Shape{len, cfg.patch_count, cfg.input_dim},
                 std::vector<double>(patches.data() + start * per, patches.data() + (start + len) * per));
    Tape tape;
    BoundEncoder enc = bind(tape, state, false);
    EncoderOutputs o = forward(enc, embed(enc, chunk), len);
    for (std::size_t b = 0; b < len; ++b) {
      out.push_back({row_of(o.z_d, b), row_of(o.z_s, b), row_of(o.z_hat, b), row_of(o.z_hat_s, b),
                     row_of(o.z_hat_d, b), o.attn_cls.row(b)});
    }
  }
  return out;
}

std::vector<double> cosine_logits(std::span<const double> feature, const Tensor& prototypes, double tau) {
  if (!(tau > 0)) throw std::invalid_argument("cosine_logits: temperature must be positive");
  if (prototypes.rank() != 2 || prototypes.dim(1) != feature.size()) {
    throw std::invalid_argument("cosine_logits: prototypes " + shape_str(prototypes.shape()) +
                                " do not match feature length " + std::to_string(feature.size()));
  }
  const std::size_t k = prototypes.dim(0);
  std::vector<double> logits(k);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < k; ++c) {
    double dot = 0;
    for (std::size_t j = 0; j < feature.size(); ++j) dot += feature[j] * prototypes.at(c, j);
    logits[c] = dot / tau;
    mx = std::max(mx, logits[c]);
  }
  double z = 0;
  for (double& v : logits) z += (v = std::exp(v - mx));
  for (double& v : logits) v /= z;
  return logits;
}

Var prototype_scores(Var features, Var prototypes) { return matmul(features, transpose(prototypes)); }

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

std::vector<std::pair<std::string, std::size_t*>> config_fields(EncoderConfig& c) {
  return {{"num_layers", &c.num_layers},         {"patch_count", &c.patch_count},
          {"input_dim", &c.input_dim},           {"token_dim", &c.token_dim},
          {"head_count", &c.head_count},         {"mlp_hidden", &c.mlp_hidden},
          {"head_hidden", &c.head_hidden},       {"proj_dim", &c.proj_dim},
          {"critic_hidden", &c.critic_hidden},   {"domain_tap_layer", &c.domain_tap_layer},
          {"semantic_tap_layer", &c.semantic_tap_layer}, {"k_s", &c.k_s},
          {"k_d", &c.k_d}};
}

}  // namespace

void save_encoder(const EncoderState& state, std::ostream& out) {
  out << "hilo-encoder v1\n";
  EncoderConfig cfg = state.config;
  for (const auto& [name, ptr] : config_fields(cfg)) out << "config " << name << ' ' << *ptr << '\n';
  out << "config detach_domain_tap " << (cfg.detach_domain_tap ? 1 : 0) << '\n';
  char buf[32];
  for (const auto& [name, t] : state.params.entries()) {
    out << "param " << name << ' ' << t->rank();
    for (auto d : t->shape()) out << ' ' << d;
    out << '\n';
    for (std::size_t i = 0; i < t->size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", (*t)[i]);
      out << (i ? " " : "") << buf;
    }
    out << '\n';
  }
}

EncoderState load_encoder(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "hilo-encoder v1") {
    throw std::runtime_error("load_encoder: missing 'hilo-encoder v1' header");
  }
  EncoderConfig cfg;
  std::map<std::string, Tensor> tensors;
  auto fields = config_fields(cfg);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind, name;
    ls >> kind >> name;
    if (kind == "config") {
      bool found = false;
      if (name == "detach_domain_tap") {
        int flag = -1;
        ls >> flag;
        if (flag != 0 && flag != 1) throw std::runtime_error("load_encoder: bad config line '" + line + "'");
        cfg.detach_domain_tap = flag == 1;
        continue;
      }
      for (auto& [fname, ptr] : fields) {
        if (fname == name) {
          ls >> *ptr;
          found = true;
        }
      }
      if (!found || ls.fail()) throw std::runtime_error("load_encoder: bad config line '" + line + "'");
    } else if (kind == "param") {
      std::size_t rank = 0;
      ls >> rank;
      Shape shape(rank);
      for (auto& d : shape) ls >> d;
      if (ls.fail()) throw std::runtime_error("load_encoder: bad param header '" + line + "'");
      Tensor t(shape);
      std::string values;
      if (!std::getline(in, values)) throw std::runtime_error("load_encoder: missing values for " + name);
      std::istringstream vs(values);
      for (auto& v : t.values()) {
        std::string tok;
        if (!(vs >> tok)) throw std::runtime_error("load_encoder: too few values for " + name);
        v = std::strtod(tok.c_str(), nullptr);
      }
      tensors[name] = std::move(t);
    } else {
      throw std::runtime_error("load_encoder: unknown record '" + kind + "'");
    }
  }
  cfg.validate();
  EncoderState st;
  st.config = cfg;
  st.params = shaped_like<Tensor>(cfg.num_layers);
  for (auto& [name, ptr] : st.params.entries()) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::runtime_error("load_encoder: missing parameter " + name);
    *ptr = std::move(it->second);
    tensors.erase(it);
  }
  if (!tensors.empty()) throw std::runtime_error("load_encoder: unexpected parameter " + tensors.begin()->first);
  return st;
}

void save_encoder(const EncoderState& state, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_encoder: cannot open " + path.string());
  save_encoder(state, out);
  if (!out) throw std::runtime_error("save_encoder: write failed for " + path.string());
}

EncoderState load_encoder(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_encoder: cannot open " + path.string());
  return load_encoder(in);
}

}  // namespace hilo
