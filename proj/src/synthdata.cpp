#include "hilo/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace hilo {

namespace {

struct KindName {
  CorruptionKind kind;
  const char* name;
};

constexpr std::array<KindName, 6> kKindNames{{{CorruptionKind::none, "none"},
                                              {CorruptionKind::gaussian, "gaussian"},
                                              {CorruptionKind::shot, "shot"},
                                              {CorruptionKind::impulse, "impulse"},
                                              {CorruptionKind::speckle, "speckle"},
                                              {CorruptionKind::fog, "fog"}}};

constexpr std::array<double, 5> kGaussianSigma{0.04, 0.06, 0.08, 0.09, 0.10};
constexpr std::array<double, 5> kShotPhotons{60, 25, 12, 5, 3};
constexpr std::array<double, 5> kImpulseFraction{0.03, 0.06, 0.09, 0.17, 0.27};
constexpr std::array<double, 5> kSpeckleSigma{0.15, 0.2, 0.35, 0.45, 0.6};
constexpr std::array<double, 5> kFogStrength{0.2, 0.35, 0.5, 0.65, 0.8};

std::size_t grid_side(std::size_t patches) {
  std::size_t s = 1;
  while (s * s < patches) ++s;
  return s;
}

}  // namespace

CorruptionKind corruption_from_string(const std::string& name) {
  for (const auto& k : kKindNames)
    if (name == k.name) return k.kind;
  throw std::invalid_argument("unknown corruption kind '" + name + "'");
}

std::string to_string(CorruptionKind kind) {
  for (const auto& k : kKindNames)
    if (kind == k.kind) return k.name;
  throw std::invalid_argument("unknown corruption kind");
}

std::vector<CorruptionKind> corruption_kinds() {
  return {CorruptionKind::gaussian, CorruptionKind::shot, CorruptionKind::impulse, CorruptionKind::speckle,
          CorruptionKind::fog};
}

std::string to_string(Split split) {
  switch (split) {
    case Split::labelled:
      return "labelled";
    case Split::unlabelled_seen:
      return "unlabelled_seen";
    case Split::unlabelled_unseen:
      return "unlabelled_unseen";
  }
  throw std::invalid_argument("unknown split");
}

Split split_from_string(const std::string& name) {
  if (name == "labelled") return Split::labelled;
  if (name == "unlabelled_seen") return Split::unlabelled_seen;
  if (name == "unlabelled_unseen") return Split::unlabelled_unseen;
  throw std::invalid_argument("unknown split '" + name + "'");
}

void TaskConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("TaskConfig: " + m); };
  if (num_classes < 2) fail("num_classes must be at least 2");
  if (num_old == 0 || num_old >= num_classes) fail("num_old must lie in [1, num_classes)");
  if (num_domains < 2) fail("num_domains must be at least 2");
  if (samples_per_class_per_domain == 0) fail("samples_per_class_per_domain must be positive");
  if (patch_count == 0 || input_dim == 0) fail("patch_count and input_dim must be positive");
  if (!(class_separation >= 0) || !(position_scale >= 0) || !(jitter >= 0) || !(style_strength >= 0) ||
      !(corruption_scale >= 0)) {
    fail("scales must be non-negative");
  }
  if (!(labelled_fraction > 0 && labelled_fraction < 1)) fail("labelled_fraction must lie in (0, 1)");
  for (const auto& c : corruptions) {
    if (c.kind != CorruptionKind::none && (c.severity < 1 || c.severity > 5)) fail("severity must lie in 1..5");
  }
}

std::size_t Dataset::labelled_count() const {
  return static_cast<std::size_t>(std::count_if(samples.begin(), samples.end(), [](const Sample& s) { return s.labelled; }));
}

Tensor Dataset::patches(std::span<const std::size_t> indices) const {
  const std::size_t width = patch_count * input_dim;
  Tensor out({indices.size(), patch_count, input_dim});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto& p = samples.at(indices[r]).patches;
    std::copy(p.begin(), p.end(), out.data() + r * width);
  }
  return out;
}

Tensor Dataset::all_patches() const {
  std::vector<std::size_t> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return patches(idx);
}

double severity_parameter(CorruptionKind kind, int severity) {
  if (severity < 1 || severity > 5) throw std::invalid_argument("severity must lie in 1..5");
  const std::size_t s = static_cast<std::size_t>(severity - 1);
  switch (kind) {
    case CorruptionKind::gaussian:
      return kGaussianSigma[s];
    case CorruptionKind::shot:
      return kShotPhotons[s];
    case CorruptionKind::impulse:
      return kImpulseFraction[s];
    case CorruptionKind::speckle:
      return kSpeckleSigma[s];
    case CorruptionKind::fog:
      return kFogStrength[s];
    case CorruptionKind::none:
      break;
  }
  throw std::invalid_argument("severity_parameter: corruption kind has no schedule");
}

std::vector<double> plasma_fractal(std::size_t side, std::mt19937_64& rng, double roughness) {
  if (side == 0) throw std::invalid_argument("plasma_fractal: side must be positive");
  std::size_t n = 1;
  while (n + 1 < side) n *= 2;
  const std::size_t size = n + 1;
  std::vector<double> g(size * size, 0.0);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  auto at = [&](std::size_t r, std::size_t c) -> double& { return g[r * size + c]; };
  at(0, 0) = u(rng);
  at(0, n) = u(rng);
  at(n, 0) = u(rng);
  at(n, n) = u(rng);
  double amp = 1.0;
  for (std::size_t step = n; step > 1; step /= 2) {
    const std::size_t half = step / 2;
    for (std::size_t r = half; r < size; r += step) {
      for (std::size_t c = half; c < size; c += step) {
        const double avg = (at(r - half, c - half) + at(r - half, c + half) + at(r + half, c - half) +
                            at(r + half, c + half)) / 4.0;
        at(r, c) = avg + amp * u(rng);
      }
    }
    for (std::size_t r = 0; r < size; r += half) {
      for (std::size_t c = (r / half) % 2 == 0 ? half : 0; c < size; c += step) {
        double total = 0;
        int count = 0;
        if (r >= half) total += at(r - half, c), ++count;
        if (r + half < size) total += at(r + half, c), ++count;
        if (c >= half) total += at(r, c - half), ++count;
        if (c + half < size) total += at(r, c + half), ++count;
        at(r, c) = total / count + amp * u(rng);
      }
    }
    amp *= roughness;
  }
  std::vector<double> out(side * side);
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c) out[r * side + c] = at(r, c);
  const auto [lo, hi] = std::minmax_element(out.begin(), out.end());
  const double a = *lo, range = *hi - *lo;
  for (auto& v : out) v = range > 0 ? (v - a) / range : 0.0;
  return out;
}

void corrupt(std::span<double> x, std::size_t patch_count, CorruptionKind kind, int severity, std::mt19937_64& rng,
             double scale) {
  if (kind == CorruptionKind::none) return;
  if (patch_count == 0 || x.size() % patch_count != 0) {
    throw std::invalid_argument("corrupt: values do not split into " + std::to_string(patch_count) + " patches");
  }
  const double param = severity_parameter(kind, severity);
  std::normal_distribution<double> normal(0.0, 1.0);
  if (x.empty()) return;
  const auto [lo_it, hi_it] = std::minmax_element(x.begin(), x.end());
  const double lo = *lo_it, hi = *hi_it;
  switch (kind) {
    case CorruptionKind::gaussian:
      for (auto& v : x) v += param * scale * normal(rng);
      break;
    case CorruptionKind::shot: {
      const double range = hi - lo;
      if (!(range > 0)) break;
      for (auto& v : x) {
        std::poisson_distribution<long> pois((v - lo) / range * param);
        v = lo + static_cast<double>(pois(rng)) / param * range;
      }
      break;
    }
    case CorruptionKind::impulse: {
      std::bernoulli_distribution hit(param), salt(0.5);
      for (auto& v : x) {
        if (hit(rng)) v = salt(rng) ? hi : lo;
      }
      break;
    }
    case CorruptionKind::speckle:
      for (auto& v : x) v *= 1.0 + param * normal(rng);
      break;
    case CorruptionKind::fog: {
      const std::size_t side = grid_side(patch_count);
      const std::vector<double> field = plasma_fractal(side, rng);
      const std::size_t width = x.size() / patch_count;
      for (std::size_t j = 0; j < patch_count; ++j)
        for (std::size_t c = 0; c < width; ++c) x[j * width + c] += param * scale * field[j];
      break;
    }
    case CorruptionKind::none:
      break;
  }
}

Dataset generate(const TaskConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t width = cfg.patch_count * cfg.input_dim;

  std::vector<std::vector<double>> protos(cfg.num_classes, std::vector<double>(width));
  for (auto& p : protos) {
    double norm = 0;
    for (auto& v : p) {
      v = normal(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : p) v *= cfg.class_separation / norm;
  }
  std::vector<double> offset(width);
  for (auto& v : offset) v = cfg.position_scale * normal(rng);
  std::vector<std::vector<double>> gain(cfg.num_domains, std::vector<double>(cfg.input_dim, 1.0));
  std::vector<std::vector<double>> bias(cfg.num_domains, std::vector<double>(cfg.input_dim, 0.0));
  for (std::size_t d = 1; d < cfg.num_domains; ++d) {
    for (std::size_t c = 0; c < cfg.input_dim; ++c) {
      gain[d][c] = 1.0 + cfg.style_strength * normal(rng);
      bias[d][c] = cfg.style_strength * normal(rng);
    }
  }

  Dataset data;
  data.patch_count = cfg.patch_count;
  data.input_dim = cfg.input_dim;
  data.num_classes = cfg.num_classes;
  data.num_old = cfg.num_old;
  data.num_domains = cfg.num_domains;
  data.samples.reserve(cfg.num_domains * cfg.num_classes * cfg.samples_per_class_per_domain);
  for (std::size_t d = 0; d < cfg.num_domains; ++d) {
    Corruption corr;
    if (d > 0 && !cfg.corruptions.empty()) corr = cfg.corruptions[std::min(d - 1, cfg.corruptions.size() - 1)];
    for (std::size_t k = 0; k < cfg.num_classes; ++k) {
      for (std::size_t s = 0; s < cfg.samples_per_class_per_domain; ++s) {
        Sample smp;
        smp.class_id = k;
        smp.domain_id = d;
        smp.split = d == 0 ? Split::unlabelled_seen : Split::unlabelled_unseen;
        smp.patches.resize(width);
        for (std::size_t i = 0; i < width; ++i) {
          const double v = protos[k][i] + offset[i] + cfg.jitter * normal(rng);
          const std::size_t c = i % cfg.input_dim;
          smp.patches[i] = gain[d][c] * v + bias[d][c];
        }
        corrupt(smp.patches, cfg.patch_count, corr.kind, corr.severity, rng, cfg.corruption_scale);
        data.samples.push_back(std::move(smp));
      }
    }
  }

  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const Sample& s = data.samples[i];
    if (s.domain_id == 0 && s.class_id < cfg.num_old) pool.push_back(i);
  }
  std::shuffle(pool.begin(), pool.end(), rng);
  const auto count = static_cast<std::size_t>(
      std::floor(cfg.labelled_fraction * static_cast<double>(cfg.num_old * cfg.samples_per_class_per_domain)));
  for (std::size_t r = 0; r < count && r < pool.size(); ++r) {
    data.samples[pool[r]].labelled = true;
    data.samples[pool[r]].split = Split::labelled;
  }
  return data;
}

void save_dataset(const Dataset& data, std::ostream& out) {
  out << "# hilo-dataset v1 patch_count " << data.patch_count << " input_dim " << data.input_dim << " num_classes "
      << data.num_classes << " num_old " << data.num_old << " num_domains " << data.num_domains << "\n";
  out << "# fields: split class_id domain_id labelled values[patch_count*input_dim]\n";
  char buf[32];
  for (const auto& s : data.samples) {
    out << to_string(s.split) << ' ' << s.class_id << ' ' << s.domain_id << ' ' << (s.labelled ? 1 : 0);
    for (double v : s.patches) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << ' ' << buf;
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("save_dataset: write failed");
}

Dataset load_dataset(std::istream& in) {
  Dataset data;
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("load_dataset: empty input");
  {
    std::istringstream hs(line);
    std::string hash, magic, version, key;
    hs >> hash >> magic >> version;
    if (hash != "#" || magic != "hilo-dataset" || version != "v1") throw std::runtime_error("load_dataset: bad header");
    std::size_t value;
    while (hs >> key >> value) {
      if (key == "patch_count") data.patch_count = value;
      else if (key == "input_dim") data.input_dim = value;
      else if (key == "num_classes") data.num_classes = value;
      else if (key == "num_old") data.num_old = value;
      else if (key == "num_domains") data.num_domains = value;
      else throw std::runtime_error("load_dataset: unknown header key '" + key + "'");
    }
  }
  const std::size_t width = data.patch_count * data.input_dim;
  if (width == 0) throw std::runtime_error("load_dataset: header lacks patch geometry");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    Sample s;
    std::string split;
    int labelled = -1;
    ls >> split >> s.class_id >> s.domain_id >> labelled;
    if (!ls || (labelled != 0 && labelled != 1)) {
      throw std::runtime_error("load_dataset: malformed record on line " + std::to_string(lineno));
    }
    s.split = split_from_string(split);
    s.labelled = labelled == 1;
    s.patches.resize(width);
    for (auto& v : s.patches) {
      std::string tok;
      if (!(ls >> tok)) throw std::runtime_error("load_dataset: short record on line " + std::to_string(lineno));
      v = std::strtod(tok.c_str(), nullptr);
    }
    std::string extra;
    if (ls >> extra) throw std::runtime_error("load_dataset: trailing values on line " + std::to_string(lineno));
    data.samples.push_back(std::move(s));
  }
  return data;
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  save_dataset(data, out);
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return load_dataset(in);
}

}  // namespace hilo
