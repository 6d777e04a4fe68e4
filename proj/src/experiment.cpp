#include "hilo/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace hilo {

namespace {

// Reads keys out of one JSON object and rejects whatever is left over.
class Strict {
 public:
  Strict(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw std::invalid_argument(where_ + ": expected an object");
  }
  template <class T>
  void take(const char* key, T& field) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      field = it->template get<T>();
    } catch (const json::exception& e) {
      throw std::invalid_argument(where_ + "." + key + ": " + e.what());
    }
  }
  const json* section(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw std::invalid_argument(where_ + ": unknown key '" + it.key() + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

json corruption_json(const Corruption& c) { return {{"kind", to_string(c.kind)}, {"severity", c.severity}}; }

}  // namespace

json to_json(const RunConfig& c) {
  json corr = json::array();
  for (const auto& k : c.task.corruptions) corr.push_back(corruption_json(k));
  const auto& t = c.task;
  const auto& e = c.encoder;
  const auto& l = c.loss;
  const auto& cu = c.curriculum;
  const auto& tr = c.train;
  return {
      {"task",
       {{"num_classes", t.num_classes},
        {"num_old", t.num_old},
        {"num_domains", t.num_domains},
        {"samples_per_class_per_domain", t.samples_per_class_per_domain},
        {"patch_count", t.patch_count},
        {"input_dim", t.input_dim},
        {"class_separation", t.class_separation},
        {"position_scale", t.position_scale},
        {"jitter", t.jitter},
        {"style_strength", t.style_strength},
        {"corruption_scale", t.corruption_scale},
        {"corruptions", corr},
        {"labelled_fraction", t.labelled_fraction},
        {"seed", t.seed}}},
      {"encoder",
       {{"num_layers", e.num_layers},
        {"token_dim", e.token_dim},
        {"head_count", e.head_count},
        {"mlp_hidden", e.mlp_hidden},
        {"head_hidden", e.head_hidden},
        {"proj_dim", e.proj_dim},
        {"critic_hidden", e.critic_hidden},
        {"domain_tap_layer", e.domain_tap_layer},
        {"semantic_tap_layer", e.semantic_tap_layer},
        {"detach_domain_tap", e.detach_domain_tap},
        {"k_s", e.k_s},
        {"k_d", e.k_d}}},
      {"loss",
       {{"tau_u", l.tau_u},
        {"tau_c", l.tau_c},
        {"tau_s", l.tau_s},
        {"tau_t", l.tau_t},
        {"lambda", l.lambda},
        {"entropy_weight", l.entropy_weight},
        {"hilo_entropy_weight", l.hilo_entropy_weight},
        {"domain_weight", l.domain_weight}}},
      {"curriculum",
       {{"t_switch", cu.t_switch},
        {"r0", cu.r0},
        {"r_prime", cu.r_prime},
        {"k_partition", cu.k_partition},
        {"r0_from_counts", cu.r0_from_counts}}},
      {"train",
       {{"mode", to_string(tr.mode)},
        {"ablation",
         {{"no_mi", tr.ablation.no_mi},
          {"no_curriculum", tr.ablation.no_curriculum},
          {"no_patchmix", tr.ablation.no_patchmix},
          {"deep_only", tr.ablation.deep_only},
          {"shallow_only", tr.ablation.shallow_only}}},
        {"epochs", tr.epochs},
        {"batch_size", tr.batch_size},
        {"lr0", tr.lr0},
        {"momentum", tr.momentum},
        {"weight_decay", tr.weight_decay},
        {"eval_every", tr.eval_every},
        {"aug_jitter", tr.aug_jitter},
        {"aug_mask", tr.aug_mask},
        {"beta_a", tr.beta.a},
        {"beta_b", tr.beta.b},
        {"mi_block", tr.mi_block}}},
      {"bounds", {{"vc_dim", c.bounds.vc_dim}, {"delta", c.bounds.delta}, {"mi_clamp", c.bounds.mi_clamp}}},
  };
}

json to_json(const ExperimentConfig& cfg) {
  json j = to_json(cfg.run);
  j["seeds"] = cfg.seeds;
  return j;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  Strict root(j, "config");
  if (const json* s = root.section("task")) {
    Strict r(*s, "task");
    auto& t = c.task;
    r.take("num_classes", t.num_classes);
    r.take("num_old", t.num_old);
    r.take("num_domains", t.num_domains);
    r.take("samples_per_class_per_domain", t.samples_per_class_per_domain);
    r.take("patch_count", t.patch_count);
    r.take("input_dim", t.input_dim);
    r.take("class_separation", t.class_separation);
    r.take("position_scale", t.position_scale);
    r.take("jitter", t.jitter);
    r.take("style_strength", t.style_strength);
    r.take("corruption_scale", t.corruption_scale);
    r.take("labelled_fraction", t.labelled_fraction);
    r.take("seed", t.seed);
    if (const json* cs = r.section("corruptions")) {
      if (!cs->is_array()) throw std::invalid_argument("task.corruptions: expected an array");
      t.corruptions.clear();
      for (const auto& item : *cs) {
        Strict ci(item, "task.corruptions[]");
        std::string kind = "none";
        Corruption k;
        ci.take("kind", kind);
        ci.take("severity", k.severity);
        ci.finish();
        k.kind = corruption_from_string(kind);
        t.corruptions.push_back(k);
      }
    }
    r.finish();
  }
  if (const json* s = root.section("encoder")) {
    Strict r(*s, "encoder");
    auto& e = c.encoder;
    r.take("num_layers", e.num_layers);
    r.take("token_dim", e.token_dim);
    r.take("head_count", e.head_count);
    r.take("mlp_hidden", e.mlp_hidden);
    r.take("head_hidden", e.head_hidden);
    r.take("proj_dim", e.proj_dim);
    r.take("critic_hidden", e.critic_hidden);
    r.take("domain_tap_layer", e.domain_tap_layer);
    r.take("semantic_tap_layer", e.semantic_tap_layer);
    r.take("detach_domain_tap", e.detach_domain_tap);
    r.take("k_s", e.k_s);
    r.take("k_d", e.k_d);
    r.finish();
  }
  if (const json* s = root.section("loss")) {
    Strict r(*s, "loss");
    auto& l = c.loss;
    r.take("tau_u", l.tau_u);
    r.take("tau_c", l.tau_c);
    r.take("tau_s", l.tau_s);
    r.take("tau_t", l.tau_t);
    r.take("lambda", l.lambda);
    r.take("entropy_weight", l.entropy_weight);
    r.take("hilo_entropy_weight", l.hilo_entropy_weight);
    r.take("domain_weight", l.domain_weight);
    r.finish();
  }
  if (const json* s = root.section("curriculum")) {
    Strict r(*s, "curriculum");
    auto& cu = c.curriculum;
    r.take("t_switch", cu.t_switch);
    r.take("r0", cu.r0);
    r.take("r_prime", cu.r_prime);
    r.take("k_partition", cu.k_partition);
    r.take("r0_from_counts", cu.r0_from_counts);
    r.finish();
  }
  if (const json* s = root.section("train")) {
    Strict r(*s, "train");
    auto& tr = c.train;
    std::string mode = to_string(tr.mode);
    r.take("mode", mode);
    tr.mode = mode_from_string(mode);
    if (const json* a = r.section("ablation")) {
      Strict ar(*a, "train.ablation");
      ar.take("no_mi", tr.ablation.no_mi);
      ar.take("no_curriculum", tr.ablation.no_curriculum);
      ar.take("no_patchmix", tr.ablation.no_patchmix);
      ar.take("deep_only", tr.ablation.deep_only);
      ar.take("shallow_only", tr.ablation.shallow_only);
      ar.finish();
    }
    r.take("epochs", tr.epochs);
    r.take("batch_size", tr.batch_size);
    r.take("lr0", tr.lr0);
    r.take("momentum", tr.momentum);
    r.take("weight_decay", tr.weight_decay);
    r.take("eval_every", tr.eval_every);
    r.take("aug_jitter", tr.aug_jitter);
    r.take("aug_mask", tr.aug_mask);
    r.take("beta_a", tr.beta.a);
    r.take("beta_b", tr.beta.b);
    r.take("mi_block", tr.mi_block);
    r.finish();
  }
  if (const json* s = root.section("bounds")) {
    Strict r(*s, "bounds");
    r.take("vc_dim", c.bounds.vc_dim);
    r.take("delta", c.bounds.delta);
    r.take("mi_clamp", c.bounds.mi_clamp);
    r.finish();
  }
  root.section("seeds");
  root.finish();
  c.validate();
  return c;
}

ExperimentConfig experiment_from_json(const json& j) {
  ExperimentConfig cfg;
  cfg.run = run_config_from_json(j);
  if (auto it = j.find("seeds"); it != j.end()) {
    if (!it->is_array() || it->empty()) throw std::invalid_argument("seeds: expected a non-empty array");
    cfg.seeds = it->get<std::vector<std::uint64_t>>();
  }
  return cfg;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw std::invalid_argument("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw std::invalid_argument("override '" + assignment + "' has an empty key");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

ExperimentConfig load_experiment(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  json j = to_json(ExperimentConfig{});
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path.string());
    json file;
    try {
      file = json::parse(in);
    } catch (const json::parse_error& e) {
      throw std::invalid_argument("config " + path.string() + ": " + e.what());
    }
    if (!file.is_object()) throw std::invalid_argument("config " + path.string() + ": expected an object");
    j.merge_patch(file);
  }
  for (const auto& o : overrides) apply_override(j, o);
  return experiment_from_json(j);
}

std::vector<std::string> variant_names() {
  return {"simgcd",       "hilo",     "patchmix_only", "mi_only", "curriculum_only",
          "deep_only",    "shallow_only", "no_mi",     "no_curriculum", "no_patchmix"};
}

RunConfig apply_variant(RunConfig c, const std::string& v) {
  auto& tr = c.train;
  auto& a = tr.ablation;
  tr.mode = Mode::hilo;
  if (v == "simgcd") {
    tr.mode = Mode::simgcd;
  } else if (v == "hilo") {
  } else if (v == "patchmix_only") {
    a.no_mi = a.no_curriculum = true;
    c.loss.domain_weight = 0.0;
  } else if (v == "mi_only") {
    a.no_patchmix = a.no_curriculum = true;
  } else if (v == "curriculum_only") {
    a.no_mi = a.no_patchmix = true;
    c.loss.domain_weight = 0.0;
  } else if (v == "deep_only") {
    a.deep_only = true;
  } else if (v == "shallow_only") {
    a.shallow_only = true;
  } else if (v == "no_mi") {
    a.no_mi = true;
  } else if (v == "no_curriculum") {
    a.no_curriculum = true;
  } else if (v == "no_patchmix") {
    a.no_patchmix = true;
  } else {
    throw std::invalid_argument("unknown variant '" + v + "'");
  }
  c.validate();
  return c;
}

std::vector<std::string> expand_variants(const std::string& name) {
  if (name == "table3") {
    return {"simgcd", "patchmix_only", "mi_only", "curriculum_only", "hilo", "deep_only", "shallow_only"};
  }
  if (name == "components") return {"hilo", "no_mi", "no_curriculum", "no_patchmix"};
  const auto all = variant_names();
  if (std::find(all.begin(), all.end(), name) == all.end()) {
    throw std::invalid_argument("unknown variant or ablation set '" + name + "'");
  }
  return {name};
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::vector<std::string>& variants,
                                std::size_t jobs, const Progress& progress) {
  if (variants.empty()) throw std::invalid_argument("run_experiment: no variants requested");
  if (cfg.seeds.empty()) throw std::invalid_argument("run_experiment: no seeds");
  std::vector<RunConfig> configs;
  for (const auto& v : variants) configs.push_back(apply_variant(cfg.run, v));
  const Dataset data = generate(cfg.run.task);

  ExperimentResult result;
  result.config = cfg;
  for (const auto& v : variants) result.variants.push_back({v, std::vector<RunResult>(cfg.seeds.size())});

  const std::size_t total = variants.size() * cfg.seeds.size();
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr failure;
  auto worker = [&] {
    while (true) {
      const std::size_t job = next.fetch_add(1);
      if (job >= total) return;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (failure) return;
      }
      const std::size_t vi = job / cfg.seeds.size(), si = job % cfg.seeds.size();
      try {
        auto cb = [&](const EvalRow& row) {
          if (!progress) return;
          std::lock_guard<std::mutex> lock(mu);
          progress(variants[vi], cfg.seeds[si], row);
        };
        result.variants[vi].runs[si] = train_run(data, configs[vi], cfg.seeds[si], cb);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(jobs, 1, total);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return result;
}

namespace {

using Field = std::function<double(const EvalRow&)>;

const std::vector<std::pair<std::string, Field>>& metric_fields() {
  static const std::vector<std::pair<std::string, Field>> fields = {
      {"lr", [](const EvalRow& r) { return r.lr; }},
      {"loss_total", [](const EvalRow& r) { return r.loss.total; }},
      {"loss_rep", [](const EvalRow& r) { return r.loss.rep; }},
      {"loss_cls", [](const EvalRow& r) { return r.loss.cls; }},
      {"loss_s", [](const EvalRow& r) { return r.loss.l_s; }},
      {"loss_d", [](const EvalRow& r) { return r.loss.l_d; }},
      {"loss_m", [](const EvalRow& r) { return r.loss.l_m; }},
      {"delta_s", [](const EvalRow& r) { return r.loss.delta_s; }},
      {"delta_d", [](const EvalRow& r) { return r.loss.delta_d; }},
      {"seen_all", [](const EvalRow& r) { return r.eval.seen.acc_all; }},
      {"seen_old", [](const EvalRow& r) { return r.eval.seen.acc_old; }},
      {"seen_new", [](const EvalRow& r) { return r.eval.seen.acc_new; }},
      {"unseen_all", [](const EvalRow& r) { return r.eval.unseen.acc_all; }},
      {"unseen_old", [](const EvalRow& r) { return r.eval.unseen.acc_old; }},
      {"unseen_new", [](const EvalRow& r) { return r.eval.unseen.acc_new; }},
      {"d_hat", [](const EvalRow& r) { return r.eval.bounds.d_hat; }},
      {"mi_estimate", [](const EvalRow& r) { return r.eval.mi_estimate; }},
      {"e_l", [](const EvalRow& r) { return r.eval.bounds.e_l; }},
      {"e_u", [](const EvalRow& r) { return r.eval.bounds.e_u; }},
      {"thm1_rhs", [](const EvalRow& r) { return r.eval.bounds.thm1_rhs; }},
      {"thm2_rhs", [](const EvalRow& r) { return r.eval.bounds.thm2_rhs; }},
      {"thm1_slack", [](const EvalRow& r) { return r.eval.bounds.thm1_slack; }},
      {"thm2_slack", [](const EvalRow& r) { return r.eval.bounds.thm2_slack; }},
  };
  return fields;
}

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::vector<std::string> metrics_columns() {
  std::vector<std::string> cols{"variant", "seed", "epoch"};
  for (const auto& [name, f] : metric_fields()) cols.push_back(name);
  return cols;
}

std::string metrics_csv(const ExperimentResult& result) {
  std::ostringstream out;
  const auto cols = metrics_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  for (const auto& v : result.variants) {
    for (const auto& run : v.runs) {
      for (const auto& row : run.rows) {
        out << v.variant << ',' << run.seed << ',' << row.epoch;
        for (const auto& [name, f] : metric_fields()) out << ',' << fixed6(f(row));
        out << '\n';
      }
    }
  }
  return out.str();
}

std::string task_hash(const TaskConfig& task) {
  RunConfig rc;
  rc.task = task;
  const std::string text = to_json(rc)["task"].dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<std::string> summary_metrics() {
  return {"seen_all", "seen_old", "seen_new", "unseen_all", "unseen_old", "unseen_new", "d_hat",
          "mi_estimate", "e_l", "e_u", "thm1_rhs", "thm2_rhs", "thm1_slack", "thm2_slack", "loss_total"};
}

json report_json(const ExperimentResult& result) {
  json rep;
  rep["config"] = to_json(result.config);
  rep["task_hash"] = task_hash(result.config.run.task);
  rep["columns"] = metrics_columns();
  json variants = json::object();
  const auto names = summary_metrics();
  for (const auto& v : result.variants) {
    json summary = json::object();
    json finals = json::array();
    for (const auto& name : names) {
      const auto it = std::find_if(metric_fields().begin(), metric_fields().end(),
                                   [&](const auto& p) { return p.first == name; });
      std::vector<double> xs;
      for (const auto& run : v.runs) xs.push_back(it->second(run.rows.back()));
      double mean = 0;
      for (double x : xs) mean += x;
      mean /= static_cast<double>(xs.size());
      double var = 0;
      for (double x : xs) var += (x - mean) * (x - mean);
      const double sd = xs.size() > 1 ? std::sqrt(var / static_cast<double>(xs.size() - 1)) : 0.0;
      summary[name] = {{"mean", mean}, {"std", sd}};
    }
    for (const auto& run : v.runs) {
      json f = {{"seed", run.seed}, {"epoch", run.rows.back().epoch}};
      for (const auto& name : names) {
        const auto it = std::find_if(metric_fields().begin(), metric_fields().end(),
                                     [&](const auto& p) { return p.first == name; });
        f[name] = it->second(run.rows.back());
      }
      f["bound_vacuous"] = run.rows.back().eval.bounds.vacuous;
      finals.push_back(f);
    }
    variants[v.variant] = {{"summary", summary}, {"final", finals}};
  }
  rep["variants"] = variants;
  return rep;
}

void write_outputs(const ExperimentResult& result, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::vector<fs::path> written;
  try {
    fs::create_directories(dir);
    auto put = [&](const fs::path& name, const std::string& text) {
      const fs::path target = dir / name;
      const fs::path tmp = dir / (name.string() + ".partial");
      {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        written.push_back(tmp);
        out << text;
        out.flush();
        if (!out) throw std::runtime_error("write failed for " + tmp.string());
      }
      fs::rename(tmp, target);
      written.back() = target;
    };
    put("metrics.csv", metrics_csv(result));
    put("report.json", report_json(result).dump(2) + "\n");
  } catch (...) {
    std::error_code ec;
    for (const auto& p : written) fs::remove(p, ec);
    throw;
  }
}

json compare_reports(const json& a, const json& b) {
  if (!a.contains("task_hash") || !b.contains("task_hash")) throw std::invalid_argument("compare: report lacks task_hash");
  if (a["task_hash"] != b["task_hash"]) {
    throw std::invalid_argument("compare: reports describe different tasks (" + a["task_hash"].get<std::string>() +
                                " vs " + b["task_hash"].get<std::string>() + ")");
  }
  json out = json::object();
  const json& va = a.at("variants");
  const json& vb = b.at("variants");
  for (auto it = va.begin(); it != va.end(); ++it) {
    if (!vb.contains(it.key())) continue;
    const json& sa = it.value().at("summary");
    const json& sb = vb.at(it.key()).at("summary");
    json rows = json::object();
    for (auto m = sa.begin(); m != sa.end(); ++m) {
      if (!sb.contains(m.key())) throw std::invalid_argument("compare: metric '" + m.key() + "' missing from second report");
      const double x = m.value().at("mean").get<double>();
      const double y = sb.at(m.key()).at("mean").get<double>();
      rows[m.key()] = {{"a", x}, {"b", y}, {"delta", y - x}};
    }
    for (auto m = sb.begin(); m != sb.end(); ++m) {
      if (!sa.contains(m.key())) throw std::invalid_argument("compare: metric '" + m.key() + "' missing from first report");
    }
    out[it.key()] = rows;
  }
  if (out.empty()) throw std::invalid_argument("compare: reports share no variant");
  return out;
}

std::vector<CorruptionRow> corruption_table(const TaskConfig& task, std::size_t samples, std::uint64_t seed) {
  TaskConfig clean_task = task;
  clean_task.corruptions = {{CorruptionKind::none, 1}};
  const Dataset data = generate(clean_task);
  if (samples == 0) throw std::invalid_argument("corruption_table: samples must be positive");
  std::vector<CorruptionRow> rows;
  for (CorruptionKind kind : corruption_kinds()) {
    for (int sev = 1; sev <= 5; ++sev) {
      std::mt19937_64 rng(seed);
      double total = 0;
      std::size_t count = 0;
      for (std::size_t i = 0; i < samples; ++i) {
        const auto& src = data.samples[i % data.samples.size()].patches;
        std::vector<double> x = src;
        corrupt(x, data.patch_count, kind, sev, rng, task.corruption_scale);
        for (std::size_t j = 0; j < x.size(); ++j) {
          const double dlt = x[j] - src[j];
          total += dlt * dlt;
        }
        count += x.size();
      }
      rows.push_back({kind, sev, total / static_cast<double>(count)});
    }
  }
  return rows;
}

}  // namespace hilo
