#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "doctest.h"
#include "hilo/experiment.hpp"

using namespace hilo;

namespace {

ExperimentConfig small_experiment() {
  ExperimentConfig e;
  RunConfig& c = e.run;
  c.task.samples_per_class_per_domain = 4;
  c.encoder.num_layers = 2;
  c.encoder.token_dim = 8;
  c.encoder.head_count = 2;
  c.encoder.mlp_hidden = 8;
  c.encoder.head_hidden = 8;
  c.encoder.proj_dim = 4;
  c.encoder.critic_hidden = 4;
  c.encoder.semantic_tap_layer = 2;
  c.train.epochs = 2;
  c.train.batch_size = 16;
  c.train.eval_every = 1;
  c.curriculum.t_switch = 1;
  e.seeds = {0, 1};
  return e;
}

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("hilo_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("config json round trip") {
  ExperimentConfig e = small_experiment();
  e.run.task.corruptions = {{CorruptionKind::fog, 2}, {CorruptionKind::shot, 5}};
  e.run.loss.lambda = 0.25;
  e.run.train.mode = Mode::simgcd;
  e.run.train.ablation.no_mi = true;
  e.run.bounds.vc_dim = 12.5;
  const json j = to_json(e);
  const ExperimentConfig back = experiment_from_json(j);
  CHECK(to_json(back) == j);
  CHECK(back.seeds == e.seeds);
  CHECK(back.run.task.corruptions.size() == 2);
  CHECK(back.run.task.corruptions[1].kind == CorruptionKind::shot);
  CHECK(back.run.train.mode == Mode::simgcd);
  CHECK(back.run.train.ablation == e.run.train.ablation);
}

TEST_CASE("missing keys keep their defaults") {
  const ExperimentConfig e = experiment_from_json(json::object());
  CHECK(to_json(e) == to_json(ExperimentConfig{}));
  const RunConfig r = run_config_from_json(json{{"loss", {{"tau_u", 0.5}}}});
  CHECK(r.loss.tau_u == 0.5);
  CHECK(r.loss.tau_s == LossConfig{}.tau_s);
}

TEST_CASE("strict parsing rejects unknown keys and bad types") {
  CHECK_THROWS_AS(experiment_from_json(json{{"bogus", 1}}), std::invalid_argument);
  CHECK_THROWS_AS(run_config_from_json(json{{"task", {{"num_clases", 10}}}}), std::invalid_argument);
  CHECK_THROWS_AS(run_config_from_json(json{{"train", {{"epochs", "many"}}}}), std::invalid_argument);
  CHECK_THROWS_AS(run_config_from_json(json{{"train", {{"mode", "dino"}}}}), std::invalid_argument);
  CHECK_THROWS_AS(run_config_from_json(json{{"loss", 3}}), std::invalid_argument);
  CHECK_THROWS_AS(experiment_from_json(json{{"seeds", json::array()}}), std::invalid_argument);
  CHECK_THROWS_AS(run_config_from_json(json{{"task", {{"corruptions", {{{"kind", "rain"}, {"severity", 1}}}}}}}),
                  std::invalid_argument);
}

TEST_CASE("overrides") {
  json j = to_json(ExperimentConfig{});
  apply_override(j, "train.epochs=30");
  apply_override(j, "train.mode=simgcd");
  apply_override(j, "seeds=[4,5]");
  apply_override(j, "loss.lambda=0.5");
  CHECK(j["train"]["epochs"] == 30);
  CHECK(j["train"]["mode"] == "simgcd");
  const ExperimentConfig e = experiment_from_json(j);
  CHECK(e.run.train.epochs == 30);
  CHECK(e.run.train.mode == Mode::simgcd);
  CHECK(e.seeds == std::vector<std::uint64_t>{4, 5});
  CHECK(e.run.loss.lambda == 0.5);

  CHECK_THROWS_AS(apply_override(j, "no_equals"), std::invalid_argument);
  CHECK_THROWS_AS(apply_override(j, "=3"), std::invalid_argument);
  CHECK_THROWS_AS(apply_override(j, "train..epochs=3"), std::invalid_argument);
  apply_override(j, "train.nonsense=1");
  CHECK_THROWS_AS(experiment_from_json(j), std::invalid_argument);
}

TEST_CASE("load_experiment merges file and overrides") {
  const auto dir = scratch_dir("load");
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "cfg.json");
    out << R"({"train": {"epochs": 29, "batch_size": 32}, "seeds": [3]})";
  }
  const ExperimentConfig e = load_experiment(dir / "cfg.json", {"train.epochs=31"});
  CHECK(e.run.train.epochs == 31);
  CHECK(e.run.train.batch_size == 32);
  CHECK(e.seeds == std::vector<std::uint64_t>{3});
  CHECK(e.run.loss.lambda == LossConfig{}.lambda);

  {
    std::ofstream out(dir / "bad.json");
    out << "[1, 2]";
  }
  {
    std::ofstream out(dir / "broken.json");
    out << "{\"train\": ";
  }
  CHECK_THROWS_AS(load_experiment(dir / "bad.json", {}), std::invalid_argument);
  CHECK_THROWS_AS(load_experiment(dir / "broken.json", {}), std::invalid_argument);
  CHECK_THROWS_AS(load_experiment(dir / "absent.json", {}), std::runtime_error);
  CHECK(to_json(load_experiment({}, {})) == to_json(ExperimentConfig{}));
  std::filesystem::remove_all(dir);
}

TEST_CASE("variants") {
  const RunConfig base = small_experiment().run;
  for (const auto& v : variant_names()) CHECK_NOTHROW(apply_variant(base, v));
  CHECK_THROWS_AS(apply_variant(base, "hilo_plus"), std::invalid_argument);

  CHECK(apply_variant(base, "simgcd").train.mode == Mode::simgcd);
  const RunConfig h = apply_variant(base, "hilo");
  CHECK(h.train.mode == Mode::hilo);
  CHECK(h.train.ablation == Ablation{});
  CHECK(apply_variant(base, "deep_only").train.ablation.deep_only);
  CHECK(apply_variant(base, "shallow_only").train.ablation.shallow_only);
  CHECK(apply_variant(base, "no_mi").train.ablation.no_mi);
  CHECK(apply_variant(base, "no_curriculum").train.ablation.no_curriculum);
  CHECK(apply_variant(base, "no_patchmix").train.ablation.no_patchmix);

  const RunConfig pm = apply_variant(base, "patchmix_only");
  CHECK_FALSE(pm.train.ablation.no_patchmix);
  CHECK(pm.train.ablation.no_mi);
  CHECK(pm.train.ablation.no_curriculum);
  const RunConfig mi = apply_variant(base, "mi_only");
  CHECK_FALSE(mi.train.ablation.no_mi);
  CHECK(mi.train.ablation.no_patchmix);
  const RunConfig cu = apply_variant(base, "curriculum_only");
  CHECK_FALSE(cu.train.ablation.no_curriculum);
  CHECK(cu.train.ablation.no_mi);

  const auto t3 = expand_variants("table3");
  const auto comp = expand_variants("components");
  CHECK(std::find(t3.begin(), t3.end(), "simgcd") != t3.end());
  CHECK(std::find(t3.begin(), t3.end(), "hilo") != t3.end());
  CHECK(std::find(comp.begin(), comp.end(), "no_patchmix") != comp.end());
  CHECK(std::find(t3.begin(), t3.end(), "patchmix_only") != t3.end());
  CHECK(expand_variants("no_mi") == std::vector<std::string>{"no_mi"});
  CHECK_THROWS_AS(expand_variants("everything"), std::invalid_argument);
}

TEST_CASE("task hash") {
  TaskConfig t;
  const std::string h = task_hash(t);
  CHECK(h.size() == 16);
  CHECK(h.find_first_not_of("0123456789abcdef") == std::string::npos);
  CHECK(task_hash(t) == h);
  t.seed = 1;
  CHECK(task_hash(t) != h);
}

TEST_CASE("experiment outputs") {
  const ExperimentConfig e = small_experiment();
  const std::vector<std::string> variants{"simgcd", "hilo"};
  std::size_t calls = 0;
  const ExperimentResult r1 = run_experiment(e, variants, 1, [&](const std::string&, std::uint64_t, const EvalRow&) { ++calls; });
  const ExperimentResult r2 = run_experiment(e, variants, 3);
  CHECK(calls == 2 * 2 * 2);

  const std::string csv = metrics_csv(r1);
  CHECK(csv == metrics_csv(r2));
  std::istringstream lines(csv);
  std::string header, line;
  std::getline(lines, header);
  const auto cols = metrics_columns();
  std::string expect;
  for (std::size_t i = 0; i < cols.size(); ++i) expect += (i ? "," : "") + cols[i];
  CHECK(header == expect);
  std::size_t rows = 0;
  while (std::getline(lines, line)) {
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == static_cast<long>(cols.size() - 1));
  }
  CHECK(rows == 2 * 2 * 2);
  CHECK(csv.rfind("simgcd,0,1,", std::string::npos) != std::string::npos);

  const json rep = report_json(r1);
  CHECK(rep["task_hash"] == task_hash(e.run.task));
  for (const auto& v : variants) {
    const json& s = rep["variants"][v]["summary"];
    for (const auto& m : summary_metrics()) CHECK(s.contains(m));
    const double a0 = rep["variants"][v]["final"][0]["unseen_all"];
    const double a1 = rep["variants"][v]["final"][1]["unseen_all"];
    CHECK(s["unseen_all"]["mean"].get<double>() == doctest::Approx((a0 + a1) / 2));
  }

  const auto dir = scratch_dir("outputs");
  write_outputs(r1, dir);
  CHECK(slurp(dir / "metrics.csv") == csv);
  CHECK(json::parse(slurp(dir / "report.json")) == rep);
  CHECK_FALSE(std::filesystem::exists(dir / "metrics.csv.partial"));
  std::filesystem::remove_all(dir);

  const json cmp = compare_reports(rep, rep);
  for (const auto& m : summary_metrics()) CHECK(cmp["hilo"][m]["delta"].get<double>() == 0.0);

  json other = rep;
  other["task_hash"] = "0000000000000000";
  CHECK_THROWS_AS(compare_reports(rep, other), std::invalid_argument);
  json missing = rep;
  missing["variants"]["hilo"]["summary"].erase("e_u");
  CHECK_THROWS_AS(compare_reports(rep, missing), std::invalid_argument);
  CHECK_THROWS_AS(compare_reports(missing, rep), std::invalid_argument);
  json disjoint = rep;
  disjoint["variants"] = json{{"no_mi", rep["variants"]["hilo"]}};
  CHECK_THROWS_AS(compare_reports(rep, disjoint), std::invalid_argument);

  ExperimentConfig moved = e;
  moved.run.task.seed = 77;
  const json shifted = report_json(run_experiment(moved, {"simgcd"}, 1));
  CHECK_THROWS_AS(compare_reports(rep, shifted), std::invalid_argument);
}

TEST_CASE("corruption table") {
  TaskConfig t;
  t.samples_per_class_per_domain = 4;
  const auto rows = corruption_table(t, 40, 1);
  CHECK(rows.size() == corruption_kinds().size() * 5);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].mse > 0.0);
    if (rows[i].severity > 1) {
      CHECK(rows[i - 1].kind == rows[i].kind);
      CHECK(rows[i].mse > rows[i - 1].mse);
    }
  }
  CHECK_THROWS_AS(corruption_table(t, 0, 1), std::invalid_argument);
}
