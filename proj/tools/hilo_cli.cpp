// Command-line front end for training runs, report comparison, dataset
// export and corruption benchmarks.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "hilo/experiment.hpp"

namespace fs = std::filesystem;

namespace {

fs::path output_root() {
  if (const char* env = std::getenv("HILO_OUT_ROOT"); env && *env) return env;
  return "runs";
}

hilo::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  return hilo::json::parse(in);
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.empty() || p == "-") {
    std::cout << text;
    return;
  }
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hilo: category discovery under domain shift on synthetic patch data"};
  app.require_subcommand(1);

  std::string config_path, mode = "hilo", ablation, out;
  std::vector<std::string> sets;
  std::size_t seed_count = 0, jobs = 1;
  bool quiet = false;
  auto* run = app.add_subcommand("run", "train one or more variants over several seeds");
  run->add_option("--config", config_path, "JSON experiment config");
  run->add_option("--mode", mode, "simgcd, hilo, or any variant name");
  run->add_option("--ablation", ablation, "variant set: table3, components, or a variant name");
  run->add_option("--seeds", seed_count, "use seeds 0..N-1 instead of the configured list");
  run->add_option("--jobs", jobs, "parallel runs")->check(CLI::PositiveNumber);
  run->add_option("--out", out, "output directory (default $HILO_OUT_ROOT/<name>)");
  run->add_option("--set", sets, "dotted-path override key=value")->take_all();
  run->add_flag("--quiet", quiet, "suppress per-evaluation progress");

  std::string report_a, report_b, compare_out;
  auto* cmp = app.add_subcommand("compare", "per-metric deltas between two reports (b - a)");
  cmp->add_option("a", report_a, "first report.json")->required();
  cmp->add_option("b", report_b, "second report.json")->required();
  cmp->add_option("--out", compare_out, "write the delta table here instead of stdout");

  std::string data_config, data_out;
  std::vector<std::string> data_sets;
  auto* gen = app.add_subcommand("gen-data", "export the configured synthetic dataset");
  gen->add_option("--config", data_config, "JSON experiment config");
  gen->add_option("--set", data_sets, "dotted-path override key=value")->take_all();
  gen->add_option("--out", data_out, "dataset file")->required();

  std::string bench_config, bench_out;
  std::vector<std::string> bench_sets;
  std::size_t bench_samples = 1000;
  std::uint64_t bench_seed = 0;
  auto* bench = app.add_subcommand("bench-corrupt", "mean squared distortion per corruption kind and severity");
  bench->add_option("--config", bench_config, "JSON experiment config");
  bench->add_option("--set", bench_sets, "dotted-path override key=value")->take_all();
  bench->add_option("--samples", bench_samples, "samples per cell")->check(CLI::PositiveNumber);
  bench->add_option("--seed", bench_seed, "noise seed");
  bench->add_option("--out", bench_out, "CSV file (default stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      hilo::ExperimentConfig cfg = hilo::load_experiment(config_path, sets);
      if (seed_count > 0) {
        cfg.seeds.clear();
        for (std::size_t s = 0; s < seed_count; ++s) cfg.seeds.push_back(s);
      }
      const std::string set_name = ablation.empty() ? mode : ablation;
      const auto variants = hilo::expand_variants(set_name);
      const fs::path dir = out.empty() ? output_root() / set_name : fs::path(out);
      auto progress = [quiet](const std::string& v, std::uint64_t seed, const hilo::EvalRow& row) {
        if (quiet) return;
        std::fprintf(stderr, "%s seed %llu epoch %zu: loss %.4f seen %.3f unseen %.3f\n", v.c_str(),
                     static_cast<unsigned long long>(seed), row.epoch, row.loss.total, row.eval.seen.acc_all,
                     row.eval.unseen.acc_all);
      };
      const auto result = hilo::run_experiment(cfg, variants, jobs, progress);
      hilo::write_outputs(result, dir);
      const auto rep = hilo::report_json(result);
      for (const auto& v : variants) {
        const auto& s = rep["variants"][v]["summary"];
        std::printf("%-16s seen_all %.4f +- %.4f  unseen_all %.4f +- %.4f\n", v.c_str(),
                    s["seen_all"]["mean"].get<double>(), s["seen_all"]["std"].get<double>(),
                    s["unseen_all"]["mean"].get<double>(), s["unseen_all"]["std"].get<double>());
      }
      std::printf("wrote %s\n", dir.string().c_str());
    } else if (*cmp) {
      const auto table = hilo::compare_reports(read_json(report_a), read_json(report_b));
      write_text(compare_out, table.dump(2) + "\n");
    } else if (*gen) {
      const auto cfg = hilo::load_experiment(data_config, data_sets);
      hilo::save_dataset(hilo::generate(cfg.run.task), fs::path(data_out));
    } else if (*bench) {
      const auto cfg = hilo::load_experiment(bench_config, bench_sets);
      std::string csv = "kind,severity,mse\n";
      char buf[128];
      for (const auto& r : hilo::corruption_table(cfg.run.task, bench_samples, bench_seed)) {
        std::snprintf(buf, sizeof buf, "%s,%d,%.6f\n", hilo::to_string(r.kind).c_str(), r.severity, r.mse);
        csv += buf;
      }
      write_text(bench_out, csv);
    }
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
