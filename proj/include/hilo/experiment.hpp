#pragma once

// Experiment orchestration: strict JSON configs, named variants, multi-seed
// runs, metrics.csv / report.json emission and report comparison.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "hilo/trainer.hpp"

namespace hilo {

using json = nlohmann::json;

struct ExperimentConfig {
  RunConfig run;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
};

json to_json(const RunConfig& cfg);
json to_json(const ExperimentConfig& cfg);
// Strict: every key must be known; missing keys keep their defaults.
RunConfig run_config_from_json(const json& j);
ExperimentConfig experiment_from_json(const json& j);

// "a.b.c=value"; value is parsed as JSON when possible, else taken as a string.
void apply_override(json& j, const std::string& assignment);

// Config file (optional, empty path for defaults) plus overrides.
ExperimentConfig load_experiment(const std::filesystem::path& path, const std::vector<std::string>& overrides);

// Known variants: simgcd, hilo, patchmix_only, mi_only, curriculum_only,
// deep_only, shallow_only, no_mi, no_curriculum, no_patchmix.
std::vector<std::string> variant_names();
RunConfig apply_variant(RunConfig base, const std::string& variant);
// "table3" and "components" expand to variant lists; a variant name maps to itself.
std::vector<std::string> expand_variants(const std::string& name);

struct VariantResult {
  std::string variant;
  std::vector<RunResult> runs;  // in seed order
};

struct ExperimentResult {
  ExperimentConfig config;
  std::vector<VariantResult> variants;
};

using Progress = std::function<void(const std::string& variant, std::uint64_t seed, const EvalRow& row)>;

// Every variant x seed, up to jobs at a time. Output order does not depend on jobs.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::vector<std::string>& variants,
                                std::size_t jobs, const Progress& progress = {});

// Fixed columns, floats with 6 decimals.
std::vector<std::string> metrics_columns();
std::string metrics_csv(const ExperimentResult& result);

// 64-bit FNV-1a of the task section's JSON text, as 16 hex digits.
std::string task_hash(const TaskConfig& task);

// Names of the summary metrics, taken from each run's final row.
std::vector<std::string> summary_metrics();
json report_json(const ExperimentResult& result);

// Writes metrics.csv and report.json into dir; nothing is left behind on failure.
void write_outputs(const ExperimentResult& result, const std::filesystem::path& dir);

// Per variant and metric: {a, b, delta = b - a}. Rejects different task
// hashes and metrics missing from either side.
json compare_reports(const json& a, const json& b);

struct CorruptionRow {
  CorruptionKind kind;
  int severity;
  double mse;
};
// Mean squared distortion per kind and severity over samples drawn from the task.
std::vector<CorruptionRow> corruption_table(const TaskConfig& task, std::size_t samples, std::uint64_t seed);

}  // namespace hilo
