// Synthetic benchmark, experiment configs, sweeps and report files.
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "idm/datagen.hpp"
#include "idm/metrics.hpp"
#include "idm/trainer.hpp"

namespace idm {

struct BenchmarkSpec {
  SceneSpec scene;
  int source_count = 256;
  int target_pool = 16;   // unlabeled target images a run may be given
  int target_test = 48;   // held-out labeled target images for evaluation
  DomainShift shift = default_shift();
  std::uint64_t shift_seed = 11;

  static DomainShift default_shift();
  void validate() const;
};

struct Benchmark {
  std::vector<LabeledSample> source;
  std::vector<LabeledSample> target_pool;
  std::vector<LabeledSample> target_test;
};

Benchmark make_benchmark(const BenchmarkSpec& spec);

/// Deterministic pick of the one-shot target image for an adaptation seed.
std::size_t pick_target(std::size_t pool_size, std::uint64_t seed);

struct SweepSpec {
  /// "" (none), "ablation", or a numeric parameter: lambda_ent, lambda_sim, k,
  /// patches, tau, mix_ratio.
  std::string parameter;
  std::vector<double> values;
};

struct ExperimentConfig {
  BenchmarkSpec data;
  Arch arch;
  TrainConfig train = TrainConfig::desk_scale();
  std::uint64_t pretrain_seed = 7;
  std::vector<std::uint64_t> adapt_seeds{1, 2, 3};
  SweepSpec sweep;
  bool plot = true;

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
/// Keys absent from `j` keep their defaults. Every problem is reported in one ConfigError.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
nlohmann::json config_json_from_file(const std::filesystem::path& path);

struct SeedResult {
  std::uint64_t seed = 0;
  std::string target_id;
  double source_miou = 0.0;
  double adapted_miou = 0.0;
  std::vector<std::pair<int, double>> snapshots;
};

struct VariantResult {
  std::string label;           // "full", "ssm+pim", "P=16", ...
  TrainConfig config;
  std::vector<SeedResult> seeds;

  double mean_adapted() const;
  double mean_source() const;
};

/// Adapts `source_model` once per seed, evaluating on the held-out target set.
/// When `run_dir` is set, each seed writes manifest, metrics CSV and checkpoint there.
VariantResult run_variant(const std::string& label, const ModelState& source_model, const Benchmark& bench,
                          const TrainConfig& train, std::span<const std::uint64_t> seeds,
                          const std::optional<std::filesystem::path>& run_dir = std::nullopt);

/// Configurations covered by a sweep; a single "default" entry when there is none.
std::vector<std::pair<std::string, TrainConfig>> sweep_variants(const TrainConfig& base, const SweepSpec& sweep);

/// Ablation rows over the (ssm, patchmix, pim) switches, all 8 combinations.
std::vector<std::pair<std::string, TrainConfig>> ablation_variants(const TrainConfig& base);

void write_results_csv(const std::filesystem::path& path, std::span<const VariantResult> results);
/// mIoU vs. iteration, one polyline per (variant, seed).
void write_convergence_svg(const std::filesystem::path& path, std::span<const VariantResult> results);

/// gen-data, pretrain, adapt and eval as configured, writing everything to `out_dir`.
/// Returns a process exit code.
int run_experiment(const std::filesystem::path& config_path, const std::filesystem::path& out_dir);

}  // namespace idm
