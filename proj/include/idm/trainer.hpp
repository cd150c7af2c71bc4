// Source pretraining and the one-shot adaptation loop.
#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "idm/losses.hpp"
#include "idm/model.hpp"
#include "idm/selection.hpp"
#include "idm/styletx.hpp"

namespace idm {

inline constexpr const char* kVersion = "idm 0.3.0";

/// Ablation switches. With `ssm` off the source batch is the first
/// `batch_size` rare-class-sampled images, unstylized, each with weight 1.
/// With `patchmix` off the mixed image is the target itself. With `pim` off the
/// target term is pseudo-label cross-entropy on the mixed images.
struct Components {
  bool ssm = true;
  bool patchmix = true;
  bool pim = true;
  bool operator==(const Components&) const = default;
};

struct TrainConfig {
  // schedule
  int source_iters = 40000;
  int adapt_iters = 500;
  int batch_size = 2;
  int candidate_pool = 16;
  double lr = 6e-4;              // decoder and heads; encoder gets lr * encoder_lr_scale
  double encoder_lr_scale = 0.1;
  int lr_warmup = 500;
  double pretrain_lr = 6e-4;
  int pretrain_warmup = 500;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  // sample selection
  SelectionConfig selection;
  GapNorm gap_norm = GapNorm::kL2;
  double rcs_temperature = 0.01;
  int max_empty_selections = 50;
  // mixing
  int patches = 96;
  double mix_ratio = 0.5;
  double pseudo_confidence = 0.0;  // pseudo-label pixels below this become ignore
  // objective
  double tau = 100.0;
  LossWeights loss_weights;
  bool literal_sign = false;
  bool prototype_grad = true;
  double marginal_decay = 0.99;  // running source marginal
  double ema_alpha = 0.999;
  Components components;
  // bookkeeping
  int eval_every = 50;

  /// Configuration used by the benchmark: small images, short runs.
  static TrainConfig desk_scale();
  /// Throws ConfigError listing every invalid field.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Missing keys keep the values of `base`; unknown keys are a ConfigError.
TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& base = {});

/// Image sampler weighting each image by exp((1 - f) / T), f being the corpus
/// pixel frequency of the rarest class present in the image.
class RareClassSampler {
 public:
  RareClassSampler(std::span<const LabeledSample> corpus, int num_classes, double temperature);

  std::size_t sample(std::uint64_t seed) const;
  const std::vector<double>& probabilities() const { return probs_; }
  const std::vector<double>& class_frequencies() const { return freq_; }

 private:
  std::vector<double> freq_;
  std::vector<double> probs_;
  std::vector<double> cdf_;
};

const LabeledSample& rare_class_sample(std::span<const LabeledSample> corpus, const RareClassSampler& sampler,
                                       std::uint64_t seed);

struct PretrainResult {
  ModelState model;
  std::vector<double> losses;  // one per iteration
};

/// Cross-entropy training on source images from `init_model(arch, cfg.seed)`.
PretrainResult pretrain_source(std::span<const LabeledSample> corpus, const Arch& arch, const TrainConfig& cfg);

struct MetricsRow {
  int iteration = 0;
  LossReport loss;
  int candidates = 0;
  int accepted = 0;
  double mean_entropy = 0.0;  // over candidates
  double mean_weight = 0.0;   // over accepted
  std::int64_t bank_count = 0;
  double lr = 0.0;
  double miou = NAN;          // set on snapshot iterations
};

inline constexpr int kMetricsCsvVersion = 1;
void write_metrics_csv(std::ostream& os, std::span<const MetricsRow> rows);

struct RunManifest {
  TrainConfig config;
  std::string version = kVersion;
  std::string target_image_id;
  std::uint64_t source_model_hash = 0;
  std::vector<std::uint64_t> iteration_seeds;

  nlohmann::json to_json() const;
};

/// FNV-1a over parameter names, shapes and bytes.
std::uint64_t hash_model(const ModelState& state);

/// The single unlabeled target image. Every read goes through `image()`, so a
/// run can prove it never touched anything else.
class OneShotTarget {
 public:
  OneShotTarget(ImageTensor image, std::string id) : image_(std::move(image)), id_(std::move(id)) {}
  const ImageTensor& image() const {
    ++reads_;
    return image_;
  }
  const std::string& id() const { return id_; }
  std::int64_t reads() const { return reads_; }

 private:
  ImageTensor image_;
  std::string id_;
  mutable std::int64_t reads_ = 0;
};

struct AdaptHooks {
  std::span<const LabeledSample> eval_set;  // snapshots need a non-empty set
  std::function<void(const MetricsRow&)> on_row;
  std::function<void(int iteration, const SelectionResult&)> on_selection;
  /// After the optimizer step and the teacher update of each iteration.
  std::function<void(int iteration, const ModelState& student, const TeacherState& teacher)> on_step;
};

struct AdaptResult {
  ModelState student;
  TeacherState teacher;
  std::vector<MetricsRow> metrics;  // one row per iteration
  std::vector<std::pair<int, double>> snapshots;  // (iterations done, mIoU)
  RunManifest manifest;
  std::int64_t target_reads = 0;
  std::vector<std::string> target_ids;  // distinct target ids read (always one)
};

AdaptResult adapt_one_shot(const ModelState& source_model, std::span<const LabeledSample> corpus,
                           const OneShotTarget& target, const TrainConfig& cfg, const AdaptHooks& hooks = {});

}  // namespace idm
