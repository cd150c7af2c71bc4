// Procedural source/target segmentation domains ("ShapesWorld") and folder ingestion.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "idm/common.hpp"

namespace idm {

struct SceneSpec {
  int width = 64;
  int height = 64;
  int num_classes = 8;
  int shapes_per_image = 6;
  std::uint64_t rng_seed = 7;

  /// Throws ConfigError when a field is outside its documented range.
  void validate() const;
};

/// Per-channel affine intensity shift plus additive Gaussian texture noise.
struct DomainShift {
  std::array<float, 3> mean_offset{0.0f, 0.0f, 0.0f};
  std::array<float, 3> std_scale{1.0f, 1.0f, 1.0f};
  float texture_noise = 0.0f;

  void validate() const;
  bool is_identity() const;
};

/// Renders scenes with indices [first_index, first_index + n). Sample i depends only
/// on (spec, i), so any split of the index range yields the same samples.
std::vector<LabeledSample> generate_scenes(const SceneSpec& spec, int n,
                                           const std::string& id_prefix = "src",
                                           int first_index = 0);

/// Nominal color of shape class `cls` (>= 1) before per-shape jitter and grain.
std::array<float, 3> class_color(int cls, int num_classes);

/// n source-domain samples. When n >= num_classes every class occurs in the corpus.
std::vector<LabeledSample> generate_source(const SceneSpec& spec, int n);

/// out = clamp(std_scale * x + mean_offset + texture_noise * N(0,1)); labels untouched.
LabeledSample apply_domain_shift(const LabeledSample& sample, const DomainShift& shift,
                                 std::uint64_t seed);

/// Raw label value -> class index. Values absent from the map become kIgnoreLabel.
using ClassMap = std::map<int, int>;
ClassMap identity_class_map(int num_classes);

/// Reads `images/<id>.{png,ppm}` with `labels/<id>.png` (8-bit integer labels).
/// Samples are returned sorted by id.
std::vector<LabeledSample> ingest_folder(const std::filesystem::path& root,
                                         const ClassMap& class_map);

struct DatasetManifest {
  int format_version = 1;
  int num_classes = 0;
  int height = 0;
  int width = 0;
  std::vector<std::string> ids;
};

/// Writes images, labels and manifest.json under `root`.
void write_dataset(const std::filesystem::path& root, const std::vector<LabeledSample>& samples,
                   int num_classes);
DatasetManifest read_manifest(const std::filesystem::path& root);
/// Ingests a directory written by write_dataset, checking it against its manifest.
std::vector<LabeledSample> read_dataset(const std::filesystem::path& root);

}  // namespace idm
