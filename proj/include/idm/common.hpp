// Core value types shared by every module: images, label maps, samples,
// error classes and seed derivation.
#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace idm {

/// Label value excluded from every loss and metric.
inline constexpr std::uint8_t kIgnoreLabel = 255;
inline constexpr int kMaxClasses = 32;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
/// A caller broke an operation's precondition (shapes, ranges, schemas).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};
struct IngestError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct EvaluationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// H x W x C float image, interleaved (HWC) storage, intensities in [0,1].
struct ImageTensor {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;

  ImageTensor() = default;
  ImageTensor(int h, int w, int c, float fill = 0.0f)
      : height(h), width(w), channels(c),
        data(static_cast<std::size_t>(h) * w * c, fill) {}

  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  bool empty() const { return data.empty(); }

  float& at(int y, int x, int c) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  float at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  bool operator==(const ImageTensor&) const = default;
};

/// H x W class-index map; kIgnoreLabel marks unlabeled pixels.
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  LabelMap() = default;
  LabelMap(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }

  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }

  bool operator==(const LabelMap&) const = default;
};

struct LabeledSample {
  ImageTensor image;
  LabelMap label;
  std::string id;

  bool operator==(const LabeledSample&) const = default;
};

/// Throws ContractError unless every label is < num_classes or the ignore sentinel,
/// and the label grid matches the image grid.
void validate_sample(const LabeledSample& sample, int num_classes);

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; derives independent child seeds from (seed, index).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Uniform double in [0,1) from the top 53 bits of one draw.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace idm
