// Channel-statistic style transfer: re-normalizes a source image to the
// (perturbed) per-channel mean/std of the single target image.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "idm/common.hpp"

namespace idm {

inline constexpr double kStdFloor = 1e-6;

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;  // population std, floored at kStdFloor
};

/// Scalar offset weights, one draw each per stylization.
struct StatOffsets {
  double delta_mu = 0.0;
  double delta_sigma = 0.0;

  bool operator==(const StatOffsets&) const = default;
};

/// How the statistic gap ||mu_t - mu_s|| is measured.
enum class GapNorm {
  kL2,           // Euclidean norm of the whole per-channel difference, broadcast
  kPerChannel,   // |mu_t[c] - mu_s[c]| per channel
};

const char* to_string(GapNorm norm);
GapNorm gap_norm_from_string(const std::string& name);

struct StylizedSample {
  ImageTensor image;
  LabelMap source_label;
  StatOffsets offsets;
  std::string source_id;
};

ChannelStats compute_stats(const ImageTensor& image);

/// gamma = mu_t + d_mu * gap(mu), beta = max(sigma_t + d_sigma * gap(sigma), eps).
ChannelStats reconstruct_target_stats(const ChannelStats& target, const ChannelStats& source,
                                      const StatOffsets& offsets, GapNorm norm = GapNorm::kL2);

/// Draws (d_mu, d_sigma) ~ N(0,1) from `seed`.
StatOffsets draw_offsets(std::uint64_t seed);

/// x_hat = beta * (x_s - mu_s) / sigma_s + gamma per channel, clamped to [0,1].
StylizedSample stylize_with_offsets(const LabeledSample& source, const ImageTensor& target,
                                    const StatOffsets& offsets, GapNorm norm = GapNorm::kL2,
                                    bool clamp = true);

StylizedSample stylize(const LabeledSample& source, const ImageTensor& target, std::uint64_t seed,
                       GapNorm norm = GapNorm::kL2);

}  // namespace idm
