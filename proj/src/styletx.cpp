#include "idm/styletx.hpp"

#include <algorithm>
#include <cmath>

namespace idm {

const char* to_string(GapNorm norm) {
  return norm == GapNorm::kL2 ? "l2" : "per_channel";
}

GapNorm gap_norm_from_string(const std::string& name) {
  if (name == "l2") return GapNorm::kL2;
  if (name == "per_channel") return GapNorm::kPerChannel;
  throw ConfigError("unknown gap norm '" + name + "' (expected l2 or per_channel)");
}

ChannelStats compute_stats(const ImageTensor& image) {
  if (image.empty()) throw ContractError("compute_stats: empty image");
  const int C = image.channels;
  const std::size_t n = image.pixels();
  ChannelStats s{std::vector<double>(C, 0.0), std::vector<double>(C, 0.0)};
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < C; ++c) s.mean[c] += image.data[i * C + c];
  }
  for (auto& m : s.mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < C; ++c) {
      const double d = image.data[i * C + c] - s.mean[c];
      s.std[c] += d * d;
    }
  }
  for (auto& v : s.std) v = std::max(std::sqrt(v / static_cast<double>(n)), kStdFloor);
  return s;
}

namespace {

std::vector<double> gap(const std::vector<double>& t, const std::vector<double>& s, GapNorm norm) {
  std::vector<double> out(t.size());
  if (norm == GapNorm::kPerChannel) {
    for (std::size_t c = 0; c < t.size(); ++c) out[c] = std::abs(t[c] - s[c]);
    return out;
  }
  double sq = 0.0;
  for (std::size_t c = 0; c < t.size(); ++c) sq += (t[c] - s[c]) * (t[c] - s[c]);
  std::fill(out.begin(), out.end(), std::sqrt(sq));
  return out;
}

}  // namespace

ChannelStats reconstruct_target_stats(const ChannelStats& target, const ChannelStats& source,
                                      const StatOffsets& offsets, GapNorm norm) {
  if (target.mean.size() != source.mean.size()) {
    throw ContractError("reconstruct_target_stats: channel counts differ");
  }
  const auto gap_mu = gap(target.mean, source.mean, norm);
  const auto gap_sigma = gap(target.std, source.std, norm);
  ChannelStats out = target;
  for (std::size_t c = 0; c < target.mean.size(); ++c) {
    out.mean[c] = target.mean[c] + offsets.delta_mu * gap_mu[c];
    out.std[c] = std::max(target.std[c] + offsets.delta_sigma * gap_sigma[c], kStdFloor);
  }
  return out;
}

StatOffsets draw_offsets(std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  StatOffsets o;
  o.delta_mu = normal(rng);
  o.delta_sigma = normal(rng);
  return o;
}

StylizedSample stylize_with_offsets(const LabeledSample& source, const ImageTensor& target,
                                    const StatOffsets& offsets, GapNorm norm, bool clamp) {
  if (source.image.channels != target.channels) {
    throw ContractError("stylize: source and target channel counts differ");
  }
  const ChannelStats s = compute_stats(source.image);
  const ChannelStats styled = reconstruct_target_stats(compute_stats(target), s, offsets, norm);
  const int C = source.image.channels;
  StylizedSample out{source.image, source.label, offsets, source.id};
  const std::size_t n = source.image.pixels();
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < C; ++c) {
      const double x = source.image.data[i * C + c];
      double v = styled.std[c] * (x - s.mean[c]) / s.std[c] + styled.mean[c];
      if (clamp) v = std::clamp(v, 0.0, 1.0);
      out.image.data[i * C + c] = static_cast<float>(v);
    }
  }
  return out;
}

StylizedSample stylize(const LabeledSample& source, const ImageTensor& target, std::uint64_t seed,
                       GapNorm norm) {
  return stylize_with_offsets(source, target, draw_offsets(seed), norm);
}

}  // namespace idm
