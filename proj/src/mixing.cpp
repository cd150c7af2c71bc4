#include "idm/mixing.hpp"

#include <cmath>
#include <limits>

namespace idm {

CellBounds cell_bounds(const PatchGrid& grid, int height, int width, int row, int col) {
  const int ch = height / grid.rows, cw = width / grid.cols;
  return {row * ch, row == grid.rows - 1 ? height : (row + 1) * ch,
          col * cw, col == grid.cols - 1 ? width : (col + 1) * cw};
}

PatchGrid choose_grid(int height, int width, int patches) {
  if (patches < 1) throw ContractError("choose_grid: P must be >= 1");
  if (height < 1 || width < 1) throw ContractError("choose_grid: empty image");
  const double target = static_cast<double>(height) / width;
  PatchGrid best;
  double best_err = std::numeric_limits<double>::infinity();
  for (int rows = 1; rows <= patches; ++rows) {
    if (patches % rows != 0) continue;
    const int cols = patches / rows;
    const double err = std::abs(static_cast<double>(rows) / cols - target);
    // `<=` lets later (larger) row counts win ties.
    if (err <= best_err) {
      best_err = err;
      best = {rows, cols};
    }
  }
  return best;
}

MixMask draw_mask(const PatchGrid& grid, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ContractError("patch_mix: ratio must be in [0, 1]");
  if (grid.rows < 1 || grid.cols < 1) throw ContractError("patch_mix: grid must be at least 1x1");
  Rng rng(seed);
  MixMask mask{grid, std::vector<std::uint8_t>(static_cast<std::size_t>(grid.count()))};
  for (auto& m : mask.take_target) m = uniform01(rng) < ratio ? 1 : 0;
  return mask;
}

MixedSample apply_mask(const ImageTensor& source_image, const LabelMap& source_label,
                       const ImageTensor& target_image, const LabelMap& target_label,
                       const MixMask& mask) {
  const int h = source_image.height, w = source_image.width;
  if (target_image.height != h || target_image.width != w || source_label.height != h ||
      source_label.width != w || target_label.height != h || target_label.width != w ||
      target_image.channels != source_image.channels) {
    throw ContractError("patch_mix: parents differ in size");
  }
  if (mask.grid.rows > h || mask.grid.cols > w) throw ContractError("patch_mix: grid finer than image");
  if (mask.take_target.size() != static_cast<std::size_t>(mask.grid.count())) {
    throw ContractError("patch_mix: mask size does not match grid");
  }
  MixedSample out{source_image, source_label, mask, {}};
  const int C = source_image.channels;
  for (int r = 0; r < mask.grid.rows; ++r) {
    for (int c = 0; c < mask.grid.cols; ++c) {
      if (!mask.take_target[static_cast<std::size_t>(r) * mask.grid.cols + c]) continue;
      const auto b = cell_bounds(mask.grid, h, w, r, c);
      for (int y = b.y0; y < b.y1; ++y) {
        for (int x = b.x0; x < b.x1; ++x) {
          out.label.at(y, x) = target_label.at(y, x);
          for (int ch = 0; ch < C; ++ch) out.image.at(y, x, ch) = target_image.at(y, x, ch);
        }
      }
    }
  }
  return out;
}

MixedSample patch_mix(const StylizedSample& source, const ImageTensor& target,
                      const LabelMap& target_pseudo, const PatchGrid& grid, double ratio,
                      std::uint64_t seed) {
  MixedSample out = apply_mask(source.image, source.source_label, target, target_pseudo,
                               draw_mask(grid, ratio, seed));
  out.source_id = source.source_id;
  return out;
}

}  // namespace idm
