// PatchMix: grid-wise composition of a stylized source image with the target
// image; labels are mixed with the same mask (ground truth vs. pseudo label).
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "idm/common.hpp"
#include "idm/styletx.hpp"

namespace idm {

struct PatchGrid {
  int rows = 1;
  int cols = 1;

  int count() const { return rows * cols; }
  bool operator==(const PatchGrid&) const = default;
};

/// Pixel bounds [y0, y1) x [x0, x1) of one cell. The last row/column of cells
/// absorbs the remainder when the image size is not divisible by the grid.
struct CellBounds {
  int y0, y1, x0, x1;
};
CellBounds cell_bounds(const PatchGrid& grid, int height, int width, int row, int col);

struct MixMask {
  PatchGrid grid;
  std::vector<std::uint8_t> take_target;  // row-major, one entry per cell
};

struct MixedSample {
  ImageTensor image;
  LabelMap label;
  MixMask mask;
  std::string source_id;
};

/// Factorization rows * cols = P whose aspect ratio rows/cols is closest to
/// height/width; ties go to the larger row count.
PatchGrid choose_grid(int height, int width, int patches);

/// Independent Bernoulli(ratio) per cell decides whether it takes the target patch.
MixMask draw_mask(const PatchGrid& grid, double ratio, std::uint64_t seed);

/// Composes both parents under `mask`; used by patch_mix and to re-assemble
/// mixed samples from their recorded masks.
MixedSample apply_mask(const ImageTensor& source_image, const LabelMap& source_label,
                       const ImageTensor& target_image, const LabelMap& target_label,
                       const MixMask& mask);

MixedSample patch_mix(const StylizedSample& source, const ImageTensor& target,
                      const LabelMap& target_pseudo, const PatchGrid& grid, double ratio,
                      std::uint64_t seed);

}  // namespace idm
