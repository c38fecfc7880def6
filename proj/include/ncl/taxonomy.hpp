#pragma once

#include <cstdint>
#include <vector>

#include "ncl/check.hpp"

namespace ncl::taxonomy {

// Per-pixel binary ground truth of manipulated regions (1 = tampered).
struct TamperMask {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> data;  // row-major, each entry 0 or 1

  TamperMask() = default;
  TamperMask(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w, 0) {}

  uint8_t at(int r, int c) const { return data[static_cast<size_t>(r) * width + c]; }
  uint8_t& at(int r, int c) { return data[static_cast<size_t>(r) * width + c]; }
  int64_t count_ones() const {
    int64_t n = 0;
    for (uint8_t v : data) n += v;
    return n;
  }
};

enum class PatchLabel : uint8_t { kTampered = 0, kAuthentic = 1, kContour = 2 };

// Grid-cell labels at feature resolution. A cell is TAMPERED iff every
// covered pixel is 1, AUTHENTIC iff every covered pixel is 0, CONTOUR
// otherwise.
struct PatchLabelMap {
  int rows = 0;
  int cols = 0;
  int stride = 1;  // pixels per grid cell side
  std::vector<PatchLabel> labels;

  PatchLabelMap() = default;
  PatchLabelMap(int r, int c, int s)
      : rows(r), cols(c), stride(s), labels(static_cast<size_t>(r) * c, PatchLabel::kAuthentic) {}

  PatchLabel at(int r, int c) const { return labels[static_cast<size_t>(r) * cols + c]; }
  PatchLabel& at(int r, int c) { return labels[static_cast<size_t>(r) * cols + c]; }

  struct Counts {
    int64_t tampered = 0, authentic = 0, contour = 0;
  };
  Counts counts() const {
    Counts n;
    for (PatchLabel l : labels) {
      if (l == PatchLabel::kTampered)
        ++n.tampered;
      else if (l == PatchLabel::kAuthentic)
        ++n.authentic;
      else
        ++n.contour;
    }
    return n;
  }
};

// Zero-pads bottom/right to the next stride multiple (padding counts as
// authentic), then labels each stride x stride cell by the all/none/mixed
// rule. Rejects non-binary masks and stride <= 0.
PatchLabelMap partition_patches(const TamperMask& mask, int stride);

enum class ShrinkMode {
  kBlockCenter,     // nearest-neighbor: sample the block center pixel
  kAreaThreshold,   // mean over block >= 0.5 (sensitivity-study variant)
};

// Downsample to (target_h, target_w); target dims must divide the source.
TamperMask shrink_mask(const TamperMask& mask, int target_h, int target_w,
                       ShrinkMode mode = ShrinkMode::kBlockCenter);

// Upsample labels by replication to (target_h, target_w); 1 on every pixel
// covered by a CONTOUR cell. This is the contour-pixel set the weighted
// segmentation loss consumes.
TamperMask contour_pixel_map(const PatchLabelMap& labels, int target_h, int target_w);

// 1 - mask
TamperMask complement(const TamperMask& mask);

// (row, col) grid positions carrying the given label, row-major.
std::vector<std::pair<int, int>> cells_with_label(const PatchLabelMap& labels, PatchLabel l);

}  // namespace ncl::taxonomy
