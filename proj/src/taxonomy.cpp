#include "ncl/taxonomy.hpp"

namespace ncl::taxonomy {

namespace {

void check_mask(const TamperMask& mask) {
  NCL_CHECK(mask.height >= 1 && mask.width >= 1, "mask must be at least 1x1");
  NCL_CHECK(mask.data.size() == static_cast<size_t>(mask.height) * mask.width,
            "mask data size mismatch");
  for (uint8_t v : mask.data) {
    NCL_CHECK(v == 0 || v == 1, "mask entries must be exactly 0 or 1");
  }
}

}  // namespace

PatchLabelMap partition_patches(const TamperMask& mask, int stride) {
  NCL_CHECK(stride > 0, "stride must be positive");
  check_mask(mask);

  const int rows = (mask.height + stride - 1) / stride;
  const int cols = (mask.width + stride - 1) / stride;
  PatchLabelMap out(rows, cols, stride);

  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      int64_t ones = 0;
      // Cell area is stride*stride; pixels past the image edge are the
      // zero padding and count as authentic.
      for (int y = r * stride; y < (r + 1) * stride; ++y) {
        if (y >= mask.height) break;
        for (int x = c * stride; x < (c + 1) * stride; ++x) {
          if (x >= mask.width) break;
          ones += mask.at(y, x);
        }
      }
      // Padded cells can never reach ones == area, so padding zeros make
      // an edge cell mixed exactly as the authentic-padding rule demands.
      const int64_t area = static_cast<int64_t>(stride) * stride;
      if (ones == 0)
        out.at(r, c) = PatchLabel::kAuthentic;
      else if (ones == area)
        out.at(r, c) = PatchLabel::kTampered;
      else
        out.at(r, c) = PatchLabel::kContour;
    }
  }
  return out;
}

TamperMask shrink_mask(const TamperMask& mask, int target_h, int target_w, ShrinkMode mode) {
  check_mask(mask);
  NCL_CHECK(target_h >= 1 && target_w >= 1, "target dims must be positive");
  NCL_CHECK(mask.height % target_h == 0 && mask.width % target_w == 0,
            "target dims must divide the mask dims");

  const int bh = mask.height / target_h;
  const int bw = mask.width / target_w;
  TamperMask out(target_h, target_w);
  for (int r = 0; r < target_h; ++r) {
    for (int c = 0; c < target_w; ++c) {
      if (mode == ShrinkMode::kBlockCenter) {
        out.at(r, c) = mask.at(r * bh + bh / 2, c * bw + bw / 2);
      } else {
        int64_t ones = 0;
        for (int y = r * bh; y < (r + 1) * bh; ++y)
          for (int x = c * bw; x < (c + 1) * bw; ++x) ones += mask.at(y, x);
        out.at(r, c) = 2 * ones >= static_cast<int64_t>(bh) * bw ? 1 : 0;
      }
    }
  }
  return out;
}

TamperMask contour_pixel_map(const PatchLabelMap& labels, int target_h, int target_w) {
  NCL_CHECK(labels.rows >= 1 && labels.cols >= 1, "label grid must be non-empty");
  NCL_CHECK(target_h % labels.rows == 0 && target_w % labels.cols == 0,
            "target must be an integer multiple of the label grid");
  const int bh = target_h / labels.rows;
  const int bw = target_w / labels.cols;
  TamperMask out(target_h, target_w);
  for (int y = 0; y < target_h; ++y) {
    for (int x = 0; x < target_w; ++x) {
      out.at(y, x) = labels.at(y / bh, x / bw) == PatchLabel::kContour ? 1 : 0;
    }
  }
  return out;
}

TamperMask complement(const TamperMask& mask) {
  check_mask(mask);
  TamperMask out = mask;
  for (auto& v : out.data) v = static_cast<uint8_t>(1 - v);
  return out;
}

}  // namespace ncl::taxonomy
