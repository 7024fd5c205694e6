#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pball/error.hpp"

namespace pball {

// Half-open pixel rectangle: [x0, x1) x [y0, y1).
struct BoundingBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  long area() const { return static_cast<long>(width()) * height(); }
  bool valid_in(int image_width, int image_height) const {
    return x0 >= 0 && y0 >= 0 && x0 < x1 && y0 < y1 && x1 <= image_width && y1 <= image_height;
  }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// Intersection over union of two boxes; 0 when either is degenerate.
inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const long iw = std::max(0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const long ih = std::max(0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const long inter = iw * ih;
  const long uni = a.area() + b.area() - inter;
  if (uni <= 0) return 0.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

/// Binary H x W mask, row-major.
class Mask {
 public:
  Mask() = default;
  Mask(int height, int width) : height_(height), width_(width), bits_(static_cast<std::size_t>(height) * width, 0) {
    if (height < 0 || width < 0) throw ValidationError("mask extents must be non-negative");
  }

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return bits_.size(); }

  bool operator()(int y, int x) const { return bits_[static_cast<std::size_t>(y) * width_ + x] != 0; }
  void set(int y, int x, bool v = true) { bits_[static_cast<std::size_t>(y) * width_ + x] = v ? 1 : 0; }
  bool operator[](std::size_t i) const { return bits_[i] != 0; }
  void set_flat(std::size_t i, bool v = true) { bits_[i] = v ? 1 : 0; }

  std::size_t count() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
  }
  bool empty_mask() const { return count() == 0; }

  /// Tight bounding box of the set pixels, or nullopt for an empty mask.
  std::optional<BoundingBox> bounding_box() const {
    int x0 = width_, y0 = height_, x1 = -1, y1 = -1;
    for (int y = 0; y < height_; ++y) {
      for (int x = 0; x < width_; ++x) {
        if (!(*this)(y, x)) continue;
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
    }
    if (x1 < 0) return std::nullopt;
    return BoundingBox{x0, y0, x1 + 1, y1 + 1};
  }

  // Run-length encoding as (start, length) pairs over flat indices.
  std::vector<long> to_rle() const {
    std::vector<long> out;
    std::size_t i = 0;
    while (i < bits_.size()) {
      if (!bits_[i]) {
        ++i;
        continue;
      }
      const std::size_t start = i;
      while (i < bits_.size() && bits_[i]) ++i;
      out.push_back(static_cast<long>(start));
      out.push_back(static_cast<long>(i - start));
    }
    return out;
  }

  static Mask from_rle(int height, int width, const std::vector<long>& rle) {
    Mask m(height, width);
    if (rle.size() % 2 != 0) throw ValidationError("mask RLE must hold (start, length) pairs");
    for (std::size_t k = 0; k < rle.size(); k += 2) {
      const long start = rle[k], len = rle[k + 1];
      if (start < 0 || len < 0 || static_cast<std::size_t>(start + len) > m.size()) {
        throw ValidationError("mask RLE run out of bounds");
      }
      for (long i = start; i < start + len; ++i) m.bits_[static_cast<std::size_t>(i)] = 1;
    }
    return m;
  }

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  int height_ = 0, width_ = 0;
  std::vector<std::uint8_t> bits_;
};

}  // namespace pball
