#pragma once

#include <vector>

#include "fusedet/tensor.hpp"

namespace fusedet {

/// Axis-aligned box in normalised image coordinates: centre (cx, cy), size (w, h).
struct Box {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  double x0() const { return cx - 0.5 * w; }
  double x1() const { return cx + 0.5 * w; }
  double y0() const { return cy - 0.5 * h; }
  double y1() const { return cy + 0.5 * h; }

  friend bool operator==(const Box&, const Box&) = default;
};

using BoxSet = std::vector<Box>;

/// N x 4 tensor with rows (cx, cy, w, h). An empty set has no tensor form.
Tensor boxes_to_tensor(const BoxSet& boxes);
BoxSet boxes_from_tensor(const Tensor& t);

/// Binary H x W mask of pixels whose centres fall inside any box.
Tensor object_mask(const BoxSet& boxes, std::size_t height, std::size_t width);

}  // namespace fusedet
