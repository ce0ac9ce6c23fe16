#include "fusedet/boxes.hpp"

namespace fusedet {

Tensor boxes_to_tensor(const BoxSet& boxes) {
  if (boxes.empty()) throw ShapeError("boxes_to_tensor: empty box set");
  Tensor t(Shape{boxes.size(), 4});
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    t.at(i, 0) = boxes[i].cx;
    t.at(i, 1) = boxes[i].cy;
    t.at(i, 2) = boxes[i].w;
    t.at(i, 3) = boxes[i].h;
  }
  return t;
}

BoxSet boxes_from_tensor(const Tensor& t) {
  if (t.rank() != 2 || t.dim(1) != 4) throw ShapeError("boxes_from_tensor: expected N x 4, got " + shape_string(t.shape()));
  BoxSet out(t.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {t.at(i, 0), t.at(i, 1), t.at(i, 2), t.at(i, 3)};
  return out;
}

Tensor object_mask(const BoxSet& boxes, std::size_t height, std::size_t width) {
  Tensor mask(Shape{height, width});
  for (const Box& b : boxes) {
    for (std::size_t i = 0; i < height; ++i) {
      const double py = (static_cast<double>(i) + 0.5) / static_cast<double>(height);
      if (py < b.y0() || py > b.y1()) continue;
      for (std::size_t j = 0; j < width; ++j) {
        const double px = (static_cast<double>(j) + 0.5) / static_cast<double>(width);
        if (px >= b.x0() && px <= b.x1()) mask.at(i, j) = 1.0;
      }
    }
  }
  return mask;
}

}  // namespace fusedet
