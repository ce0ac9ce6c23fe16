#include "fusedet/fusion_losses.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace fusedet {

namespace {

void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

void require_image(const char* op, const Shape& s) {
  if (s.size() != 2) throw ShapeError(std::string(op) + ": expected single-channel H x W image, got " + shape_string(s));
}

const std::vector<double>& ssim_kernel() {
  static const std::vector<double> k = gaussian_kernel(kSsimWindow, kSsimSigma);
  return k;
}

}  // namespace

void LossWeights::validate() const {
  if (eta1 < 0.0 || eta2 < 0.0 || eta3 < 0.0) throw std::invalid_argument("LossWeights: weights must be nonnegative");
  if (eta1 == 0.0 && eta2 == 0.0 && eta3 == 0.0) throw std::invalid_argument("LossWeights: all weights are zero");
}

int quantize_level(double value) {
  const double v = std::clamp(value, 0.0, 1.0) * 255.0;
  return static_cast<int>(std::lround(v));
}

Var ssim(const Var& a, const Var& b) {
  require_same_shape("ssim", a.shape(), b.shape());
  require_image("ssim", a.shape());
  const auto& k = ssim_kernel();
  Var mu_a = blur(a, k);
  Var mu_b = blur(b, k);
  Var mu_aa = mu_a * mu_a;
  Var mu_bb = mu_b * mu_b;
  Var mu_ab = mu_a * mu_b;
  Var var_a = blur(a * a, k) - mu_aa;
  Var var_b = blur(b * b, k) - mu_bb;
  Var cov = blur(a * b, k) - mu_ab;
  Var num = (2.0 * mu_ab + kSsimC1) * (2.0 * cov + kSsimC2);
  Var den = (mu_aa + mu_bb + kSsimC1) * (var_a + var_b + kSsimC2);
  return mean(num / den);
}

double ssim(const Tensor& a, const Tensor& b) {
  Tape tape;
  return ssim(tape.constant(a), tape.constant(b)).value().item();
}

Var ssim_loss(const Var& u, const Var& x, const Var& y) {
  require_same_shape("ssim_loss", u.shape(), x.shape());
  require_same_shape("ssim_loss", u.shape(), y.shape());
  Var lx = 0.5 * (-ssim(u, x) + 1.0);
  Var ly = 0.5 * (-ssim(u, y) + 1.0);
  return lx + ly;
}

Tensor saliency_map(const Tensor& image) {
  std::array<double, 256> hist{};
  for (double v : image.data()) hist[static_cast<std::size_t>(quantize_level(v))] += 1.0;
  const double n = static_cast<double>(image.size());
  for (double& h : hist) h /= n;
  std::array<double, 256> by_level{};
  for (int q = 0; q < 256; ++q) {
    double s = 0.0;
    for (int i = 0; i < 256; ++i) s += hist[static_cast<std::size_t>(i)] * std::abs(q - i);
    by_level[static_cast<std::size_t>(q)] = s;
  }
  Tensor out(image.shape());
  for (std::size_t k = 0; k < image.size(); ++k) out[k] = by_level[static_cast<std::size_t>(quantize_level(image[k]))];
  return out;
}

SaliencyWeights saliency_weights(const Tensor& visible, const Tensor& infrared) {
  require_same_shape("saliency_weights", visible.shape(), infrared.shape());
  const Tensor sx = saliency_map(visible);
  const Tensor sy = saliency_map(infrared);
  SaliencyWeights w{Tensor(visible.shape()), Tensor(visible.shape())};
  for (std::size_t k = 0; k < sx.size(); ++k) {
    w.w1[k] = sx[k] / (sx[k] + sy[k] + kSaliencyEps);
    w.w2[k] = 1.0 - w.w1[k];
  }
  return w;
}

Var pixel_loss(const Var& u, const Tensor& visible, const Tensor& infrared, const Tensor& mask,
               const SaliencyWeights& weights) {
  require_same_shape("pixel_loss", u.shape(), visible.shape());
  require_same_shape("pixel_loss", u.shape(), infrared.shape());
  require_same_shape("pixel_loss", u.shape(), mask.shape());
  require_same_shape("pixel_loss", u.shape(), weights.w1.shape());
  Tensor object_target(u.shape()), background_target(u.shape()), background(u.shape());
  for (std::size_t k = 0; k < object_target.size(); ++k) {
    const double a = weights.w1[k] * visible[k];
    const double b = weights.w2[k] * infrared[k];
    object_target[k] = std::max(a, b);
    background_target[k] = 0.5 * (a + b);
    background[k] = 1.0 - mask[k];
  }
  Tape& tape = *u.tape();
  Var object_term = mean(abs((u - tape.constant(std::move(object_target))) * tape.constant(mask)));
  Var background_term = mean(abs((u - tape.constant(std::move(background_target))) * tape.constant(std::move(background))));
  return object_term + background_term;
}

double texture_sigma(std::size_t k) { return 0.3 * ((static_cast<double>(k) - 1.0) * 0.5 - 1.0) + 0.8; }

Var gradient_loss(const Var& u, const Tensor& visible, const Tensor& infrared) {
  require_same_shape("gradient_loss", u.shape(), visible.shape());
  require_same_shape("gradient_loss", u.shape(), infrared.shape());
  Tape& tape = *u.tape();
  Var total;
  for (std::size_t k : {3u, 5u, 7u}) {
    const auto kernel = gaussian_kernel(k, texture_sigma(k));
    Var hp_u = u - blur(u, kernel);
    Var x = tape.constant(visible);
    Var y = tape.constant(infrared);
    Tensor target = maximum(x - blur(x, kernel), y - blur(y, kernel)).value();
    Var term = mean(square(hp_u - tape.constant(std::move(target))));
    total = total.valid() ? total + term : term;
  }
  return total;
}

FusionLoss fusion_loss(const Var& u, const Tensor& visible, const Tensor& infrared, const Tensor& mask,
                       const LossWeights& weights) {
  return fusion_loss(u, visible, infrared, mask, weights, saliency_weights(visible, infrared));
}

FusionLoss fusion_loss(const Var& u, const Tensor& visible, const Tensor& infrared, const Tensor& mask,
                       const LossWeights& weights, const SaliencyWeights& saliency) {
  weights.validate();
  Tape& tape = *u.tape();
  FusionLoss out;
  out.ssim = ssim_loss(u, tape.constant(visible), tape.constant(infrared));
  out.pixel = pixel_loss(u, visible, infrared, mask, saliency);
  out.gradient = gradient_loss(u, visible, infrared);
  out.total = weights.eta1 * out.ssim + weights.eta2 * out.pixel + weights.eta3 * out.gradient;
  return out;
}

Tensor luminance(const Tensor& rgb) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) throw ShapeError("luminance: expected 3 x H x W, got " + shape_string(rgb.shape()));
  const std::size_t H = rgb.dim(1), W = rgb.dim(2);
  Tensor out(Shape{H, W});
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      out.at(i, j) = 0.299 * rgb.at(0, i, j) + 0.587 * rgb.at(1, i, j) + 0.114 * rgb.at(2, i, j);
  return out;
}

}  // namespace fusedet
