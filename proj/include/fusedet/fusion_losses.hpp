#pragma once

#include "fusedet/ops.hpp"

namespace fusedet {

/// Weights of the three fusion terms: structure (SSIM), pixel intensity, texture.
/// The (1, 10, 1) default balances the terms on the synthetic scenes.
struct LossWeights {
  double eta1 = 1.0;
  double eta2 = 10.0;
  double eta3 = 1.0;

  void validate() const;
};

/// Per-pixel convex weights for the visible (w1) and infrared (w2) sources.
struct SaliencyWeights {
  Tensor w1;
  Tensor w2;
};

inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;
inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSaliencyEps = 1e-8;

/// Mean local SSIM of two single-channel H x W images in [0, 1] using an 11x11
/// Gaussian window (sigma 1.5) with replicated borders.
Var ssim(const Var& a, const Var& b);
double ssim(const Tensor& a, const Tensor& b);

/// (1 - SSIM(u, x)) / 2 + (1 - SSIM(u, y)) / 2.
Var ssim_loss(const Var& u, const Var& x, const Var& y);

/// Histogram-contrast saliency: S(k) = sum_i p(i) |q(k) - i| over the 256-level
/// quantisation q, with p the normalised histogram.
Tensor saliency_map(const Tensor& image);

/// w1 = S_x / (S_x + S_y + eps), w2 = 1 - w1.
SaliencyWeights saliency_weights(const Tensor& visible, const Tensor& infrared);

/// Object term: mean |mask * (u - max(w1 x, w2 y))|; background term:
/// mean |(1 - mask) * (u - (w1 x + w2 y) / 2)|. Both divide by the full pixel count.
Var pixel_loss(const Var& u, const Tensor& visible, const Tensor& infrared, const Tensor& mask,
               const SaliencyWeights& weights);

/// Gaussian kernel sigma used for a texture scale of size k.
double texture_sigma(std::size_t k);

/// Sum over k in {3, 5, 7} of mean (hp_k(u) - max(hp_k(x), hp_k(y)))^2 where
/// hp_k(v) = v - blur_k(v).
Var gradient_loss(const Var& u, const Tensor& visible, const Tensor& infrared);

struct FusionLoss {
  Var ssim;
  Var pixel;
  Var gradient;
  Var total;
};

FusionLoss fusion_loss(const Var& u, const Tensor& visible, const Tensor& infrared, const Tensor& mask,
                       const LossWeights& weights);
FusionLoss fusion_loss(const Var& u, const Tensor& visible, const Tensor& infrared, const Tensor& mask,
                       const LossWeights& weights, const SaliencyWeights& saliency);

/// 0.299 R + 0.587 G + 0.114 B for a 3 x H x W image.
Tensor luminance(const Tensor& rgb);

/// Level in 0..255 used by every histogram-based routine.
int quantize_level(double value);

}  // namespace fusedet
