#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fusedet/boxes.hpp"
#include "fusedet/fusion_losses.hpp"
#include "gradcheck.hpp"

using namespace fusedet;
using fusedet::testing::check_gradients;
using fusedet::testing::random_tensor;

namespace {

// Direct 2-D filter with an explicit outer-product kernel and clamped indices.
Tensor direct_filter(const Tensor& img, std::size_t size, double sigma) {
  const std::size_t H = img.dim(0), W = img.dim(1);
  const long r = static_cast<long>(size / 2);
  std::vector<double> g(size);
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(r);
    g[i] = std::exp(-d * d / (2 * sigma * sigma));
    total += g[i];
  }
  for (double& v : g) v /= total;
  Tensor out(img.shape());
  for (long i = 0; i < static_cast<long>(H); ++i) {
    for (long j = 0; j < static_cast<long>(W); ++j) {
      double s = 0.0;
      for (long a = -r; a <= r; ++a) {
        for (long b = -r; b <= r; ++b) {
          const long ii = std::clamp(i + a, 0L, static_cast<long>(H) - 1);
          const long jj = std::clamp(j + b, 0L, static_cast<long>(W) - 1);
          s += g[static_cast<std::size_t>(a + r)] * g[static_cast<std::size_t>(b + r)] * img.at(static_cast<std::size_t>(ii), static_cast<std::size_t>(jj));
        }
      }
      out.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = s;
    }
  }
  return out;
}

Tensor elementwise(const Tensor& a, const Tensor& b, double (*f)(double, double)) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

double ssim_oracle(const Tensor& a, const Tensor& b) {
  auto mul = [](double x, double y) { return x * y; };
  const Tensor ma = direct_filter(a, 11, 1.5), mb = direct_filter(b, 11, 1.5);
  const Tensor saa = direct_filter(elementwise(a, a, mul), 11, 1.5);
  const Tensor sbb = direct_filter(elementwise(b, b, mul), 11, 1.5);
  const Tensor sab = direct_filter(elementwise(a, b, mul), 11, 1.5);
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double va = saa[k] - ma[k] * ma[k], vb = sbb[k] - mb[k] * mb[k], cov = sab[k] - ma[k] * mb[k];
    total += (2 * ma[k] * mb[k] + c1) * (2 * cov + c2) / ((ma[k] * ma[k] + mb[k] * mb[k] + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(a.size());
}

double gradient_loss_oracle(const Tensor& u, const Tensor& x, const Tensor& y) {
  double total = 0.0;
  for (std::size_t k : {3u, 5u, 7u}) {
    const double sigma = 0.3 * ((static_cast<double>(k) - 1) * 0.5 - 1) + 0.8;
    const Tensor bu = direct_filter(u, k, sigma), bx = direct_filter(x, k, sigma), by = direct_filter(y, k, sigma);
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
      const double t = std::max(x[i] - bx[i], y[i] - by[i]);
      s += (u[i] - bu[i] - t) * (u[i] - bu[i] - t);
    }
    total += s / static_cast<double>(u.size());
  }
  return total;
}

double value_of(const std::function<Var(Tape&)>& f) {
  Tape tape;
  return f(tape).value().item();
}

}  // namespace

TEST(Ssim, SelfSimilarityIsOne) {
  SplitMix64 rng(1);
  Tensor x = random_tensor(rng, {16, 16}, 0.0, 1.0);
  EXPECT_DOUBLE_EQ(ssim(x, x), 1.0);
}

TEST(Ssim, ConstantHalfGrayIsOne) {
  // mu = 0.5 both, variances 0: (2*0.25 + C1)(C2) / ((0.5 + C1)(C2)) = 1.
  EXPECT_NEAR(ssim(Tensor(Shape{12, 12}, 0.5), Tensor(Shape{12, 12}, 0.5)), 1.0, 1e-15);
}

TEST(Ssim, InvertedRampIsAnticorrelated) {
  Tensor ramp(Shape{24, 24}), inv(Shape{24, 24});
  for (std::size_t i = 0; i < 24; ++i)
    for (std::size_t j = 0; j < 24; ++j) {
      ramp.at(i, j) = static_cast<double>(j) / 23.0;
      inv.at(i, j) = 1.0 - ramp.at(i, j);
    }
  const double s = ssim(ramp, inv);
  EXPECT_LT(s, 0.0);
  EXPECT_NEAR(s, ssim_oracle(ramp, inv), 1e-12);
}

TEST(Ssim, MatchesDirectWindowOracle) {
  SplitMix64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor a = random_tensor(rng, {9, 13}, 0.0, 1.0);
    Tensor b = random_tensor(rng, {9, 13}, 0.0, 1.0);
    EXPECT_NEAR(ssim(a, b), ssim_oracle(a, b), 1e-12);
  }
}

TEST(Ssim, SymmetricAndShapeChecked) {
  SplitMix64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = random_tensor(rng, {8, 8}, 0.0, 1.0), b = random_tensor(rng, {8, 8}, 0.0, 1.0);
    EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-12);
  }
  EXPECT_THROW(ssim(Tensor(Shape{4, 4}), Tensor(Shape{4, 5})), ShapeError);
}

TEST(SsimLoss, Examples) {
  SplitMix64 rng(4);
  Tensor x = random_tensor(rng, {10, 10}, 0.0, 1.0);
  EXPECT_NEAR(value_of([&](Tape& t) { return ssim_loss(t.constant(x), t.constant(x), t.constant(x)); }), 0.0, 1e-15);
  Tensor u = random_tensor(rng, {10, 10}, 0.0, 1.0), y = random_tensor(rng, {10, 10}, 0.0, 1.0);
  const double expected = (1 - ssim(u, x)) / 2 + (1 - ssim(u, y)) / 2;
  const double got = value_of([&](Tape& t) { return ssim_loss(t.constant(u), t.constant(x), t.constant(y)); });
  EXPECT_NEAR(got, expected, 1e-14);
  EXPECT_GE(got, 0.0);
  EXPECT_LE(got, 2.0);
}

TEST(Saliency, ConstantImageIsZero) {
  Tensor s = saliency_map(Tensor(Shape{6, 6}, 0.4));
  for (double v : s.data()) EXPECT_EQ(v, 0.0);
}

TEST(Saliency, HalfBlackHalfWhite) {
  Tensor img(Shape{4, 4});
  for (std::size_t k = 0; k < 8; ++k) img[k] = 1.0;
  Tensor s = saliency_map(img);
  for (double v : s.data()) EXPECT_DOUBLE_EQ(v, 127.5);
}

TEST(Saliency, WeightedDistanceSum) {
  // Levels {0: 3/4, 200: 1/4}.
  Tensor img(Shape{2, 2}, 0.0);
  img[3] = 200.0 / 255.0;
  Tensor s = saliency_map(img);
  EXPECT_DOUBLE_EQ(s[0], 50.0);
  EXPECT_DOUBLE_EQ(s[3], 150.0);
}

TEST(Saliency, PermutationEquivariant) {
  SplitMix64 rng(5);
  Tensor img = random_tensor(rng, {8, 8}, 0.0, 1.0);
  std::vector<std::size_t> perm(img.size());
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = perm.size(); i-- > 1;) std::swap(perm[i], perm[rng.below(i + 1)]);
  Tensor permuted(img.shape());
  for (std::size_t k = 0; k < img.size(); ++k) permuted[k] = img[perm[k]];
  Tensor s = saliency_map(img), sp = saliency_map(permuted);
  for (std::size_t k = 0; k < img.size(); ++k) EXPECT_DOUBLE_EQ(sp[k], s[perm[k]]);
}

TEST(SaliencyWeights, PartitionOfUnity) {
  SplitMix64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tensor(rng, {8, 8}, 0.0, 1.0), y = random_tensor(rng, {8, 8}, 0.0, 1.0);
    const auto w = saliency_weights(x, y);
    for (std::size_t k = 0; k < x.size(); ++k) {
      EXPECT_NEAR(w.w1[k] + w.w2[k], 1.0, 1e-12);
      EXPECT_GE(w.w1[k], 0.0);
      EXPECT_LE(w.w1[k], 1.0);
      EXPECT_GE(w.w2[k], 0.0);
    }
  }
}

TEST(SaliencyWeights, Examples) {
  // Identical images: S_x == S_y.
  Tensor img(Shape{4, 4});
  for (std::size_t k = 0; k < 8; ++k) img[k] = 1.0;
  auto same = saliency_weights(img, img);
  for (double v : same.w1.data()) EXPECT_NEAR(v, 0.5, 1e-9);
  // S_y == 0 (constant infrared).
  auto vis_only = saliency_weights(img, Tensor(Shape{4, 4}, 0.3));
  for (double v : vis_only.w1.data()) EXPECT_NEAR(v, 1.0, 1e-9);
  // Both constant: 0 / (0 + eps) = 0.
  auto flat = saliency_weights(Tensor(Shape{4, 4}, 0.2), Tensor(Shape{4, 4}, 0.7));
  for (std::size_t k = 0; k < 16; ++k) {
    EXPECT_EQ(flat.w1[k], 0.0);
    EXPECT_EQ(flat.w2[k], 1.0);
  }
}

TEST(PixelLoss, ExactTargetsGiveZero) {
  SplitMix64 rng(7);
  Tensor x = random_tensor(rng, {6, 6}, 0.0, 1.0), y = random_tensor(rng, {6, 6}, 0.0, 1.0);
  const auto w = saliency_weights(x, y);
  Tensor max_target(x.shape()), mean_target(x.shape());
  for (std::size_t k = 0; k < x.size(); ++k) {
    max_target[k] = std::max(w.w1[k] * x[k], w.w2[k] * y[k]);
    mean_target[k] = 0.5 * (w.w1[k] * x[k] + w.w2[k] * y[k]);
  }
  EXPECT_EQ(value_of([&](Tape& t) { return pixel_loss(t.constant(max_target), x, y, Tensor(x.shape(), 1.0), w); }), 0.0);
  EXPECT_EQ(value_of([&](Tape& t) { return pixel_loss(t.constant(mean_target), x, y, Tensor(x.shape(), 0.0), w); }), 0.0);
}

TEST(PixelLoss, TwoByTwoHandCase) {
  Tensor u(Shape{2, 2}, {0.5, 0.2, 0.9, 0.4});
  Tensor x(Shape{2, 2}, {0.8, 0.6, 0.1, 0.3});
  Tensor y(Shape{2, 2}, {0.2, 0.4, 0.7, 0.5});
  SaliencyWeights w{Tensor(Shape{2, 2}, {0.25, 0.5, 0.75, 1.0}), Tensor(Shape{2, 2}, {0.75, 0.5, 0.25, 0.0})};
  Tensor mask(Shape{2, 2}, {1, 0, 0, 0});
  // Pixel 0 (object): max(0.2, 0.15) = 0.2 -> |0.5 - 0.2| = 0.3.
  // Pixel 1: mean(0.3, 0.2) = 0.25 -> 0.05; pixel 2: mean(0.075, 0.175) = 0.125 -> 0.775;
  // pixel 3: mean(0.3, 0) = 0.15 -> 0.25. Each term divides by 4.
  const double expected = 0.3 / 4 + (0.05 + 0.775 + 0.25) / 4;
  EXPECT_NEAR(value_of([&](Tape& t) { return pixel_loss(t.constant(u), x, y, mask, w); }), expected, 1e-15);
}

TEST(GradientLoss, ZeroCases) {
  SplitMix64 rng(8);
  Tensor x = random_tensor(rng, {8, 8}, 0.0, 1.0);
  EXPECT_NEAR(value_of([&](Tape& t) { return gradient_loss(t.constant(x), x, x); }), 0.0, 1e-30);
  EXPECT_NEAR(value_of([&](Tape& t) {
                return gradient_loss(t.constant(Tensor(Shape{8, 8}, 0.3)), Tensor(Shape{8, 8}, 0.9),
                                     Tensor(Shape{8, 8}, 0.1));
              }),
              0.0, 1e-28);
}

TEST(GradientLoss, ImpulseMatchesDirectConvolution) {
  Tensor u(Shape{5, 5}, 0.0), x(Shape{5, 5}, 0.0), y(Shape{5, 5}, 0.0);
  u.at(2, 2) = 1.0;
  x.at(1, 3) = 1.0;
  y.at(3, 1) = 0.5;
  const double got = value_of([&](Tape& t) { return gradient_loss(t.constant(u), x, y); });
  EXPECT_NEAR(got, gradient_loss_oracle(u, x, y), 1e-14);
  EXPECT_GT(got, 0.0);
}

TEST(FusionLoss, ProjectionsAndComposition) {
  SplitMix64 rng(9);
  Tensor u = random_tensor(rng, {8, 8}, 0.0, 1.0), x = random_tensor(rng, {8, 8}, 0.0, 1.0),
         y = random_tensor(rng, {8, 8}, 0.0, 1.0);
  Tensor mask(Shape{8, 8}, 0.0);
  for (std::size_t i = 2; i < 5; ++i)
    for (std::size_t j = 1; j < 6; ++j) mask.at(i, j) = 1.0;
  Tape tape;
  Var uv = tape.constant(u);
  auto only_ssim = fusion_loss(uv, x, y, mask, {1, 0, 0});
  EXPECT_DOUBLE_EQ(only_ssim.total.value().item(), only_ssim.ssim.value().item());
  auto full = fusion_loss(uv, x, y, mask, {1, 10, 1});
  const double combined =
      full.ssim.value().item() + 10 * full.pixel.value().item() + full.gradient.value().item();
  EXPECT_NEAR(full.total.value().item(), combined, 1e-14);
  EXPECT_NEAR(full.gradient.value().item(), gradient_loss_oracle(u, x, y), 1e-14);
  EXPECT_GT(full.total.value().item(), 0.0);
  EXPECT_THROW(fusion_loss(uv, x, y, mask, {0, 0, 0}), std::invalid_argument);
  EXPECT_THROW(fusion_loss(uv, x, y, mask, {-1, 0, 1}), std::invalid_argument);
}

TEST(FusionLoss, AllComponentsZeroGivesZero) {
  SplitMix64 rng(11);
  Tensor img = random_tensor(rng, {8, 8}, 0.0, 1.0);
  Tape tape;
  // u == x == y zeroes the SSIM and texture terms; the pixel term is switched off.
  auto loss = fusion_loss(tape.constant(img), img, img, Tensor(img.shape(), 0.0), {1, 0, 1});
  EXPECT_NEAR(loss.total.value().item(), 0.0, 1e-15);
  EXPECT_GT(loss.pixel.value().item(), 0.0);
}

TEST(FusionLoss, GradientsMatchFiniteDifferences) {
  SplitMix64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor(rng, {8, 8}, 0.0, 1.0), y = random_tensor(rng, {8, 8}, 0.0, 1.0);
    Tensor mask = object_mask({{0.4, 0.5, 0.3, 0.4}}, 8, 8);
    const auto w = saliency_weights(x, y);
    auto build = [&](Tape&, const std::vector<Var>& in) { return fusion_loss(in[0], x, y, mask, {1, 10, 1}, w).total; };
    ASSERT_LT(check_gradients(build, {random_tensor(rng, {8, 8}, 0.0, 1.0)}).relative_error, 1e-5);
  }
}

TEST(Luminance, Weights) {
  Tensor rgb(Shape{3, 1, 2}, {1.0, 0.0, 0.0, 1.0, 0.0, 0.0});
  Tensor l = luminance(rgb);
  EXPECT_DOUBLE_EQ(l[0], 0.299);
  EXPECT_DOUBLE_EQ(l[1], 0.587);
  EXPECT_THROW(luminance(Tensor(Shape{2, 2, 2})), ShapeError);
}

TEST(ObjectMask, PixelCentresInsideBoxes) {
  Tensor m = object_mask({{0.5, 0.5, 0.5, 0.5}}, 4, 4);
  const Tensor expected(Shape{4, 4}, {0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0});
  EXPECT_EQ(m, expected);
  EXPECT_EQ(object_mask({}, 3, 3), Tensor(Shape{3, 3}, 0.0));
}
