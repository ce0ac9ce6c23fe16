#include "fusedet/cfdp.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "fusedet/ops.hpp"

namespace fusedet {

double DiffusionSchedule::alpha_bar_at(std::size_t t) const {
  if (t > steps) throw std::out_of_range("diffusion time " + std::to_string(t) + " outside [0, " + std::to_string(steps) + "]");
  return t == 0 ? 1.0 : alpha_bar[t - 1];
}

DiffusionSchedule build_schedule(std::size_t steps, ScheduleKind kind) {
  if (steps < 1) throw std::invalid_argument("build_schedule: need at least one step");
  DiffusionSchedule s;
  s.steps = steps;
  s.beta.resize(steps);
  const double T = static_cast<double>(steps);
  if (kind == ScheduleKind::Cosine) {
    auto f = [&](double t) {
      const double c = std::cos((t / T + kCosineOffset) / (1.0 + kCosineOffset) * std::numbers::pi / 2.0);
      return c * c;
    };
    const double f0 = f(0.0);
    for (std::size_t t = 1; t <= steps; ++t) {
      const double prev = f(static_cast<double>(t - 1)) / f0;
      const double cur = f(static_cast<double>(t)) / f0;
      s.beta[t - 1] = std::min(1.0 - cur / prev, kMaxBeta);
    }
  } else {
    const double lo = 1e-4 * 1000.0 / T, hi = 0.02 * 1000.0 / T;
    for (std::size_t t = 0; t < steps; ++t)
      s.beta[t] = std::min(steps == 1 ? hi : lo + (hi - lo) * static_cast<double>(t) / (T - 1.0), kMaxBeta);
  }
  s.alpha.resize(steps);
  s.alpha_bar.resize(steps);
  double prod = 1.0;
  for (std::size_t t = 0; t < steps; ++t) {
    s.alpha[t] = 1.0 - s.beta[t];
    prod *= s.alpha[t];
    s.alpha_bar[t] = prod;
  }
  return s;
}

Tensor scale_boxes(const Tensor& z) {
  Tensor out = z;
  for (double& v : out.data()) v = (2.0 * v - 1.0) * kSignalScale;
  return out;
}

Tensor unscale_boxes(const Tensor& z) {
  Tensor out = z;
  for (double& v : out.data()) v = (v / kSignalScale + 1.0) / 2.0;
  return out;
}

Tensor forward_noise(const Tensor& z0, std::size_t t, const Tensor& eps, const DiffusionSchedule& schedule) {
  if (z0.shape() != eps.shape())
    throw ShapeError("forward_noise: noise shape " + shape_string(eps.shape()) + " differs from boxes " + shape_string(z0.shape()));
  const double ab = schedule.alpha_bar_at(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out = scale_boxes(z0);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * out[i] + b * eps[i];
  return out;
}

Var detector_loss(const Var& prediction, const Var& target) {
  if (prediction.shape() != target.shape())
    throw ShapeError("detector_loss: shape mismatch " + shape_string(prediction.shape()) + " vs " +
                     shape_string(target.shape()));
  return 0.5 * mean(square(prediction - target));
}

double detector_loss(const Tensor& prediction, const Tensor& target) {
  Tape tape;
  return detector_loss(tape.constant(prediction), tape.constant(target)).value().item();
}

Tensor ddim_step(const Tensor& z_t, const Tensor& predicted_z0, std::size_t t, std::size_t t_prev,
                 const DiffusionSchedule& schedule) {
  if (t_prev >= t)
    throw std::invalid_argument("ddim_step: t_prev (" + std::to_string(t_prev) + ") must be below t (" + std::to_string(t) + ")");
  if (z_t.shape() != predicted_z0.shape()) throw ShapeError("ddim_step: latent and prediction shapes differ");
  const double ab = schedule.alpha_bar_at(t);
  const double ab_prev = schedule.alpha_bar_at(t_prev);
  const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
  const double sa_prev = std::sqrt(ab_prev), sn_prev = std::sqrt(1.0 - ab_prev);
  Tensor out(z_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double eps_hat = (z_t[i] - sa * predicted_z0[i]) / sn;
    out[i] = sa_prev * predicted_z0[i] + sn_prev * eps_hat;
  }
  return out;
}

std::vector<std::size_t> sampling_grid(std::size_t total_steps, std::size_t sampling_steps) {
  if (sampling_steps < 1 || sampling_steps > total_steps)
    throw std::invalid_argument("sampling steps must lie in [1, " + std::to_string(total_steps) + "]");
  std::vector<std::size_t> grid(sampling_steps + 1);
  for (std::size_t i = 0; i <= sampling_steps; ++i)
    grid[i] = static_cast<std::size_t>(std::llround(static_cast<double>(total_steps) *
                                                    static_cast<double>(sampling_steps - i) /
                                                    static_cast<double>(sampling_steps)));
  return grid;
}

Tensor sample_latent(const Denoiser& denoiser, std::size_t boxes, std::size_t sampling_steps,
                     const DiffusionSchedule& schedule, std::uint64_t seed) {
  if (boxes < 1) throw std::invalid_argument("sample: need at least one box");
  const auto grid = sampling_grid(schedule.steps, sampling_steps);
  SplitMix64 rng(seed);
  Tensor z = rng.normal_tensor(Shape{boxes, 4});
  for (std::size_t i = 0; i < sampling_steps; ++i) {
    const Tensor pred = denoiser(z, grid[i]);
    if (pred.shape() != z.shape())
      throw ShapeError("sample: denoiser returned " + shape_string(pred.shape()) + " at step " + std::to_string(i));
    if (!pred.all_finite())
      throw std::runtime_error("sample: denoiser produced non-finite output at step " + std::to_string(i) + " (t=" +
                               std::to_string(grid[i]) + ")");
    z = ddim_step(z, pred, grid[i], grid[i + 1], schedule);
  }
  return z;
}

Box clamp_box(Box b) {
  b.cx = std::clamp(b.cx, 0.0, 1.0);
  b.cy = std::clamp(b.cy, 0.0, 1.0);
  b.w = std::clamp(b.w, kMinBoxSize, 1.0);
  b.h = std::clamp(b.h, kMinBoxSize, 1.0);
  return b;
}

BoxSet sample(const Denoiser& denoiser, std::size_t boxes, std::size_t sampling_steps, const DiffusionSchedule& schedule,
              std::uint64_t seed) {
  BoxSet out = boxes_from_tensor(unscale_boxes(sample_latent(denoiser, boxes, sampling_steps, schedule, seed)));
  for (Box& b : out) b = clamp_box(b);
  return out;
}

BoxSet pad_boxes(const BoxSet& ground_truth, std::size_t count, SplitMix64& rng, double jitter) {
  BoxSet out;
  out.reserve(count);
  if (ground_truth.empty()) {
    for (std::size_t i = 0; i < count; ++i)
      out.push_back(Box{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.3)});
    return out;
  }
  for (std::size_t i = 0; i < count; ++i) {
    Box b = ground_truth[i % ground_truth.size()];
    if (i >= ground_truth.size()) {
      b.cx += jitter * b.w * rng.normal();
      b.cy += jitter * b.h * rng.normal();
      b.w *= 1.0 + jitter * rng.normal();
      b.h *= 1.0 + jitter * rng.normal();
      b = clamp_box(b);
    }
    out.push_back(b);
  }
  return out;
}

Tensor time_embedding(std::size_t t, std::size_t total_steps, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw std::invalid_argument("time_embedding: dim must be even and positive");
  const double x = static_cast<double>(t) / static_cast<double>(total_steps);
  Tensor out(Shape{1, dim});
  for (std::size_t k = 0; k < dim / 2; ++k) {
    const double freq = std::pow(2.0, static_cast<double>(k)) * std::numbers::pi;
    out[2 * k] = std::sin(freq * x);
    out[2 * k + 1] = std::cos(freq * x);
  }
  return out;
}

}  // namespace fusedet
