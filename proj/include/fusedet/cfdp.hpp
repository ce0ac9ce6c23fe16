#pragma once

#include <functional>
#include <vector>

#include "fusedet/boxes.hpp"
#include "fusedet/rng.hpp"
#include "fusedet/tape.hpp"

namespace fusedet {

/// Boxes live in [-kSignalScale, kSignalScale] while they are being noised.
inline constexpr double kSignalScale = 2.0;
inline constexpr double kCosineOffset = 0.008;
inline constexpr double kMaxBeta = 0.999;
inline constexpr double kMinBoxSize = 1e-3;

enum class ScheduleKind { Cosine, Linear };

/// beta/alpha/alpha_bar are stored for t = 1..T at index t-1.
struct DiffusionSchedule {
  std::size_t steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  /// Cumulative product at time t in [0, T]; 1 at t = 0.
  double alpha_bar_at(std::size_t t) const;
};

DiffusionSchedule build_schedule(std::size_t steps, ScheduleKind kind = ScheduleKind::Cosine);

/// (2z - 1) * kSignalScale, elementwise. unscale_boxes inverts it up to rounding
/// in the last bit.
Tensor scale_boxes(const Tensor& z);
Tensor unscale_boxes(const Tensor& z);

/// sqrt(abar_t) * scale(z0) + sqrt(1 - abar_t) * eps, for t in [0, T].
Tensor forward_noise(const Tensor& z0, std::size_t t, const Tensor& eps, const DiffusionSchedule& schedule);

/// Half the mean squared error over every coordinate.
Var detector_loss(const Var& prediction, const Var& target);
double detector_loss(const Tensor& prediction, const Tensor& target);

/// Deterministic DDIM update from t to t_prev < t given a clean-signal prediction.
Tensor ddim_step(const Tensor& z_t, const Tensor& predicted_z0, std::size_t t, std::size_t t_prev,
                 const DiffusionSchedule& schedule);

/// Decreasing times T = t_0 > t_1 > ... > t_steps = 0.
std::vector<std::size_t> sampling_grid(std::size_t total_steps, std::size_t sampling_steps);

/// Maps (z_t, t) in scaled space to a prediction of scale(z0).
using Denoiser = std::function<Tensor(const Tensor& z_t, std::size_t t)>;

/// Reverse process from seeded Gaussian z_T; returns the scaled-space result.
Tensor sample_latent(const Denoiser& denoiser, std::size_t boxes, std::size_t sampling_steps,
                     const DiffusionSchedule& schedule, std::uint64_t seed);

/// sample_latent, unscaled and clamped to valid boxes.
BoxSet sample(const Denoiser& denoiser, std::size_t boxes, std::size_t sampling_steps, const DiffusionSchedule& schedule,
              std::uint64_t seed);

/// cx, cy into [0, 1]; w, h into [kMinBoxSize, 1].
Box clamp_box(Box b);

/// Fixed-size training target: ground-truth boxes first, then repeats jittered by
/// `jitter` relative to each box size. An empty ground truth yields random boxes.
BoxSet pad_boxes(const BoxSet& ground_truth, std::size_t count, SplitMix64& rng, double jitter = 0.05);

/// Sinusoidal embedding of t / T with `dim` (even) features.
Tensor time_embedding(std::size_t t, std::size_t total_steps, std::size_t dim);

}  // namespace fusedet
