#pragma once

#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "fusedet/optim.hpp"
#include "fusedet/params.hpp"

namespace fusedet {

/// Singular values at or below this fraction of the largest count as zero.
inline constexpr double kRankTolerance = 1e-12;

/// P x T matrix whose columns are per-task gradients of the shared parameters
/// (column 0: fusion task, column 1: detection task).
class GradientMatrix {
 public:
  explicit GradientMatrix(Tensor matrix);

  std::size_t rows() const noexcept { return matrix_.dim(0); }
  std::size_t cols() const noexcept { return matrix_.dim(1); }
  const Tensor& matrix() const noexcept { return matrix_; }
  std::vector<double> column(std::size_t j) const;

 private:
  Tensor matrix_;
};

GradientMatrix build_gradient_matrix(std::span<const double> fusion_grad, std::span<const double> detection_grad);

/// Thin SVD: u is P x T with orthonormal columns, v is T x T orthogonal, singular
/// values are nonnegative and descending.
struct ThinSvd {
  Tensor u;
  std::vector<double> singular_values;
  Tensor v;
};

/// One-sided Jacobi SVD. Throws std::runtime_error if it fails to converge within
/// `max_sweeps` sweeps (a two-column matrix converges in one).
ThinSvd svd(const Tensor& g, int max_sweeps = 60);

std::size_t numerical_rank(std::span<const double> singular_values);

/// sigma_max / sigma_min; +infinity when the matrix is rank deficient.
/// Throws std::domain_error for an all-zero matrix.
double condition_number(const Tensor& g);

struct AlignmentReport {
  std::vector<double> singular_values;
  double kappa_before = 0.0;
  double kappa_after = 0.0;
  std::size_t rank = 0;
  double frobenius_distance = 0.0;
  double sigma = 0.0;

  nlohmann::json to_json() const;
};

struct Alignment {
  Tensor aligned;
  AlignmentReport report;
};

/// Closest matrix (Frobenius) with orthogonal columns of equal norm sigma, where
/// sigma is the smallest non-zero singular value: sigma * U * V^T. A rank-deficient
/// input keeps only its non-null directions.
Alignment align(const Tensor& g);

/// g * w.
std::vector<double> combine(const Tensor& g, std::span<const double> weights);

struct TaskWeights {
  std::vector<double> w{0.5, 0.5};
  void validate(std::size_t tasks) const;
};

struct GmtaConfig {
  bool enabled = true;
  /// Align on steps where step % period == 0.
  std::size_t period = 1;
  TaskWeights weights;
};

struct GmtaStepResult {
  double loss_u = 0.0;
  double loss_d = 0.0;
  double grad_norm_u = 0.0;
  double grad_norm_d = 0.0;
  /// Condition number of the raw matrix; nullopt when both gradients vanish.
  std::optional<double> kappa_before;
  std::vector<double> singular_values;
  bool aligned = false;
  std::optional<AlignmentReport> report;
  std::vector<double> aligned_column_norms;
  /// Flattened shared update direction (before the learning rate).
  std::vector<double> shared_direction;
  /// Update directions of task-private parameters.
  GradMap private_directions;
};

/// One joint update. Shared parameters move along G w, or along the aligned matrix
/// times w on alignment steps; task-private parameters move along their own task
/// gradient.
GmtaStepResult gmta_step(ParamSet& params, const Bindings& bindings, const Var& loss_u, const Var& loss_d,
                         const GmtaConfig& config, std::size_t step, Optimizer& optimizer);

}  // namespace fusedet
