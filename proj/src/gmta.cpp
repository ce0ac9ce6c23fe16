#include "fusedet/gmta.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace fusedet {

namespace {

double dot_columns(const std::vector<double>& a, std::size_t rows, std::size_t cols, std::size_t i, std::size_t j) {
  double s = 0.0;
  for (std::size_t r = 0; r < rows; ++r) s += a[r * cols + i] * a[r * cols + j];
  return s;
}

void rotate_columns(std::vector<double>& a, std::size_t rows, std::size_t cols, std::size_t i, std::size_t j, double c,
                    double s) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double ai = a[r * cols + i];
    const double aj = a[r * cols + j];
    a[r * cols + i] = c * ai - s * aj;
    a[r * cols + j] = s * ai + c * aj;
  }
}

// Replaces column `j` of the row-major P x T matrix with a unit vector orthogonal
// to the columns in `keep`.
void complete_column(std::vector<double>& u, std::size_t rows, std::size_t cols, std::size_t j,
                     const std::vector<std::size_t>& keep) {
  for (std::size_t e = 0; e < rows; ++e) {
    std::vector<double> cand(rows, 0.0);
    cand[e] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t k : keep) {
        double d = 0.0;
        for (std::size_t r = 0; r < rows; ++r) d += cand[r] * u[r * cols + k];
        for (std::size_t r = 0; r < rows; ++r) cand[r] -= d * u[r * cols + k];
      }
    }
    double n = 0.0;
    for (double v : cand) n += v * v;
    n = std::sqrt(n);
    if (n > 0.5) {
      for (std::size_t r = 0; r < rows; ++r) u[r * cols + j] = cand[r] / n;
      return;
    }
  }
  throw std::logic_error("svd: could not complete orthonormal basis");
}

}  // namespace

GradientMatrix::GradientMatrix(Tensor matrix) : matrix_(std::move(matrix)) {
  if (matrix_.rank() != 2) throw ShapeError("GradientMatrix: expected a P x T matrix, got " + shape_string(matrix_.shape()));
  if (matrix_.dim(0) < matrix_.dim(1))
    throw ShapeError("GradientMatrix: need at least as many rows as tasks, got " + shape_string(matrix_.shape()));
  if (!matrix_.all_finite()) throw std::domain_error("GradientMatrix: non-finite gradient entry");
}

std::vector<double> GradientMatrix::column(std::size_t j) const {
  if (j >= cols()) throw std::out_of_range("GradientMatrix::column: index out of range");
  std::vector<double> out(rows());
  for (std::size_t r = 0; r < rows(); ++r) out[r] = matrix_.at(r, j);
  return out;
}

GradientMatrix build_gradient_matrix(std::span<const double> fusion_grad, std::span<const double> detection_grad) {
  if (fusion_grad.size() != detection_grad.size())
    throw ShapeError("build_gradient_matrix: gradient lengths differ (" + std::to_string(fusion_grad.size()) + " vs " +
                     std::to_string(detection_grad.size()) + ")");
  if (fusion_grad.empty()) throw ShapeError("build_gradient_matrix: empty gradients");
  Tensor g(Shape{fusion_grad.size(), 2});
  for (std::size_t r = 0; r < fusion_grad.size(); ++r) {
    g.at(r, 0) = fusion_grad[r];
    g.at(r, 1) = detection_grad[r];
  }
  return GradientMatrix(std::move(g));
}

ThinSvd svd(const Tensor& g, int max_sweeps) {
  if (g.rank() != 2) throw ShapeError("svd: expected a matrix, got " + shape_string(g.shape()));
  const std::size_t P = g.dim(0), T = g.dim(1);
  if (P < T) throw ShapeError("svd: expected rows >= cols, got " + shape_string(g.shape()));
  if (!g.all_finite()) throw std::domain_error("svd: non-finite entry");

  std::vector<double> a(g.data().begin(), g.data().end());
  std::vector<double> v(T * T, 0.0);
  for (std::size_t i = 0; i < T; ++i) v[i * T + i] = 1.0;

  // Off-diagonal threshold scaled by the row count: a dot product of length P
  // cannot resolve orthogonality below about P * eps.
  const double tol = static_cast<double>(P) * std::numeric_limits<double>::epsilon();
  bool converged = false;
  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t i = 0; i + 1 < T; ++i) {
      for (std::size_t j = i + 1; j < T; ++j) {
        const double alpha = dot_columns(a, P, T, i, i);
        const double beta = dot_columns(a, P, T, j, j);
        const double gamma = dot_columns(a, P, T, i, j);
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate_columns(a, P, T, i, j, c, s);
        rotate_columns(v, T, T, i, j, c, s);
      }
    }
  }
  if (!converged) throw std::runtime_error("svd: Jacobi iteration did not converge in " + std::to_string(max_sweeps) + " sweeps");

  std::vector<double> sv(T);
  for (std::size_t j = 0; j < T; ++j) sv[j] = std::sqrt(dot_columns(a, P, T, j, j));
  std::vector<std::size_t> order(T);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sv[x] > sv[y]; });

  ThinSvd out;
  out.u = Tensor(Shape{P, T});
  out.v = Tensor(Shape{T, T});
  out.singular_values.resize(T);
  std::vector<double> u(P * T, 0.0);
  for (std::size_t k = 0; k < T; ++k) {
    const std::size_t src = order[k];
    out.singular_values[k] = sv[src];
    for (std::size_t r = 0; r < T; ++r) out.v.at(r, k) = v[r * T + src];
    if (sv[src] > 0.0)
      for (std::size_t r = 0; r < P; ++r) u[r * T + k] = a[r * T + src] / sv[src];
  }
  const std::size_t rank = numerical_rank(out.singular_values);
  std::vector<std::size_t> keep(rank);
  std::iota(keep.begin(), keep.end(), 0);
  for (std::size_t k = rank; k < T; ++k) {
    complete_column(u, P, T, k, keep);
    keep.push_back(k);
  }
  std::copy(u.begin(), u.end(), out.u.data().begin());
  return out;
}

std::size_t numerical_rank(std::span<const double> singular_values) {
  if (singular_values.empty()) return 0;
  const double top = *std::max_element(singular_values.begin(), singular_values.end());
  if (top <= 0.0) return 0;
  return static_cast<std::size_t>(
      std::count_if(singular_values.begin(), singular_values.end(), [&](double s) { return s > kRankTolerance * top; }));
}

double condition_number(const Tensor& g) {
  const ThinSvd d = svd(g);
  const std::size_t rank = numerical_rank(d.singular_values);
  if (rank == 0) throw std::domain_error("condition_number: zero matrix, no gradient signal");
  if (rank < d.singular_values.size()) return std::numeric_limits<double>::infinity();
  return d.singular_values.front() / d.singular_values.back();
}

nlohmann::json AlignmentReport::to_json() const {
  auto finite_or_null = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); };
  return nlohmann::json{{"singular_values", singular_values},
                        {"kappa_before", finite_or_null(kappa_before)},
                        {"kappa_after", finite_or_null(kappa_after)},
                        {"rank", rank},
                        {"sigma", sigma},
                        {"frobenius_distance", frobenius_distance}};
}

Alignment align(const Tensor& g) {
  const GradientMatrix checked{g};
  const std::size_t P = g.dim(0), T = g.dim(1);
  const ThinSvd d = svd(g);
  const std::size_t rank = numerical_rank(d.singular_values);
  if (rank == 0) throw std::domain_error("align: zero matrix, no gradient signal");

  Alignment out;
  AlignmentReport& rep = out.report;
  rep.singular_values = d.singular_values;
  rep.rank = rank;
  rep.sigma = d.singular_values[rank - 1];
  rep.kappa_before =
      rank < T ? std::numeric_limits<double>::infinity() : d.singular_values.front() / d.singular_values.back();

  out.aligned = Tensor(Shape{P, T});
  for (std::size_t r = 0; r < P; ++r)
    for (std::size_t c = 0; c < T; ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < rank; ++k) s += d.u.at(r, k) * d.v.at(c, k);
      out.aligned.at(r, c) = rep.sigma * s;
    }

  const ThinSvd after = svd(out.aligned);
  rep.kappa_after = after.singular_values.front() / after.singular_values[rank - 1];

  double dist = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double e = g[i] - out.aligned[i];
    dist += e * e;
  }
  rep.frobenius_distance = std::sqrt(dist);
  return out;
}

std::vector<double> combine(const Tensor& g, std::span<const double> weights) {
  if (g.rank() != 2 || g.dim(1) != weights.size())
    throw ShapeError("combine: matrix " + shape_string(g.shape()) + " does not match " + std::to_string(weights.size()) +
                     " weights");
  std::vector<double> out(g.dim(0), 0.0);
  for (std::size_t r = 0; r < g.dim(0); ++r)
    for (std::size_t c = 0; c < weights.size(); ++c) out[r] += g.at(r, c) * weights[c];
  return out;
}

void TaskWeights::validate(std::size_t tasks) const {
  if (w.size() != tasks)
    throw std::invalid_argument("task weights: expected " + std::to_string(tasks) + " entries, got " + std::to_string(w.size()));
  for (double x : w)
    if (!std::isfinite(x) || x < 0.0) throw std::invalid_argument("task weights must be finite and nonnegative");
  if (std::accumulate(w.begin(), w.end(), 0.0) <= 0.0) throw std::invalid_argument("task weights sum to zero");
}

GmtaStepResult gmta_step(ParamSet& params, const Bindings& bindings, const Var& loss_u, const Var& loss_d,
                         const GmtaConfig& config, std::size_t step, Optimizer& optimizer) {
  config.weights.validate(2);
  if (config.period == 0) throw std::invalid_argument("gmta period must be at least 1");

  GmtaStepResult res;
  res.loss_u = loss_u.value().item();
  res.loss_d = loss_d.value().item();
  const GradMap grad_u = backward(loss_u, bindings);
  const GradMap grad_d = backward(loss_d, bindings);

  const auto& shared = params.shared_names();
  if (!shared.empty()) {
    const std::vector<double> flat_u = flatten_grads(grad_u, shared);
    const std::vector<double> flat_d = flatten_grads(grad_d, shared);
    const GradientMatrix gm = build_gradient_matrix(flat_u, flat_d);
    res.grad_norm_u = std::sqrt(std::inner_product(flat_u.begin(), flat_u.end(), flat_u.begin(), 0.0));
    res.grad_norm_d = std::sqrt(std::inner_product(flat_d.begin(), flat_d.end(), flat_d.begin(), 0.0));

    const ThinSvd d = svd(gm.matrix());
    res.singular_values = d.singular_values;
    const std::size_t rank = numerical_rank(d.singular_values);
    if (rank > 0)
      res.kappa_before = rank < 2 ? std::numeric_limits<double>::infinity()
                                  : d.singular_values.front() / d.singular_values.back();

    const bool align_now = config.enabled && step % config.period == 0;
    if (align_now) {
      Alignment a = align(gm.matrix());
      res.aligned = true;
      for (std::size_t c = 0; c < 2; ++c) {
        double n = 0.0;
        for (std::size_t r = 0; r < gm.rows(); ++r) n += a.aligned.at(r, c) * a.aligned.at(r, c);
        res.aligned_column_norms.push_back(std::sqrt(n));
      }
      res.shared_direction = combine(a.aligned, config.weights.w);
      res.report = std::move(a.report);
    } else {
      res.shared_direction = combine(gm.matrix(), config.weights.w);
    }
    const GradMap shared_dirs = unflatten(res.shared_direction, params, shared);
    for (const auto& [name, dir] : shared_dirs) optimizer.apply(params, name, dir);
  }

  for (const std::string& name : params.private_names()) {
    const Tensor& gu = grad_u.at(name);
    const Tensor& gd = grad_d.at(name);
    Tensor dir(gu.shape());
    for (std::size_t i = 0; i < dir.size(); ++i) dir[i] = gu[i] + gd[i];
    optimizer.apply(params, name, dir);
    res.private_directions.emplace(name, std::move(dir));
  }
  optimizer.step_done();
  return res;
}

}  // namespace fusedet
