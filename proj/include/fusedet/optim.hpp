#pragma once

#include <map>
#include <memory>
#include <string>

#include "fusedet/params.hpp"

namespace fusedet {

/// Applies a descent direction to one named parameter.
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void apply(ParamSet& params, const std::string& name, const Tensor& direction) = 0;
  /// Marks the end of an update step.
  virtual void step_done() {}
};

/// theta -= lr * direction.
class GradientDescent final : public Optimizer {
 public:
  explicit GradientDescent(double lr) : lr_(lr) {}
  void apply(ParamSet& params, const std::string& name, const Tensor& direction) override;

 private:
  double lr_;
};

/// Adam moments with decoupled weight decay.
class AdamW final : public Optimizer {
 public:
  AdamW(double lr, double weight_decay = 1e-4, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void apply(ParamSet& params, const std::string& name, const Tensor& direction) override;
  void step_done() override { ++t_; }

 private:
  struct Moments {
    Tensor m;
    Tensor v;
  };
  double lr_, weight_decay_, beta1_, beta2_, eps_;
  long t_ = 1;
  std::map<std::string, Moments> state_;
};

std::unique_ptr<Optimizer> make_optimizer(const std::string& kind, double lr);

}  // namespace fusedet
