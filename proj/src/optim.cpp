#include "fusedet/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace fusedet {

void GradientDescent::apply(ParamSet& params, const std::string& name, const Tensor& direction) {
  Tensor& p = params.get(name);
  if (p.shape() != direction.shape()) throw ShapeError("GradientDescent: direction shape mismatch for '" + name + "'");
  for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr_ * direction[i];
}

void AdamW::apply(ParamSet& params, const std::string& name, const Tensor& direction) {
  Tensor& p = params.get(name);
  if (p.shape() != direction.shape()) throw ShapeError("AdamW: direction shape mismatch for '" + name + "'");
  auto [it, fresh] = state_.try_emplace(name);
  if (fresh) {
    it->second.m = Tensor::zeros_like(p);
    it->second.v = Tensor::zeros_like(p);
  }
  Moments& s = it->second;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < p.size(); ++i) {
    s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * direction[i];
    s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * direction[i] * direction[i];
    const double mhat = s.m[i] / c1;
    const double vhat = s.v[i] / c2;
    p[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * p[i]);
  }
}

std::unique_ptr<Optimizer> make_optimizer(const std::string& kind, double lr) {
  if (kind == "sgd") return std::make_unique<GradientDescent>(lr);
  if (kind == "adamw") return std::make_unique<AdamW>(lr);
  throw std::invalid_argument("unknown optimizer '" + kind + "' (expected sgd or adamw)");
}

}  // namespace fusedet
