#include "fusedet/params.hpp"

#include <algorithm>

namespace fusedet {

void ParamSet::add(const std::string& name, Tensor value, bool shared) {
  if (!values_.emplace(name, std::move(value)).second) {
    throw std::invalid_argument("ParamSet: duplicate parameter '" + name + "'");
  }
  if (shared) shared_.insert(name);
}

const Tensor& ParamSet::get(const std::string& name) const {
  auto it = values_.find(name);
  if (it == values_.end()) throw std::out_of_range("ParamSet: unknown parameter '" + name + "'");
  return it->second;
}

Tensor& ParamSet::get(const std::string& name) {
  auto it = values_.find(name);
  if (it == values_.end()) throw std::out_of_range("ParamSet: unknown parameter '" + name + "'");
  return it->second;
}

void ParamSet::set(const std::string& name, Tensor value) {
  Tensor& slot = get(name);
  if (slot.shape() != value.shape()) {
    throw ShapeError("ParamSet: '" + name + "' expects shape " + shape_string(slot.shape()) + ", got " +
                     shape_string(value.shape()));
  }
  slot = std::move(value);
}

void ParamSet::mark_shared(const std::string& name) {
  if (!contains(name)) throw std::out_of_range("ParamSet: cannot share unknown parameter '" + name + "'");
  shared_.insert(name);
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(values_.size());
  for (const auto& [name, _] : values_) out.push_back(name);
  return out;
}

std::vector<std::string> ParamSet::private_names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : values_) {
    if (!is_shared(name)) out.push_back(name);
  }
  return out;
}

std::size_t ParamSet::count(const std::set<std::string>& names) const {
  std::size_t n = 0;
  for (const auto& name : names) n += get(name).size();
  return n;
}

Bindings ParamSet::bind(Tape& tape, bool requires_grad) const {
  Bindings out;
  for (const auto& [name, value] : values_) out.emplace(name, tape.leaf(value, requires_grad));
  return out;
}

GradMap backward(const Var& root, const Bindings& bindings) {
  root.tape()->backward(root);
  GradMap grads;
  for (const auto& [name, var] : bindings) grads.emplace(name, var.grad());
  return grads;
}

std::vector<double> flatten_grads(const GradMap& grads, const std::set<std::string>& names) {
  std::vector<double> flat;
  for (const auto& name : names) {
    auto it = grads.find(name);
    if (it == grads.end()) throw std::invalid_argument("flatten_grads: missing gradient for '" + name + "'");
    flat.insert(flat.end(), it->second.data().begin(), it->second.data().end());
  }
  return flat;
}

GradMap unflatten(std::span<const double> flat, const ParamSet& params, const std::set<std::string>& names) {
  if (flat.size() != params.count(names)) {
    throw ShapeError("unflatten: expected " + std::to_string(params.count(names)) + " values, got " +
                     std::to_string(flat.size()));
  }
  GradMap out;
  std::size_t offset = 0;
  for (const auto& name : names) {
    const Shape& shape = params.get(name).shape();
    const std::size_t n = shape_size(shape);
    out.emplace(name, Tensor(shape, std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(offset),
                                                        flat.begin() + static_cast<std::ptrdiff_t>(offset + n))));
    offset += n;
  }
  return out;
}

}  // namespace fusedet
