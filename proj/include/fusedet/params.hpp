#pragma once

#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fusedet/tape.hpp"

namespace fusedet {

using GradMap = std::map<std::string, Tensor>;
using Bindings = std::map<std::string, Var>;

/// Named trainable tensors plus the subset marked as shared between tasks.
/// Iteration order is lexicographic by name.
class ParamSet {
 public:
  void add(const std::string& name, Tensor value, bool shared = false);
  bool contains(const std::string& name) const { return values_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  void set(const std::string& name, Tensor value);

  void mark_shared(const std::string& name);
  bool is_shared(const std::string& name) const { return shared_.count(name) != 0; }
  const std::set<std::string>& shared_names() const noexcept { return shared_; }
  std::vector<std::string> names() const;
  std::vector<std::string> private_names() const;
  const std::map<std::string, Tensor>& values() const noexcept { return values_; }

  std::size_t size() const noexcept { return values_.size(); }
  /// Total scalar count over the given names.
  std::size_t count(const std::set<std::string>& names) const;

  /// Registers every parameter as a leaf on `tape`.
  Bindings bind(Tape& tape, bool requires_grad = true) const;

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    return a.values_ == b.values_ && a.shared_ == b.shared_;
  }

 private:
  std::map<std::string, Tensor> values_;
  std::set<std::string> shared_;
};

/// Sweeps the tape from `root` and returns d root / d p for every bound parameter.
/// Parameters the graph never reached get zero tensors.
GradMap backward(const Var& root, const Bindings& bindings);

/// Concatenates the named gradients in lexicographic name order, each row-major.
std::vector<double> flatten_grads(const GradMap& grads, const std::set<std::string>& names);

/// Inverse of flatten_grads, taking shapes from `params`.
GradMap unflatten(std::span<const double> flat, const ParamSet& params, const std::set<std::string>& names);

}  // namespace fusedet
