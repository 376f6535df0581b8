#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "tdhnode/autodiff.hpp"
#include "tdhnode/errors.hpp"

namespace tdhnode {

/// Named learnable tensors. std::map keeps addresses stable (tapes hold
/// pointers to parameters) and iteration in a fixed, name-sorted order.
template <class T>
class ParameterStore {
 public:
  Parameter<T>& add(const std::string& name, Matrix<T> value) {
    auto [it, inserted] = params_.try_emplace(name);
    if (!inserted) throw Error(ErrorCode::ConfigInvalid, "duplicate parameter " + name);
    it->second.name = name;
    it->second.value = std::move(value);
    it->second.zero_grad();
    return it->second;
  }

  /// Uniform(-a, a) with a = 1/sqrt(fan_in).
  Parameter<T>& add_uniform(const std::string& name, Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in,
                            std::mt19937_64& rng) {
    const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-a, a);
    Matrix<T> m(rows, cols);
    // Column-major fill, one draw per entry, so the stream is reproducible.
    for (Eigen::Index c = 0; c < cols; ++c)
      for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = static_cast<T>(dist(rng));
    return add(name, std::move(m));
  }

  Parameter<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error(ErrorCode::IndexOutOfRange, "no parameter " + name);
    return it->second;
  }
  const Parameter<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error(ErrorCode::IndexOutOfRange, "no parameter " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.contains(name); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  T grad_norm() const {
    T sq = 0;
    for (const auto& [_, p] : params_)
      if (p.grad.size()) sq += p.grad.squaredNorm();
    return std::sqrt(sq);
  }

  void scale_grad(T s) {
    for (auto& [_, p] : params_)
      if (p.grad.size()) p.grad *= s;
  }

  /// Copy of every value converted to another scalar type.
  template <class U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& [name, p] : params_) out.add(name, p.value.template cast<U>());
    return out;
  }

  /// Overwrites values from a store with the same names and shapes.
  template <class U>
  void assign_from(const ParameterStore<U>& other) {
    for (auto& [name, p] : params_) {
      const auto& src = other.at(name);
      if (src.value.rows() != p.value.rows() || src.value.cols() != p.value.cols()) {
        throw Error(ErrorCode::ShapeMismatch, "parameter " + name + " has a different shape");
      }
      p.value = src.value.template cast<T>();
    }
  }

 private:
  std::map<std::string, Parameter<T>> params_;
};

}  // namespace tdhnode
