#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "tapip3d/error.hpp"

namespace tapip3d {

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using RowVector = Eigen::Matrix<S, 1, Eigen::Dynamic>;
template <typename S>
using MatrixMap = Eigen::Map<Matrix<S>>;
template <typename S>
using ConstMatrixMap = Eigen::Map<const Matrix<S>>;

using Rng = std::mt19937_64;

inline std::string shape_string(std::span<const std::size_t> shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

inline std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
  return "[" + std::to_string(rows) + "," + std::to_string(cols) + "]";
}

template <typename S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, S fill = S(0)) : shape_(std::move(shape)) {
    data_.assign(element_count(shape_), fill);
  }

  static std::size_t element_count(std::span<const std::size_t> shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::span<S> data() { return data_; }
  std::span<const S> data() const { return data_; }
  std::vector<S>& storage() { return data_; }

  /// Views the tensor as a matrix: first extent as rows, the rest flattened.
  Eigen::Index rows() const { return shape_.empty() ? 1 : static_cast<Eigen::Index>(shape_[0]); }
  Eigen::Index cols() const { return rows() == 0 ? 0 : static_cast<Eigen::Index>(size()) / rows(); }
  MatrixMap<S> matrix() { return MatrixMap<S>(data_.data(), rows(), cols()); }
  ConstMatrixMap<S> matrix() const { return ConstMatrixMap<S>(data_.data(), rows(), cols()); }

  void fill(S value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](S v) { return std::isfinite(v); });
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<S> data_;
};

/// Named parameter tensors, each with a gradient slot of identical shape.
/// Iteration order is declaration order, which fixes serialization layout.
template <typename S>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<S> value;
    Tensor<S> grad;
  };

  Tensor<S>& declare(const std::string& name, std::vector<std::size_t> shape) {
    auto it = index_.find(name);
    if (it != index_.end()) {
      require(entries_[it->second].value.shape() == shape, ErrorCode::kShape,
              "parameter '" + name + "' redeclared with shape " + shape_string(shape));
      return entries_[it->second].value;
    }
    index_.emplace(name, entries_.size());
    entries_.push_back({name, Tensor<S>(shape), Tensor<S>(shape)});
    return entries_.back().value;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Entry& entry(const std::string& name) {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorCode::kConfig, "unknown parameter '" + name + "'");
    return entries_[it->second];
  }
  const Entry& entry(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorCode::kConfig, "unknown parameter '" + name + "'");
    return entries_[it->second];
  }

  ConstMatrixMap<S> value(const std::string& name) const { return entry(name).value.matrix(); }
  MatrixMap<S> mutable_value(const std::string& name) { return entry(name).value.matrix(); }
  MatrixMap<S> grad(const std::string& name) { return entry(name).grad.matrix(); }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.grad.fill(S(0));
  }

  double grad_norm() const {
    double sq = 0.0;
    for (const auto& e : entries_)
      for (S g : e.grad.data()) sq += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(sq);
  }

  template <typename T>
  ParamStore<T> cast() const {
    ParamStore<T> out;
    for (const auto& e : entries_) {
      auto& v = out.declare(e.name, e.value.shape());
      for (std::size_t i = 0; i < e.value.size(); ++i) v.data()[i] = static_cast<T>(e.value.data()[i]);
    }
    return out;
  }

  /// Copies values from `other` (same names and shapes required).
  void assign_from(const ParamStore& other) {
    for (auto& e : entries_) {
      const auto& src = other.entry(e.name);
      require(src.value.shape() == e.value.shape(), ErrorCode::kShape,
              "parameter '" + e.name + "' shape " + shape_string(src.value.shape()) + " vs " +
                  shape_string(e.value.shape()));
      std::copy(src.value.data().begin(), src.value.data().end(), e.value.data().begin());
    }
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

enum class Init { kTruncatedNormal, kZeros, kOnes };

/// Truncated normal (resampled outside two standard deviations).
template <typename S>
void initialize(Tensor<S>& t, Init init, Rng& rng, double stddev = 0.02) {
  switch (init) {
    case Init::kZeros: t.fill(S(0)); return;
    case Init::kOnes: t.fill(S(1)); return;
    case Init::kTruncatedNormal: {
      std::normal_distribution<double> gauss(0.0, stddev);
      for (S& v : t.data()) {
        double x = gauss(rng);
        while (std::abs(x) > 2.0 * stddev) x = gauss(rng);
        v = static_cast<S>(x);
      }
      return;
    }
  }
}

template <typename S>
bool all_finite(const Matrix<S>& m) {
  return m.allFinite();
}

}  // namespace tapip3d
