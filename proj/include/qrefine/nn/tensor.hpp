#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "qrefine/rng.hpp"

namespace qrefine::nn {

using real = double;

/// Row-major 2-d shape. Vectors are columns (rows x 1).
struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 1;

  std::size_t size() const { return rows * cols; }
  bool operator==(const Shape&) const = default;
};

inline std::string to_string(const Shape& s) {
  return "[" + std::to_string(s.rows) + "x" + std::to_string(s.cols) + "]";
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void check_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (!(a == b))
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

/// Dense array with an optional same-shape gradient buffer.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, real fill = 0.0) : shape_(shape), values_(shape.size(), fill) {}
  Tensor(Shape shape, std::vector<real> values) : shape_(shape), values_(std::move(values)) {
    if (values_.size() != shape_.size())
      throw ShapeError("Tensor: " + std::to_string(values_.size()) + " values for shape " +
                       to_string(shape_));
  }

  static Tensor column(std::vector<real> values) {
    Shape s{values.size(), 1};
    return Tensor(s, std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }
  std::size_t rows() const { return shape_.rows; }
  std::size_t cols() const { return shape_.cols; }

  std::span<real> values() { return values_; }
  std::span<const real> values() const { return values_; }
  real& operator[](std::size_t i) { return values_[i]; }
  real operator[](std::size_t i) const { return values_[i]; }
  real& at(std::size_t r, std::size_t c) { return values_[r * shape_.cols + c]; }
  real at(std::size_t r, std::size_t c) const { return values_[r * shape_.cols + c]; }

  bool has_grad() const { return !grad_.empty(); }
  void enable_grad() {
    if (grad_.size() != values_.size()) grad_.assign(values_.size(), 0.0);
  }
  std::span<real> grad() { return grad_; }
  std::span<const real> grad() const { return grad_; }
  void zero_grad() { std::fill(grad_.begin(), grad_.end(), 0.0); }

 private:
  Shape shape_;
  std::vector<real> values_;
  std::vector<real> grad_;
};

/// First/second moment buffers and step count for Adam.
struct AdamState {
  std::vector<real> m;
  std::vector<real> v;
  std::uint64_t step = 0;
};

/// A named trainable tensor. Gradients are accumulated, never overwritten,
/// so a parameter used several times in one graph sums its contributions.
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Shape shape) : name_(std::move(name)), tensor_(shape) {
    tensor_.enable_grad();
  }

  const std::string& name() const { return name_; }
  const Shape& shape() const { return tensor_.shape(); }
  std::size_t size() const { return tensor_.size(); }

  Tensor& tensor() { return tensor_; }
  const Tensor& tensor() const { return tensor_; }
  std::span<real> values() { return tensor_.values(); }
  std::span<const real> values() const { return tensor_.values(); }
  std::span<real> grad() { return tensor_.grad(); }
  std::span<const real> grad() const { return tensor_.grad(); }
  void zero_grad() { tensor_.zero_grad(); }

  AdamState& adam() { return adam_; }
  const AdamState& adam() const { return adam_; }

  bool frozen() const { return frozen_; }
  void set_frozen(bool f) { frozen_ = f; }

  void fill(real v) { std::fill(values().begin(), values().end(), v); }
  void init_uniform(Rng& rng, real scale) {
    for (auto& v : values()) v = rng.uniform(-scale, scale);
  }

 private:
  std::string name_;
  Tensor tensor_;
  AdamState adam_;
  bool frozen_ = false;
};

using ParameterList = std::vector<Parameter*>;

inline void zero_grads(const ParameterList& params) {
  for (auto* p : params) p->zero_grad();
}

inline void set_frozen(const ParameterList& params, bool frozen) {
  for (auto* p : params) p->set_frozen(frozen);
}

/// FNV-1a over names, shapes and raw value bytes.
inline std::uint64_t checksum(const ParameterList& params) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, std::size_t n) {
    auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto* p : params) {
    mix(p->name().data(), p->name().size());
    const auto s = p->shape();
    mix(&s.rows, sizeof s.rows);
    mix(&s.cols, sizeof s.cols);
    mix(p->values().data(), p->values().size_bytes());
  }
  return h;
}

inline std::size_t parameter_count(const ParameterList& params) {
  std::size_t n = 0;
  for (const auto* p : params) n += p->size();
  return n;
}

}  // namespace qrefine::nn
