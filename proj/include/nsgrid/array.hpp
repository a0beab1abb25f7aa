#pragma once

// Dense 64-bit float array: the carrier type for every tensor in the
// project. Rank 1 and 2 cover all uses; no broadcasting machinery beyond
// what the tape ops implement explicitly.

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nsgrid/rng.hpp"

namespace nsgrid {

struct Array {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Array() = default;
  explicit Array(std::vector<std::size_t> s) : shape(std::move(s)) {
    data.assign(count(shape), 0.0);
  }
  Array(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != count(shape))
      throw std::invalid_argument("Array: data length does not match shape");
  }

  static std::size_t count(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
  }

  static Array zeros(std::vector<std::size_t> s) { return Array(std::move(s)); }
  static Array full(std::vector<std::size_t> s, double v) {
    Array a(std::move(s));
    for (auto& x : a.data) x = v;
    return a;
  }
  static Array scalar(double v) { return Array({1}, {v}); }
  static Array vec(std::vector<double> d) {
    std::size_t n = d.size();
    return Array({n}, std::move(d));
  }
  static Array gaussian(std::vector<std::size_t> s, Rng& rng, double stddev) {
    Array a(std::move(s));
    for (auto& x : a.data) x = rng.normal(0.0, stddev);
    return a;
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  bool is_scalar() const { return numel() == 1; }

  // Matrix accessors treat rank-1 as a single row.
  std::size_t rows() const { return rank() == 2 ? shape[0] : 1; }
  std::size_t cols() const {
    return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : 1);
  }

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  double value() const {
    if (!is_scalar()) throw std::logic_error("Array::value: not a scalar");
    return data[0];
  }

  bool same_shape(const Array& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double x : data)
      if (!std::isfinite(x)) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i)
      os << shape[i] << (i + 1 < shape.size() ? "," : "");
    os << ')';
    return os.str();
  }
};

inline void require_same_shape(const Array& a, const Array& b,
                               const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                a.shape_str() + " vs " + b.shape_str());
}

}  // namespace nsgrid
