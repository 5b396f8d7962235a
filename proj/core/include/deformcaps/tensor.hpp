#pragma once

#include <cstdint>
#include <initializer_list>
#include <optional>
#include <string>
#include <vector>

namespace dcaps {

/// Dense row-major tensor of 64-bit floats. Scalars use shape {1}.
/// The optional grad buffer, when engaged, always has the same length
/// as data.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;
  std::optional<std::vector<double>> grad;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s);
  Tensor(std::vector<int64_t> s, std::vector<double> d);

  static Tensor zeros(std::vector<int64_t> s);
  static Tensor full(std::vector<int64_t> s, double v);
  static Tensor scalar(double v);

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }

  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }
  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }

  int64_t offset(std::initializer_list<int64_t> idx) const;
  double at(std::initializer_list<int64_t> idx) const { return data[static_cast<size_t>(offset(idx))]; }
  double& at(std::initializer_list<int64_t> idx) { return data[static_cast<size_t>(offset(idx))]; }

  /// Engages a zero-filled gradient buffer if not already present.
  void ensure_grad();
  void zero_grad();

  bool all_finite() const;

  static int64_t numel_of(const std::vector<int64_t>& s);
};

std::string shape_str(const std::vector<int64_t>& s);
std::vector<int64_t> strides_of(const std::vector<int64_t>& s);

/// Shape of the result of broadcasting a with b: shapes are right-aligned,
/// missing leading dims are treated as 1, and each dim must match or be 1.
/// The result dim is the elementwise max. Throws std::invalid_argument on
/// incompatible shapes, reporting both.
std::vector<int64_t> broadcast_shape(const std::vector<int64_t>& a, const std::vector<int64_t>& b);

}  // namespace dcaps
