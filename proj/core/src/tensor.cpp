#include "deformcaps/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace dcaps {

int64_t Tensor::numel_of(const std::vector<int64_t>& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    if (d <= 0) throw std::invalid_argument("tensor dims must be positive, got " + shape_str(s));
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<int64_t> s) : shape(std::move(s)), data(static_cast<size_t>(numel_of(shape)), 0.0) {}

Tensor::Tensor(std::vector<int64_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  if (static_cast<int64_t>(data.size()) != numel_of(shape)) {
    throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
}

Tensor Tensor::zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }

Tensor Tensor::full(std::vector<int64_t> s, double v) {
  Tensor t(std::move(s));
  std::fill(t.data.begin(), t.data.end(), v);
  return t;
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

int64_t Tensor::offset(std::initializer_list<int64_t> idx) const {
  if (static_cast<int>(idx.size()) != rank()) {
    throw std::invalid_argument("index rank " + std::to_string(idx.size()) +
                                " does not match tensor rank " + std::to_string(rank()));
  }
  int64_t off = 0;
  int i = 0;
  for (int64_t v : idx) {
    off = off * shape[static_cast<size_t>(i)] + v;
    ++i;
  }
  return off;
}

void Tensor::ensure_grad() {
  if (!grad) grad.emplace(data.size(), 0.0);
}

void Tensor::zero_grad() {
  if (grad) std::fill(grad->begin(), grad->end(), 0.0);
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string shape_str(const std::vector<int64_t>& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::vector<int64_t> strides_of(const std::vector<int64_t>& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) {
    st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * s[static_cast<size_t>(i) + 1];
  }
  return st;
}

std::vector<int64_t> broadcast_shape(const std::vector<int64_t>& a, const std::vector<int64_t>& b) {
  const size_t r = std::max(a.size(), b.size());
  std::vector<int64_t> out(r, 1);
  for (size_t i = 0; i < r; ++i) {
    const int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw std::invalid_argument("shapes not broadcast-compatible: " + shape_str(a) + " vs " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

}  // namespace dcaps
