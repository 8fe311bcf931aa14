#include "fashionflow/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "fashionflow/errors.hpp"

namespace ff {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative axis length in shape " + to_string(shape));
    n *= d;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> stream) {
  std::vector<std::uint32_t> words;
  auto push = [&](std::uint64_t v) {
    words.push_back(static_cast<std::uint32_t>(v & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(v >> 32));
  };
  push(seed);
  push(0x9e3779b97f4a7c15ull ^ stream.size());
  for (auto s : stream) push(s);
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

Tensor::Tensor(Shape shape, Scalar fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (numel(shape_) != static_cast<std::int64_t>(data_.size())) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     to_string(shape_));
  }
}

Tensor Tensor::randn(Shape shape, Rng& rng, Scalar stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : t.data_) v = static_cast<Scalar>(dist(rng)) * stddev;
  return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, Scalar lo, Scalar hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data_) v = static_cast<Scalar>(dist(rng));
  return t;
}

std::int64_t Tensor::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape_));
  }
  return shape_[static_cast<std::size_t>(a)];
}

std::int64_t Tensor::offset(std::initializer_list<std::int64_t> index) const {
  if (static_cast<int>(index.size()) != rank()) {
    throw ShapeError("index rank " + std::to_string(index.size()) + " != tensor rank " + std::to_string(rank()));
  }
  std::int64_t off = 0;
  std::size_t i = 0;
  for (auto v : index) {
    if (v < 0 || v >= shape_[i]) throw ShapeError("index out of range for shape " + to_string(shape_));
    off = off * shape_[i] + v;
    ++i;
  }
  return off;
}

Scalar& Tensor::at(std::initializer_list<std::int64_t> index) { return data_[static_cast<std::size_t>(offset(index))]; }
Scalar Tensor::at(std::initializer_list<std::int64_t> index) const {
  return data_[static_cast<std::size_t>(offset(index))];
}

Scalar Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  if (numel(shape) != size()) {
    throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  shape_ = std::move(shape);
  return std::move(*this);
}

void Tensor::fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](Scalar v) { return std::isfinite(v); });
}

bool Tensor::bit_equal(const Tensor& other) const {
  return shape_ == other.shape_ &&
         (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(Scalar)) == 0);
}

Scalar max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  Scalar m = 0;
  for (std::int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor select(const Tensor& t, int axis, std::int64_t index) {
  const int r = t.rank();
  const int a = axis < 0 ? axis + r : axis;
  const std::int64_t n = t.dim(a);
  if (index < 0 || index >= n) throw ShapeError("select index out of range for shape " + to_string(t.shape()));
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < a; ++i) outer *= t.shape()[static_cast<std::size_t>(i)];
  for (int i = a + 1; i < r; ++i) inner *= t.shape()[static_cast<std::size_t>(i)];
  Shape out_shape = t.shape();
  out_shape.erase(out_shape.begin() + a);
  Tensor out(out_shape);
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy_n(t.ptr() + (o * n + index) * inner, inner, out.ptr() + o * inner);
  }
  return out;
}

Tensor stack(const std::vector<Tensor>& items) {
  if (items.empty()) throw ShapeError("stack of zero tensors");
  Shape shape = items.front().shape();
  for (const auto& t : items) {
    if (t.shape() != shape) throw ShapeError("stack shape mismatch " + to_string(t.shape()) + " vs " + to_string(shape));
  }
  Shape out_shape = shape;
  out_shape.insert(out_shape.begin(), static_cast<std::int64_t>(items.size()));
  Tensor out(out_shape);
  const std::int64_t n = numel(shape);
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::copy_n(items[i].ptr(), n, out.ptr() + static_cast<std::int64_t>(i) * n);
  }
  return out;
}

}  // namespace ff
