#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ff {

#ifdef FF_SCALAR_DOUBLE
using Scalar = double;
#else
using Scalar = float;
#endif

using Shape = std::vector<std::int64_t>;

// Cache-line aligned allocation. Vectorised reductions pick their summation
// order from the buffer address, so every numeric buffer starts on the same
// alignment to keep results bit-reproducible across runs.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;
using Rng = std::mt19937_64;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

// Seeds an independent generator from a root seed plus a stream path, so
// (seed, step, item) triples map to reproducible, uncorrelated streams.
Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> stream = {});

// Dense row-major N-d array with value semantics.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = Scalar(0));
  Tensor(Shape shape, std::vector<Scalar> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), Scalar(1)); }
  static Tensor scalar(Scalar v) { return Tensor(Shape{}, std::vector<Scalar>{v}); }
  static Tensor randn(Shape shape, Rng& rng, Scalar stddev = Scalar(1));
  static Tensor uniform(Shape shape, Rng& rng, Scalar lo, Scalar hi);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  // Negative axes count from the end.
  std::int64_t dim(int axis) const;
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  Scalar* ptr() { return data_.data(); }
  const Scalar* ptr() const { return data_.data(); }
  std::span<Scalar> data() { return data_; }
  std::span<const Scalar> data() const { return data_; }

  Scalar& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  Scalar operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }
  Scalar& at(std::initializer_list<std::int64_t> index);
  Scalar at(std::initializer_list<std::int64_t> index) const;
  Scalar item() const;

  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  void fill(Scalar v);
  bool all_finite() const;
  bool bit_equal(const Tensor& other) const;

 private:
  std::int64_t offset(std::initializer_list<std::int64_t> index) const;

  Shape shape_;
  AlignedVector<Scalar> data_;
};

// Elementwise helpers on plain tensors (no gradient tracking).
Scalar max_abs_diff(const Tensor& a, const Tensor& b);
Tensor select(const Tensor& t, int axis, std::int64_t index);  // drops the axis
Tensor stack(const std::vector<Tensor>& items);                // new leading axis

}  // namespace ff
