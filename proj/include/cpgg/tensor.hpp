#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cpgg {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

/// 64-byte aligned storage. Eigen's vectorized kernels peel unaligned
/// heads, so with plain malloc alignment a reduction's rounding would depend
/// on where the buffer landed.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major n-dimensional array. Storage is contiguous; matrix views
/// are Eigen maps over the same buffer, so no copies happen at op boundaries.
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;
  using VectorMap = Eigen::Map<Vector>;
  using ConstVectorMap = Eigen::Map<const Vector>;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(static_cast<size_t>(shape_size(shape_)), fill);
  }

  using Storage = std::vector<Scalar, AlignedAllocator<Scalar>>;

  Tensor(Shape shape, const std::vector<Scalar>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_length();
  }
  Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) { check_length(); }
  Tensor(Shape shape, std::initializer_list<Scalar> data) : shape_(std::move(shape)), data_(data) { check_length(); }

  static Tensor scalar(Scalar v) { return Tensor(Shape{1}, Storage{v}); }


  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int axis) const { return shape_.at(static_cast<size_t>(axis)); }
  Index size() const { return static_cast<Index>(data_.size()); }
  bool empty() const { return data_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> values() { return data_; }
  std::span<const Scalar> values() const { return data_; }

  Scalar& operator[](Index i) { return data_[static_cast<size_t>(i)]; }
  const Scalar& operator[](Index i) const { return data_[static_cast<size_t>(i)]; }

  /// Rows = first extent, cols = product of the rest.
  Index rows() const { return shape_.empty() ? 0 : shape_[0]; }
  Index row_size() const { return shape_.empty() ? 0 : size() / shape_[0]; }

  VectorMap vec() { return VectorMap(data_.data(), size()); }
  ConstVectorMap vec() const { return ConstVectorMap(data_.data(), size()); }
  MatrixMap mat() { return MatrixMap(data_.data(), rows(), row_size()); }
  ConstMatrixMap mat() const { return ConstMatrixMap(data_.data(), rows(), row_size()); }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  void set_zero() { std::fill(data_.begin(), data_.end(), Scalar(0)); }

  template <typename Other>
  Tensor<Other> cast() const {
    typename Tensor<Other>::Storage out(data_.size());
    for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<Other>(data_[i]);
    return Tensor<Other>(shape_, std::move(out));
  }

 private:
  void check_length() const {
    validate_shape();
    if (static_cast<Index>(data_.size()) != shape_size(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }
  void validate_shape() const {
    for (Index e : shape_) {
      if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
    }
  }

  Shape shape_;
  Storage data_;
};

}  // namespace cpgg
