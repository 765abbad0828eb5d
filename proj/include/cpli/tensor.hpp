#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cpli {

using Dims = std::vector<std::size_t>;

inline std::size_t dims_product(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string dims_to_string(const Dims& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << ',';
    os << dims[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major n-dimensional array.
///
/// The element count always equals the product of the extents. Views into the
/// storage are handed out as Eigen maps so that kernels can use Eigen
/// expressions without copying.
template <typename Scalar>
class BasicTensor {
 public:
  using value_type = Scalar;
  using RowMajorMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  BasicTensor() = default;

  explicit BasicTensor(Dims dims, Scalar fill = Scalar(0))
      : dims_(std::move(dims)), data_(dims_product(dims_), fill) {
    check_extents();
  }

  BasicTensor(Dims dims, std::vector<Scalar> data) : dims_(std::move(dims)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != dims_product(dims_)) {
      throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                  " does not match dims " + dims_to_string(dims_));
    }
  }

  static BasicTensor from_vector(const Vector& v) {
    return BasicTensor({static_cast<std::size_t>(v.size())},
                       std::vector<Scalar>(v.data(), v.data() + v.size()));
  }

  const Dims& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  Scalar* data() noexcept { return data_.data(); }
  const Scalar* data() const noexcept { return data_.data(); }
  std::span<Scalar> values() noexcept { return data_; }
  std::span<const Scalar> values() const noexcept { return data_; }
  const std::vector<Scalar>& storage() const noexcept { return data_; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  const Scalar& operator[](std::size_t i) const { return data_[i]; }

  template <typename... Idx>
  Scalar& operator()(Idx... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... Idx>
  const Scalar& operator()(Idx... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  /// Flat view; all elements as one column.
  Eigen::Map<Vector> flat() { return {data_.data(), static_cast<Eigen::Index>(data_.size())}; }
  Eigen::Map<const Vector> flat() const {
    return {data_.data(), static_cast<Eigen::Index>(data_.size())};
  }

  /// Row-major matrix view: the leading axis becomes rows, the rest are
  /// collapsed into columns.
  Eigen::Map<RowMajorMatrix> matrix() {
    auto [r, c] = matrix_shape();
    return {data_.data(), r, c};
  }
  Eigen::Map<const RowMajorMatrix> matrix() const {
    auto [r, c] = matrix_shape();
    return {data_.data(), r, c};
  }

  void reshape(Dims dims) {
    if (dims_product(dims) != data_.size()) {
      throw std::invalid_argument("cannot reshape " + dims_to_string(dims_) + " to " +
                                  dims_to_string(dims));
    }
    dims_ = std::move(dims);
  }

  void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Scalar v) { return std::isfinite(v); });
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (dims_[i] == 0) {
        // Zero-length leading axis is allowed (empty datasets); inner extents must be positive.
        if (i == 0) continue;
        throw std::invalid_argument("tensor extent " + std::to_string(i) + " is zero in " +
                                    dims_to_string(dims_));
      }
    }
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      off = off * dims_[axis] + i;
      ++axis;
    }
    return off;
  }

  std::pair<Eigen::Index, Eigen::Index> matrix_shape() const {
    if (dims_.empty()) return {0, 0};
    const auto rows = static_cast<Eigen::Index>(dims_[0]);
    const auto cols = rows == 0 ? Eigen::Index{0} : static_cast<Eigen::Index>(data_.size()) / rows;
    return {rows, cols};
  }

  Dims dims_;
  std::vector<Scalar> data_;
};

using Tensor = BasicTensor<double>;
using MatrixXdR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace cpli
