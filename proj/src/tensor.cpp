#include "mtml/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace mtml {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  for (std::size_t d : shape_) {
    MTML_CHECK(d > 0, ErrorCode::ShapeError, "zero-sized dimension in " + shape_str(shape_));
  }
  data_.assign(shape_numel(shape_), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  MTML_CHECK(shape_numel(shape_) == data_.size(), ErrorCode::ShapeError,
             "data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
}

template <typename T>
T Tensor<T>::item() const {
  MTML_CHECK(data_.size() == 1, ErrorCode::ShapeError, "item() on non-scalar tensor " + shape_str(shape_));
  return data_[0];
}

template <typename T>
void Tensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  MTML_CHECK(shape_numel(shape) == data_.size(), ErrorCode::ShapeError,
             "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace mtml
