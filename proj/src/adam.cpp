#include "mtml/adam.hpp"

#include <cmath>

namespace mtml {

template <typename T>
AdamState<T>::AdamState(std::span<const Tensor<T>> params, AdamOptions options) : options_(options) {
  MTML_CHECK(options_.learning_rate >= 0.0, ErrorCode::ConfigError, "learning rate must be non-negative");
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const Tensor<T>& p : params) {
    m_.push_back(Tensor<T>::zeros(p.shape()));
    v_.push_back(Tensor<T>::zeros(p.shape()));
  }
}

template <typename T>
void AdamState<T>::step(std::span<Tensor<T>> params, std::span<const Tensor<T>> grads) {
  MTML_CHECK(params.size() == m_.size() && grads.size() == m_.size(), ErrorCode::ShapeError,
             "adam: parameter count changed since construction");
  for (std::size_t i = 0; i < params.size(); ++i) {
    MTML_CHECK(params[i].shape() == m_[i].shape() && grads[i].shape() == m_[i].shape(), ErrorCode::ShapeError,
               "adam: shape mismatch for parameter " + std::to_string(i));
  }
  ++step_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  const double lr = options_.learning_rate;
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* p = params[i].data();
    const T* g = grads[i].data();
    T* m = m_[i].data();
    T* v = v_[i].data();
    for (std::size_t j = 0; j < params[i].numel(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * gj;
      const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = lr * (mj / c1) / (std::sqrt(vj / c2) + options_.epsilon);
      p[j] = static_cast<T>(static_cast<double>(p[j]) - update);
    }
  }
}

template class AdamState<float>;
template class AdamState<double>;

}  // namespace mtml
