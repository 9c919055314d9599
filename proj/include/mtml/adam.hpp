#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mtml/tensor.hpp"

namespace mtml {

struct AdamOptions {
  double learning_rate = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected ADAM over a fixed list of parameter tensors.
template <typename T>
class AdamState {
 public:
  AdamState() = default;
  AdamState(std::span<const Tensor<T>> params, AdamOptions options = {});

  const AdamOptions& options() const noexcept { return options_; }
  void set_learning_rate(double lr) { options_.learning_rate = lr; }
  std::size_t step_count() const noexcept { return step_; }
  const std::vector<Tensor<T>>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor<T>>& second_moments() const noexcept { return v_; }

  // Applies one update in place. Shapes must match the tensors the state was built for.
  void step(std::span<Tensor<T>> params, std::span<const Tensor<T>> grads);

 private:
  AdamOptions options_;
  std::size_t step_ = 0;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
};

extern template class AdamState<float>;
extern template class AdamState<double>;

}  // namespace mtml
