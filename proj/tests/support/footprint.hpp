#pragma once

// Gradient-footprint measurement of a model along x. All weights are made
// positive and the input strictly monotone in x, so every ReLU is active and
// each max-pool window routes its gradient to the element on the rising side.
// The union of both directions then covers the full dependency set.

#include <cmath>
#include <cstddef>

#include "mtml/model.hpp"
#include "mtml/ops.hpp"

namespace testutil {

struct Footprint {
  int lo = 0;  // smallest x with a non-zero gradient
  int hi = 0;  // largest x with a non-zero gradient
};

inline mtml::Model<double> positive_weights(const mtml::Model<double>& model) {
  mtml::Model<double> out = model;
  for (auto& p : out.parameters())
    for (double& v : p.value.storage()) v = std::abs(v) + (p.name.find("bias") == std::string::npos ? 1e-3 : 0.0);
  return out;
}

inline Footprint footprint_x(const mtml::Model<double>& model, int nx, int ny, int nz, int x0, bool rising) {
  const std::size_t c = static_cast<std::size_t>(model.config().num_classes);
  mtml::Tensor<double> input({c, std::size_t(nz), std::size_t(ny), std::size_t(nx)});
  const std::size_t plane = std::size_t(nx) * ny * nz;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t v = 0; v < plane; ++v) {
      const int x = static_cast<int>(v % nx);
      input[ch * plane + v] = 1.0 + 0.01 * (rising ? x : nx - 1 - x);
    }
  mtml::Tape<double> tape;
  mtml::Var<double> in = tape.leaf(input, true);
  const mtml::FieldVars<double> f = model.forward(tape, in);
  mtml::Tensor<double> pick(f.embedding.shape(), 0.0);
  pick[static_cast<std::size_t>(x0 + nx * (ny / 2 + ny * (nz / 2)))] = 1.0;
  tape.backward(mtml::ops::weighted_sum(f.embedding, pick));
  Footprint fp{nx, -1};
  const mtml::Tensor<double>& g = in.grad();
  for (std::size_t i = 0; i < g.numel(); ++i) {
    if (g[i] == 0.0) continue;
    const int x = static_cast<int>((i % plane) % nx);
    fp.lo = std::min(fp.lo, x);
    fp.hi = std::max(fp.hi, x);
  }
  return fp;
}

// Full footprint width: left reach measured near the high end with a falling
// input, right reach near the low end with a rising one.
inline int measured_receptive_field(const mtml::Model<double>& model, int nx, int ny, int nz, int x_left,
                                    int x_right) {
  const mtml::Model<double> m = positive_weights(model);
  const Footprint left = footprint_x(m, nx, ny, nz, x_left, false);
  const Footprint right = footprint_x(m, nx, ny, nz, x_right, true);
  return (x_left - left.lo) + (right.hi - x_right) + 1;
}

}  // namespace testutil
