#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mtml/rng.hpp"
#include "mtml/tape.hpp"
#include "mtml/tensor.hpp"

namespace mtml {

// A scalar function of some tensors. `build` records it on a tape and returns
// the loss plus the Vars holding each input, in the order of `inputs`.
struct GradCase {
  std::vector<Tensor<double>> inputs;
  std::function<std::pair<Var<double>, std::vector<Var<double>>>(Tape<double>&, const std::vector<Tensor<double>>&)>
      build;
};

struct GradOp {
  std::string name;
  std::function<GradCase(Rng&)> make;  // random small instance
};

// Every differentiable op, every loss term and a miniature network.
std::vector<GradOp> gradcheck_ops();

// Leaves with requires_grad for each input; helper for GradCase::build.
std::vector<Var<double>> make_leaves(Tape<double>& tape, const std::vector<Tensor<double>>& inputs);

// Reverse-mode gradients of the case, one tensor per input.
std::vector<Tensor<double>> analytic_gradients(const GradCase& c);
double evaluate_case(const GradCase& c, const std::vector<Tensor<double>>& inputs);

// max |analytic - numeric| / max(max |analytic|, max |numeric|, floor) over
// all inputs, with central differences of step h.
inline constexpr double kGradErrorFloor = 1e-2;
double gradient_error(const GradCase& c, double h = 1e-5);

// A ReLU, max-pool or hinge switch within h of the sample shows up as a
// slope jump |f(x+h) - 2 f(x) + f(x-h)| / h above this fraction of the
// gradient scale. Judged from function values only.
inline constexpr double kKinkSlopeJump = 1e-2;

struct GradCheckOutcome {
  double error = 0.0;
  bool nonsmooth = false;  // some coordinate straddles a kink; error is not meaningful
};
GradCheckOutcome gradient_check(const GradCase& c, double h = 1e-5);

struct GradcheckResult {
  std::string op;
  int trials = 0;   // instances that were smooth within h
  int redrawn = 0;  // instances discarded for straddling a kink
  double max_error = 0.0;
  bool passed = false;
};

// Draws instances until `trials` smooth ones were checked (at most 10x as many draws).
std::vector<GradcheckResult> run_gradcheck(std::uint64_t seed, int trials = 20, double h = 1e-5,
                                           double tolerance = 1e-6);

}  // namespace mtml
