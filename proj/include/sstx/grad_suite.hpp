#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sstx/mixing.hpp"
#include "sstx/trainer.hpp"

// Finite-difference checks over the primitives, the mixers and the full
// two-pass loss of a micro-model.
namespace sstx {

struct GradCase {
  std::string name;
  double max_error = 0.0;
  std::string worst;  // where the largest error occurred
  int resampled = 0;  // points skipped as ill-conditioned
};

struct GradSuiteOptions {
  std::uint64_t seed = 1;
  int trials = 100;
  double step = 1e-5;
  double tolerance = 1e-5;
};

struct GradSuiteReport {
  std::vector<GradCase> cases;
  double tolerance = 1e-5;

  double max_error() const;
  bool passed() const { return max_error() <= tolerance; }
};

// Central differences at a coarse step, independent of the analytic gradient,
// decide whether a point can be checked at all: every component must be zero
// or large enough for a step of options.step to resolve it to
// options.tolerance above double rounding noise in f.
bool well_conditioned(const ScalarFunction& f, std::span<const Tensor> point, const GradSuiteOptions& options);

GradSuiteReport check_primitives(const GradSuiteOptions& options);
GradSuiteReport check_mixers(const GradSuiteOptions& options);
GradSuiteReport check_two_pass_model(const GradSuiteOptions& options);
GradSuiteReport run_grad_suite(const GradSuiteOptions& options);

// Vocab 7, d_model 8, one layer, two heads, no dropout.
TransformerConfig micro_config();
// Two sentences whose decoder inputs have length 4 (one padded position).
Batch micro_batch(const TransformerConfig& config);

// Sampling-stream seed for which micro_batch at tf_prob 0.5 mixes exactly
// `mixed` positions.
std::uint64_t micro_sampling_seed(const TransformerConfig& config, Index mixed);

// Pass-2 loss with the first-pass scores held at `frozen_scores`. Its gradient
// is the update direction of training without backprop through pass 1.
Tensor frozen_first_pass_loss(const Transformer& model, const Batch& batch, const MixStrategy& strategy,
                              double tf_prob, const Matrix& frozen_scores, std::uint64_t sampling_seed);

}  // namespace sstx
