#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "sstx/autodiff.hpp"

// Builds the decoder inputs of the second pass: per position either the gold
// token embedding or a vector derived from the first-pass vocabulary scores.
namespace sstx {

enum class MixKind { argmax, topk, softmax, gumbel, sparsemax };

std::string_view to_string(MixKind kind);
MixKind parse_mix_kind(std::string_view name);

struct MixStrategy {
  MixKind kind = MixKind::softmax;
  double alpha = 1.0;  // softmax / gumbel temperature scale
  int k = 5;           // topk only

  void validate() const;
  // True for the kinds that weight every vocabulary row (softmax, gumbel,
  // sparsemax); only these may backpropagate into the first pass.
  bool sums_full_vocabulary() const;
  std::string describe() const;
};

// Scores are n x V (one row per position); tables are V x d. Every mixer
// returns n x d.

Tensor mix_argmax(const Tensor& scores, const Tensor& table);
Tensor mix_topk(const Tensor& scores, const Tensor& table, int k);
Tensor mix_softmax(const Tensor& scores, const Tensor& table, double alpha);
Tensor mix_gumbel(const Tensor& scores, const Tensor& table, double alpha, Rng& rng);
Tensor mix_gumbel(const Tensor& scores, const Tensor& table, double alpha, const Matrix& noise);
Tensor mix_sparsemax(const Tensor& scores, const Tensor& table);

// G = -log(-log U), U uniform clamped to (1e-12, 1 - 1e-12), row-major draws.
Matrix sample_gumbel(Index rows, Index cols, Rng& rng);
double gumbel_from_uniform(double u);

// n x V mixing weights of a strategy (one-hot for argmax). Differentiable
// w.r.t. scores for softmax, gumbel and sparsemax.
Tensor mix_weights(const MixStrategy& strategy, const Tensor& scores, Rng& rng);

Tensor apply_mix(const MixStrategy& strategy, const Tensor& scores, const Tensor& table, Rng& rng);

struct MixedInputs {
  Tensor embeddings;                   // batch * len rows, d_model columns
  std::vector<std::uint8_t> mix_mask;  // 1 = model prediction used
  Index eligible = 0;
  Index mixed = 0;

  double mix_fraction() const {
    return eligible == 0 ? 0.0 : static_cast<double>(mixed) / static_cast<double>(eligible);
  }
};

// decoder_inputs: batch x len ids beginning with BOS; padded positions carry
// pad_id. first_pass_scores: batch * len rows of logits, where row p - 1 of a
// sequence predicts the token fed at input position p. Position 0 and padding
// always keep the gold embedding. Bernoulli draws happen in position order,
// followed by any Gumbel noise.
MixedInputs build_second_pass_inputs(const IdMatrix& decoder_inputs, const Tensor& first_pass_scores,
                                     double tf_prob, const MixStrategy& strategy, Rng& rng,
                                     bool backprop_through_first, const Tensor& embedding_table,
                                     int pad_id);

// Throws UnsupportedCombinationError for argmax/topk with backprop through the
// first pass.
void check_backprop_combination(const MixStrategy& strategy, bool backprop_through_first);

}  // namespace sstx
