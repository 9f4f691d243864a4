#include "sstx/mixing.hpp"

#include <algorithm>
#include <cmath>

namespace sstx {

std::string_view to_string(MixKind kind) {
  switch (kind) {
    case MixKind::argmax: return "argmax";
    case MixKind::topk: return "topk";
    case MixKind::softmax: return "softmax";
    case MixKind::gumbel: return "gumbel";
    case MixKind::sparsemax: return "sparsemax";
  }
  return "?";
}

MixKind parse_mix_kind(std::string_view name) {
  for (MixKind k : {MixKind::argmax, MixKind::topk, MixKind::softmax, MixKind::gumbel, MixKind::sparsemax})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown mixing strategy '" + std::string(name) +
                    "' (expected argmax | topk | softmax | gumbel | sparsemax)");
}

void MixStrategy::validate() const {
  if (!(alpha > 0.0)) throw ConfigError("mix.alpha must be > 0");
  if (k < 1) throw ConfigError("mix.k must be >= 1");
}

bool MixStrategy::sums_full_vocabulary() const {
  return kind == MixKind::softmax || kind == MixKind::gumbel || kind == MixKind::sparsemax;
}

std::string MixStrategy::describe() const {
  std::string s(to_string(kind));
  if (kind == MixKind::softmax || kind == MixKind::gumbel) s += "(alpha=" + std::to_string(alpha) + ")";
  if (kind == MixKind::topk) s += "(k=" + std::to_string(k) + ")";
  return s;
}

void check_backprop_combination(const MixStrategy& strategy, bool backprop_through_first) {
  if (backprop_through_first && !strategy.sums_full_vocabulary())
    throw UnsupportedCombinationError(
        "backprop through the first pass is defined only for softmax, gumbel and sparsemax mixes, not " +
        std::string(to_string(strategy.kind)));
}

// --- mixers ----------------------------------------------------------------

namespace {

void check_table(const Tensor& scores, const Tensor& table, const char* op) {
  if (scores.cols() != table.rows())
    throw DimensionError(std::string(op) + ": scores " + shape_string(scores) +
                         " do not match embedding table " + shape_string(table));
}

Matrix topk_weights(const Matrix& scores, int k) {
  Matrix w = Matrix::Zero(scores.rows(), scores.cols());
  for (Index r = 0; r < scores.rows(); ++r) {
    const auto top = kernels::top_k_indices(scores.row(r), k);
    const double m = scores(r, top.front());
    double z = 0.0;
    for (Index id : top) z += (w(r, id) = std::exp(scores(r, id) - m));
    for (Index id : top) w(r, id) /= z;
  }
  return w;
}

}  // namespace

Tensor mix_argmax(const Tensor& scores, const Tensor& table) {
  check_table(scores, table, "mix_argmax");
  std::vector<int> ids(static_cast<std::size_t>(scores.rows()));
  for (Index r = 0; r < scores.rows(); ++r)
    ids[static_cast<std::size_t>(r)] = static_cast<int>(kernels::argmax(scores.value().row(r)));
  return embedding_lookup(table, ids);
}

Tensor mix_topk(const Tensor& scores, const Tensor& table, int k) {
  check_table(scores, table, "mix_topk");
  if (k < 1) throw ContractError("mix_topk: k must be >= 1");
  return matmul(Tensor(topk_weights(scores.value(), k)), table);
}

Tensor mix_softmax(const Tensor& scores, const Tensor& table, double alpha) {
  check_table(scores, table, "mix_softmax");
  return matmul(softmax_rows(scale(scores, alpha)), table);
}

double gumbel_from_uniform(double u) {
  u = std::clamp(u, 1e-12, 1.0 - 1e-12);
  return -std::log(-std::log(u));
}

Matrix sample_gumbel(Index rows, Index cols, Rng& rng) {
  Matrix g(rows, cols);
  for (Index i = 0; i < g.size(); ++i) g.data()[i] = gumbel_from_uniform(rng.uniform());
  return g;
}

Tensor mix_gumbel(const Tensor& scores, const Tensor& table, double alpha, const Matrix& noise) {
  check_table(scores, table, "mix_gumbel");
  if (noise.rows() != scores.rows() || noise.cols() != scores.cols())
    throw DimensionError("mix_gumbel: noise shape does not match scores " + shape_string(scores));
  return matmul(softmax_rows(scale(add(scores, Tensor(noise)), alpha)), table);
}

Tensor mix_gumbel(const Tensor& scores, const Tensor& table, double alpha, Rng& rng) {
  return mix_gumbel(scores, table, alpha, sample_gumbel(scores.rows(), scores.cols(), rng));
}

Tensor mix_sparsemax(const Tensor& scores, const Tensor& table) {
  check_table(scores, table, "mix_sparsemax");
  return matmul(sparsemax_rows(scores), table);
}

Tensor mix_weights(const MixStrategy& strategy, const Tensor& scores, Rng& rng) {
  strategy.validate();
  switch (strategy.kind) {
    case MixKind::argmax: {
      Matrix w = Matrix::Zero(scores.rows(), scores.cols());
      for (Index r = 0; r < scores.rows(); ++r) w(r, kernels::argmax(scores.value().row(r))) = 1.0;
      return Tensor(std::move(w));
    }
    case MixKind::topk: return Tensor(topk_weights(scores.value(), strategy.k));
    case MixKind::softmax: return softmax_rows(scale(scores, strategy.alpha));
    case MixKind::gumbel:
      return softmax_rows(
          scale(add(scores, Tensor(sample_gumbel(scores.rows(), scores.cols(), rng))), strategy.alpha));
    case MixKind::sparsemax: return sparsemax_rows(scores);
  }
  throw ContractError("mix_weights: unknown strategy");
}

Tensor apply_mix(const MixStrategy& strategy, const Tensor& scores, const Tensor& table, Rng& rng) {
  strategy.validate();
  switch (strategy.kind) {
    case MixKind::argmax: return mix_argmax(scores, table);
    case MixKind::topk: return mix_topk(scores, table, strategy.k);
    case MixKind::softmax: return mix_softmax(scores, table, strategy.alpha);
    case MixKind::gumbel: return mix_gumbel(scores, table, strategy.alpha, rng);
    case MixKind::sparsemax: return mix_sparsemax(scores, table);
  }
  throw ContractError("apply_mix: unknown strategy");
}

// --- second-pass inputs ------------------------------------------------------

MixedInputs build_second_pass_inputs(const IdMatrix& decoder_inputs, const Tensor& first_pass_scores,
                                     double tf_prob, const MixStrategy& strategy, Rng& rng,
                                     bool backprop_through_first, const Tensor& embedding_table,
                                     int pad_id) {
  if (!(tf_prob >= 0.0 && tf_prob <= 1.0))
    throw ContractError("build_second_pass_inputs: teacher-forcing probability " +
                        std::to_string(tf_prob) + " outside [0, 1]");
  strategy.validate();
  check_backprop_combination(strategy, backprop_through_first);
  const Index B = decoder_inputs.rows();
  const Index T = decoder_inputs.cols();
  if (first_pass_scores.rows() != B * T || first_pass_scores.cols() != embedding_table.rows())
    throw DimensionError("build_second_pass_inputs: scores " + shape_string(first_pass_scores) +
                         " do not match inputs [" + std::to_string(B) + "x" + std::to_string(T) +
                         "] and table " + shape_string(embedding_table));

  MixedInputs result;
  result.mix_mask.assign(static_cast<std::size_t>(B * T), 0);
  std::vector<int> score_rows(static_cast<std::size_t>(B * T));
  for (Index b = 0; b < B; ++b) {
    for (Index p = 0; p < T; ++p) {
      const auto flat = static_cast<std::size_t>(b * T + p);
      score_rows[flat] = static_cast<int>(b * T + std::max<Index>(p - 1, 0));
      if (p == 0 || decoder_inputs(b, p) == pad_id) continue;
      ++result.eligible;
      if (!rng.bernoulli(tf_prob)) {
        result.mix_mask[flat] = 1;
        ++result.mixed;
      }
    }
  }

  const Tensor gold = embedding_lookup(
      embedding_table, {decoder_inputs.data(), static_cast<std::size_t>(decoder_inputs.size())});
  const Tensor scores = backprop_through_first ? first_pass_scores : detach(first_pass_scores);
  const Tensor aligned = embedding_lookup(scores, score_rows);
  const Tensor mixed = apply_mix(strategy, aligned, embedding_table, rng);
  result.embeddings = select_rows(gold, mixed, result.mix_mask);
  return result;
}

}  // namespace sstx
