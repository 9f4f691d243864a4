#pragma once

#include <string>
#include <vector>

#include "sstx/autodiff.hpp"

namespace sstx {

struct TransformerConfig {
  int n_layers = 2;
  int n_heads = 2;
  int d_model = 64;
  int d_ff = 128;
  int vocab_size = 16;
  int max_len = 32;
  double dropout = 0.1;
  bool share_embeddings = true;
  bool share_decoder_out_embedding = true;
  int pad_id = 0;
  int bos_id = 1;
  int eos_id = 2;

  void validate() const;

  // CPU-sized preset used by the synthetic tasks.
  static TransformerConfig desk();
  // 6 layers, 8 heads, 512 wide, shared embeddings.
  static TransformerConfig base();
};

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

// Encoder output plus the source key mask it was produced with.
struct Memory {
  Tensor states;  // batch * src_len rows, d_model columns
  Index batch = 0;
  Index src_len = 0;
  std::vector<std::uint8_t> src_valid;
};

// Dropout is active only when train is set and an rng is supplied.
struct ForwardMode {
  bool train = false;
  Rng* rng = nullptr;

  static ForwardMode eval() { return {}; }
  static ForwardMode training(Rng& r) { return {true, &r}; }
};

// n x n lower-triangular allow pattern: (i, j) allowed iff j <= i.
Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> causal_mask(Index n);

struct LinearParams {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out, may be undefined
};

struct AttentionParams {
  LinearParams query, key, value, output;
};

struct FeedForwardParams {
  LinearParams hidden, output;
};

struct LayerNormParams {
  Tensor gain, bias;
};

Tensor linear(const Tensor& x, const LinearParams& p);

// Projections, fused scaled dot-product attention, then output projection.
Tensor multi_head_attention(const Tensor& queries, const Tensor& keys, const Tensor& values,
                            const AttentionLayout& layout, const AttentionParams& params);

// Pre-norm encoder-decoder. The decoder accepts either token ids or word-level
// input embeddings; both paths share scaling, positions and every parameter.
class Transformer {
 public:
  Transformer(TransformerConfig config, std::uint64_t init_seed);
  Transformer(const Transformer&) = delete;
  Transformer& operator=(const Transformer&) = delete;
  Transformer(Transformer&&) = default;
  Transformer& operator=(Transformer&&) = default;

  // Deep copy with independent parameter storage.
  Transformer clone() const;

  const TransformerConfig& config() const { return config_; }

  Memory encode(const IdMatrix& src, ForwardMode mode = {}) const;

  // logits: batch * tgt_len rows, vocab_size columns.
  Tensor decode(const IdMatrix& tgt_in, const Memory& memory, ForwardMode mode = {}) const;
  Tensor decode(const Tensor& input_embeddings, Index batch, Index tgt_len, const Memory& memory,
                ForwardMode mode = {}) const;

  // Unscaled word embeddings of target ids (the table rows themselves).
  Tensor embed_target(const IdMatrix& ids) const;
  const Tensor& target_embedding() const { return tgt_embedding_; }
  const Tensor& source_embedding() const { return src_embedding_; }

  // Greedy decoding from BOS until EOS or max_len tokens; ties to lowest id.
  std::vector<std::vector<int>> greedy_decode(const IdMatrix& src, int max_len) const;

  std::vector<NamedParameter>& parameters() { return params_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  void zero_grad();

  // Copies every parameter value from other (same config required).
  void copy_parameters_from(const Transformer& other);

 private:
  struct EncoderLayer {
    LayerNormParams attn_norm, ff_norm;
    AttentionParams self_attn;
    FeedForwardParams ff;
  };
  struct DecoderLayer {
    LayerNormParams self_norm, cross_norm, ff_norm;
    AttentionParams self_attn, cross_attn;
    FeedForwardParams ff;
  };

  Tensor add_positions(const Tensor& word_embeddings, Index batch, Index len, ForwardMode mode) const;
  Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) const;
  Tensor maybe_dropout(const Tensor& x, ForwardMode mode) const;
  void check_ids(const IdMatrix& ids, const char* what) const;

  Tensor register_param(const std::string& name, Matrix value);
  LinearParams make_linear(const std::string& name, Index in, Index out, Rng& rng, bool bias = true);
  LayerNormParams make_norm(const std::string& name);
  AttentionParams make_attention(const std::string& name, Rng& rng);

  TransformerConfig config_;
  Matrix positions_;
  std::vector<NamedParameter> params_;
  Tensor src_embedding_;
  Tensor tgt_embedding_;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  LayerNormParams encoder_norm_, decoder_norm_;
  Tensor generator_weight_;  // d_model x vocab when untied
  Tensor generator_bias_;
};

}  // namespace sstx
