#include "sstx/transformer.hpp"

#include <cmath>
#include <random>

namespace sstx {

void TransformerConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("transformer config: " + msg); };
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (n_heads < 1) fail("n_heads must be >= 1");
  if (d_model < 1 || d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (d_model % 2 != 0) fail("d_model must be even for sinusoidal positions");
  if (d_ff < 1) fail("d_ff must be >= 1");
  if (max_len < 2) fail("max_len must be >= 2");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0, 1)");
  if (pad_id == bos_id || pad_id == eos_id || bos_id == eos_id) fail("pad/bos/eos ids must be distinct");
  for (int id : {pad_id, bos_id, eos_id})
    if (id < 0 || id >= vocab_size) fail("special ids must be < vocab_size");
}

TransformerConfig TransformerConfig::desk() { return {}; }

TransformerConfig TransformerConfig::base() {
  TransformerConfig c;
  c.n_layers = 6;
  c.n_heads = 8;
  c.d_model = 512;
  c.d_ff = 2048;
  c.vocab_size = 32000;
  c.max_len = 256;
  c.dropout = 0.2;
  return c;
}

Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> causal_mask(Index n) {
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> mask(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) mask(i, j) = j <= i;
  return mask;
}

Tensor linear(const Tensor& x, const LinearParams& p) {
  const Tensor y = matmul(x, p.weight);
  return p.bias.defined() ? add(y, p.bias) : y;
}

Tensor multi_head_attention(const Tensor& queries, const Tensor& keys, const Tensor& values,
                            const AttentionLayout& layout, const AttentionParams& params) {
  const Tensor q = linear(queries, params.query);
  const Tensor k = linear(keys, params.key);
  const Tensor v = linear(values, params.value);
  return linear(scaled_dot_product_attention(q, k, v, layout), params.output);
}

// --- construction ----------------------------------------------------------

namespace {

Matrix xavier_uniform(Index in, Index out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  Matrix w(in, out);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = (2.0 * rng.uniform() - 1.0) * bound;
  return w;
}

Matrix embedding_init(Index vocab, Index d_model, Rng& rng) {
  // Small enough that tied output logits start near uniform.
  std::normal_distribution<double> normal(0.0, 0.5 / std::sqrt(static_cast<double>(d_model)));
  Matrix e(vocab, d_model);
  for (Index i = 0; i < e.size(); ++i) e.data()[i] = normal(rng);
  return e;
}

}  // namespace

Tensor Transformer::register_param(const std::string& name, Matrix value) {
  Tensor t(std::move(value), true);
  params_.push_back({name, t});
  return t;
}

LinearParams Transformer::make_linear(const std::string& name, Index in, Index out, Rng& rng, bool bias) {
  LinearParams p{register_param(name + ".weight", xavier_uniform(in, out, rng)), Tensor()};
  if (bias) p.bias = register_param(name + ".bias", Matrix::Zero(1, out));
  return p;
}

LayerNormParams Transformer::make_norm(const std::string& name) {
  return {register_param(name + ".gain", Matrix::Ones(1, config_.d_model)),
          register_param(name + ".bias", Matrix::Zero(1, config_.d_model))};
}

AttentionParams Transformer::make_attention(const std::string& name, Rng& rng) {
  const Index d = config_.d_model;
  AttentionParams p;
  p.query = make_linear(name + ".query", d, d, rng);
  p.key = make_linear(name + ".key", d, d, rng, false);
  p.value = make_linear(name + ".value", d, d, rng);
  p.output = make_linear(name + ".output", d, d, rng);
  return p;
}

Transformer::Transformer(TransformerConfig config, std::uint64_t init_seed) : config_(config) {
  config_.validate();
  Rng rng(init_seed, 0x5eed);
  const Index d = config_.d_model;
  const Index V = config_.vocab_size;
  positions_ = kernels::positional_encoding<double>(config_.max_len, d);

  if (config_.share_embeddings) {
    src_embedding_ = register_param("embedding.shared", embedding_init(V, d, rng));
    tgt_embedding_ = src_embedding_;
  } else {
    src_embedding_ = register_param("embedding.source", embedding_init(V, d, rng));
    tgt_embedding_ = register_param("embedding.target", embedding_init(V, d, rng));
  }

  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string prefix = "encoder.layer" + std::to_string(l);
    EncoderLayer layer;
    layer.attn_norm = make_norm(prefix + ".self_attn_norm");
    layer.self_attn = make_attention(prefix + ".self_attn", rng);
    layer.ff_norm = make_norm(prefix + ".ff_norm");
    layer.ff.hidden = make_linear(prefix + ".ff.hidden", d, config_.d_ff, rng);
    layer.ff.output = make_linear(prefix + ".ff.output", config_.d_ff, d, rng);
    encoder_.push_back(std::move(layer));
  }
  encoder_norm_ = make_norm("encoder.final_norm");

  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string prefix = "decoder.layer" + std::to_string(l);
    DecoderLayer layer;
    layer.self_norm = make_norm(prefix + ".self_attn_norm");
    layer.self_attn = make_attention(prefix + ".self_attn", rng);
    layer.cross_norm = make_norm(prefix + ".cross_attn_norm");
    layer.cross_attn = make_attention(prefix + ".cross_attn", rng);
    layer.ff_norm = make_norm(prefix + ".ff_norm");
    layer.ff.hidden = make_linear(prefix + ".ff.hidden", d, config_.d_ff, rng);
    layer.ff.output = make_linear(prefix + ".ff.output", config_.d_ff, d, rng);
    decoder_.push_back(std::move(layer));
  }
  decoder_norm_ = make_norm("decoder.final_norm");

  if (!config_.share_decoder_out_embedding)
    generator_weight_ = register_param("generator.weight", xavier_uniform(d, V, rng));
  generator_bias_ = register_param("generator.bias", Matrix::Zero(1, V));
}

std::size_t Transformer::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.tensor.size());
  return n;
}

void Transformer::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

Transformer Transformer::clone() const {
  Transformer copy(config_, 0);
  copy.copy_parameters_from(*this);
  return copy;
}

void Transformer::copy_parameters_from(const Transformer& other) {
  if (other.params_.size() != params_.size())
    throw ContractError("copy_parameters_from: parameter layouts differ");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name != other.params_[i].name ||
        params_[i].tensor.shape() != other.params_[i].tensor.shape())
      throw ContractError("copy_parameters_from: mismatch at " + params_[i].name);
    params_[i].tensor.mutable_value() = other.params_[i].tensor.value();
  }
}

// --- forward ---------------------------------------------------------------

void Transformer::check_ids(const IdMatrix& ids, const char* what) const {
  if (ids.cols() > config_.max_len)
    throw SequenceLengthError(std::string(what) + ": length " + std::to_string(ids.cols()) +
                              " exceeds max_len " + std::to_string(config_.max_len));
  if (ids.rows() < 1 || ids.cols() < 1) throw ContractError(std::string(what) + ": empty batch");
  for (Index i = 0; i < ids.size(); ++i) {
    const int id = ids.data()[i];
    if (id < 0 || id >= config_.vocab_size)
      throw ContractError(std::string(what) + ": token id " + std::to_string(id) +
                          " outside vocabulary of " + std::to_string(config_.vocab_size));
  }
}

Tensor Transformer::maybe_dropout(const Tensor& x, ForwardMode mode) const {
  if (!mode.train || mode.rng == nullptr || config_.dropout == 0.0) return x;
  return dropout(x, config_.dropout, *mode.rng);
}

Tensor Transformer::add_positions(const Tensor& word_embeddings, Index batch, Index len,
                                  ForwardMode mode) const {
  if (len > config_.max_len)
    throw SequenceLengthError("sequence length " + std::to_string(len) + " exceeds max_len " +
                              std::to_string(config_.max_len));
  Matrix pos(batch * len, config_.d_model);
  for (Index b = 0; b < batch; ++b) pos.middleRows(b * len, len) = positions_.topRows(len);
  const Tensor scaled = scale(word_embeddings, std::sqrt(static_cast<double>(config_.d_model)));
  return maybe_dropout(add(scaled, Tensor(std::move(pos))), mode);
}

Tensor Transformer::feed_forward(const Tensor& x, const FeedForwardParams& p) const {
  return linear(relu(linear(x, p.hidden)), p.output);
}

Memory Transformer::encode(const IdMatrix& src, ForwardMode mode) const {
  check_ids(src, "encode");
  const Index B = src.rows();
  const Index S = src.cols();
  Memory memory;
  memory.batch = B;
  memory.src_len = S;
  memory.src_valid.resize(static_cast<std::size_t>(B * S));
  for (Index i = 0; i < B * S; ++i)
    memory.src_valid[static_cast<std::size_t>(i)] = src.data()[i] != config_.pad_id;

  AttentionLayout layout{B, S, S, config_.n_heads, false, memory.src_valid};
  Tensor x = add_positions(embedding_lookup(src_embedding_, {src.data(), static_cast<std::size_t>(src.size())}),
                           B, S, mode);
  for (const EncoderLayer& layer : encoder_) {
    Tensor h = layer_norm(x, layer.attn_norm.gain, layer.attn_norm.bias);
    x = add(x, maybe_dropout(multi_head_attention(h, h, h, layout, layer.self_attn), mode));
    h = layer_norm(x, layer.ff_norm.gain, layer.ff_norm.bias);
    x = add(x, maybe_dropout(feed_forward(h, layer.ff), mode));
  }
  memory.states = layer_norm(x, encoder_norm_.gain, encoder_norm_.bias);
  return memory;
}

Tensor Transformer::embed_target(const IdMatrix& ids) const {
  return embedding_lookup(tgt_embedding_, {ids.data(), static_cast<std::size_t>(ids.size())});
}

Tensor Transformer::decode(const IdMatrix& tgt_in, const Memory& memory, ForwardMode mode) const {
  check_ids(tgt_in, "decode");
  return decode(embed_target(tgt_in), tgt_in.rows(), tgt_in.cols(), memory, mode);
}

Tensor Transformer::decode(const Tensor& input_embeddings, Index batch, Index tgt_len,
                           const Memory& memory, ForwardMode mode) const {
  if (input_embeddings.cols() != config_.d_model || input_embeddings.rows() != batch * tgt_len)
    throw DimensionError("decode: input embeddings " + shape_string(input_embeddings) +
                         " do not match batch " + std::to_string(batch) + " x length " +
                         std::to_string(tgt_len) + " x d_model " + std::to_string(config_.d_model));
  if (memory.batch != batch) throw DimensionError("decode: memory batch differs from target batch");

  AttentionLayout self_layout{batch, tgt_len, tgt_len, config_.n_heads, true, {}};
  AttentionLayout cross_layout{batch, tgt_len, memory.src_len, config_.n_heads, false, memory.src_valid};
  Tensor x = add_positions(input_embeddings, batch, tgt_len, mode);
  for (const DecoderLayer& layer : decoder_) {
    Tensor h = layer_norm(x, layer.self_norm.gain, layer.self_norm.bias);
    x = add(x, maybe_dropout(multi_head_attention(h, h, h, self_layout, layer.self_attn), mode));
    h = layer_norm(x, layer.cross_norm.gain, layer.cross_norm.bias);
    x = add(x, maybe_dropout(
                   multi_head_attention(h, memory.states, memory.states, cross_layout, layer.cross_attn),
                   mode));
    h = layer_norm(x, layer.ff_norm.gain, layer.ff_norm.bias);
    x = add(x, maybe_dropout(feed_forward(h, layer.ff), mode));
  }
  x = layer_norm(x, decoder_norm_.gain, decoder_norm_.bias);
  const Tensor projection =
      config_.share_decoder_out_embedding ? transpose(tgt_embedding_) : generator_weight_;
  return add(matmul(x, projection), generator_bias_);
}

std::vector<std::vector<int>> Transformer::greedy_decode(const IdMatrix& src, int max_len) const {
  NoGradGuard no_grad;
  const Index B = src.rows();
  const int limit = std::min(max_len, config_.max_len);
  const Memory memory = encode(src);
  std::vector<std::vector<int>> out(static_cast<std::size_t>(B));
  std::vector<bool> done(static_cast<std::size_t>(B), false);
  IdMatrix prefix = IdMatrix::Constant(B, 1, config_.bos_id);
  for (int t = 0; t < limit; ++t) {
    const Tensor logits = decode(prefix, memory);
    const Index len = prefix.cols();
    IdMatrix next = prefix;
    next.conservativeResize(B, len + 1);
    bool all_done = true;
    for (Index b = 0; b < B; ++b) {
      int token = config_.pad_id;
      if (!done[static_cast<std::size_t>(b)]) {
        token = static_cast<int>(kernels::argmax(logits.value().row(b * len + len - 1)));
        if (token == config_.eos_id) {
          done[static_cast<std::size_t>(b)] = true;
        } else {
          out[static_cast<std::size_t>(b)].push_back(token);
        }
      }
      next(b, len) = token;
      all_done = all_done && done[static_cast<std::size_t>(b)];
    }
    if (all_done || t + 1 == limit || len + 1 > config_.max_len) break;
    prefix = std::move(next);
  }
  return out;
}

}  // namespace sstx
