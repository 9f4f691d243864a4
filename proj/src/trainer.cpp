#include "sstx/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>

#include "sstx/bleu.hpp"

namespace sstx {

// --- batches ---------------------------------------------------------------

IdMatrix Batch::decoder_input(int pad_id) const {
  const Index T = target.cols() - 1;
  IdMatrix in = target.leftCols(T);
  for (Index b = 0; b < in.rows(); ++b)
    for (Index p = 0; p < T; ++p)
      if (target(b, p + 1) == pad_id) in(b, p) = pad_id;
  return in;
}

IdMatrix Batch::gold_output() const { return target.rightCols(target.cols() - 1); }

std::vector<std::uint8_t> Batch::output_pad_mask(int pad_id) const {
  const IdMatrix gold = gold_output();
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(gold.size()));
  for (Index i = 0; i < gold.size(); ++i) mask[static_cast<std::size_t>(i)] = gold.data()[i] == pad_id;
  return mask;
}

void Batch::validate(const TransformerConfig& config) const {
  if (source.rows() != target.rows() || source.rows() < 1)
    throw ContractError("batch: source and target batch sizes differ or are empty");
  if (target.cols() < 2) throw ContractError("batch: targets need at least BOS and EOS");
  for (Index b = 0; b < target.rows(); ++b) {
    if (target(b, 0) != config.bos_id) throw ContractError("batch: target row does not begin with BOS");
    Index p = 1;
    while (p < target.cols() && target(b, p) != config.eos_id) {
      if (target(b, p) == config.pad_id) throw ContractError("batch: padding before EOS in target row");
      ++p;
    }
    if (p == target.cols()) throw ContractError("batch: target row lacks EOS");
    for (++p; p < target.cols(); ++p)
      if (target(b, p) != config.pad_id) throw ContractError("batch: non-pad token after EOS");
  }
}

Batch make_batch(const std::vector<const SentencePair*>& pairs, const TransformerConfig& config) {
  if (pairs.empty()) throw ContractError("make_batch: no sentence pairs");
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;
  for (const SentencePair* p : pairs) {
    src_len = std::max(src_len, p->source.size());
    tgt_len = std::max(tgt_len, p->target.size());
  }
  if (src_len > static_cast<std::size_t>(config.max_len) ||
      tgt_len + 1 > static_cast<std::size_t>(config.max_len))
    throw SequenceLengthError("make_batch: sentence longer than max_len " + std::to_string(config.max_len));
  const auto B = static_cast<Index>(pairs.size());
  Batch batch;
  batch.source = IdMatrix::Constant(B, static_cast<Index>(src_len), config.pad_id);
  batch.target = IdMatrix::Constant(B, static_cast<Index>(tgt_len + 2), config.pad_id);
  for (Index b = 0; b < B; ++b) {
    const SentencePair& p = *pairs[static_cast<std::size_t>(b)];
    for (std::size_t i = 0; i < p.source.size(); ++i) batch.source(b, static_cast<Index>(i)) = p.source[i];
    batch.target(b, 0) = config.bos_id;
    for (std::size_t i = 0; i < p.target.size(); ++i) batch.target(b, static_cast<Index>(i + 1)) = p.target[i];
    batch.target(b, static_cast<Index>(p.target.size() + 1)) = config.eos_id;
  }
  return batch;
}

Batch make_batch(std::span<const SentencePair> pairs, const TransformerConfig& config) {
  std::vector<const SentencePair*> ptrs;
  for (const auto& p : pairs) ptrs.push_back(&p);
  return make_batch(ptrs, config);
}

// --- state -----------------------------------------------------------------

TrainState::TrainState(const TransformerConfig& config, std::uint64_t seed)
    : model(config, seed), rng(seed, 1) {}

StepStreams split_step_streams(Rng& run_rng) {
  const std::uint64_t seed = run_rng();
  return {Rng(seed, 11), Rng(seed, 12)};
}

// --- forward passes --------------------------------------------------------

Tensor baseline_loss(const Transformer& model, const Batch& batch, ForwardMode mode) {
  const auto& cfg = model.config();
  const Memory memory = model.encode(batch.source, mode);
  const Tensor logits = model.decode(batch.decoder_input(cfg.pad_id), memory, mode);
  const IdMatrix gold = batch.gold_output();
  return cross_entropy(logits, {gold.data(), static_cast<std::size_t>(gold.size())},
                       batch.output_pad_mask(cfg.pad_id));
}

ScheduledForward scheduled_forward(const Transformer& model, const Batch& batch,
                                   const MixStrategy& strategy, double tf_prob,
                                   bool backprop_through_first, StepStreams& streams, bool train) {
  check_backprop_combination(strategy, backprop_through_first);
  const auto& cfg = model.config();
  const ForwardMode main_mode = train ? ForwardMode::training(streams.dropout) : ForwardMode::eval();
  const ForwardMode aux_mode = train ? ForwardMode::training(streams.sampling) : ForwardMode::eval();

  const IdMatrix inputs = batch.decoder_input(cfg.pad_id);
  const Index B = inputs.rows();
  const Index T = inputs.cols();
  ScheduledForward out;
  const Memory memory = model.encode(batch.source, main_mode);
  {
    std::optional<NoGradGuard> no_grad;
    if (!backprop_through_first) no_grad.emplace();
    out.first_pass_logits = model.decode(inputs, memory, aux_mode);
  }
  out.mixed = build_second_pass_inputs(inputs, out.first_pass_logits, tf_prob, strategy, streams.sampling,
                                       backprop_through_first, model.target_embedding(), cfg.pad_id);
  out.second_pass_logits = model.decode(out.mixed.embeddings, B, T, memory, main_mode);
  const IdMatrix gold = batch.gold_output();
  out.loss = cross_entropy(out.second_pass_logits, {gold.data(), static_cast<std::size_t>(gold.size())},
                           batch.output_pad_mask(cfg.pad_id));
  return out;
}

// --- optimisation ----------------------------------------------------------

double clip_grad_norm(std::vector<NamedParameter>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.tensor.has_grad()) sq += p.tensor.grad().squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& p : params)
      if (p.tensor.has_grad()) const_cast<Matrix&>(p.tensor.grad()) *= factor;
  }
  return norm;
}

void adam_update(std::vector<NamedParameter>& params, AdamState& adam, std::int64_t t, double lr,
                 const OptimConfig& optim) {
  if (t < 1) throw ContractError("adam_update: step must be >= 1");
  if (adam.m.size() != params.size()) {
    adam.m.clear();
    adam.v.clear();
    for (const auto& p : params) {
      adam.m.push_back(Matrix::Zero(p.tensor.rows(), p.tensor.cols()));
      adam.v.push_back(Matrix::Zero(p.tensor.rows(), p.tensor.cols()));
    }
  }
  const double c1 = 1.0 - std::pow(optim.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(optim.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& param = params[i].tensor;
    Matrix& m = adam.m[i];
    Matrix& v = adam.v[i];
    if (param.has_grad()) {
      const Matrix& g = param.grad();
      m = optim.beta1 * m + (1.0 - optim.beta1) * g;
      v = optim.beta2 * v + (1.0 - optim.beta2) * g.cwiseAbs2();
    } else {
      m *= optim.beta1;
      v *= optim.beta2;
    }
    param.mutable_value().array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + optim.eps);
    if (!kernels::all_finite(param.value()))
      throw NumericError("adam_update: parameter " + params[i].name + " became non-finite at step " +
                         std::to_string(t));
  }
}

namespace {

template <typename LossFn>
StepResult optimise(TrainState& state, const OptimConfig& optim, LossFn&& loss_fn) {
  const std::int64_t t = state.step + 1;
  StepResult result;
  try {
    state.model.zero_grad();
    const Tensor loss = loss_fn(result);
    backward(loss);
    clip_grad_norm(state.model.parameters(), optim.clip_norm);
    result.loss = loss.item();
    result.lr = learning_rate(t, state.model.config().d_model, optim.warmup_steps, optim.lr_scale);
    adam_update(state.model.parameters(), state.adam, t, result.lr, optim);
  } catch (const NumericError& e) {
    throw NumericError("training step " + std::to_string(t) + ": " + e.what());
  }
  state.step = t;
  return result;
}

}  // namespace

StepResult train_step_baseline(TrainState& state, const Batch& batch, const OptimConfig& optim) {
  batch.validate(state.model.config());
  StepStreams streams = split_step_streams(state.rng);
  return optimise(state, optim, [&](StepResult&) {
    return baseline_loss(state.model, batch, ForwardMode::training(streams.dropout));
  });
}

StepResult train_step_scheduled(TrainState& state, const Batch& batch, const MixStrategy& strategy,
                                const TeacherForcingSchedule& schedule, bool backprop_through_first,
                                const OptimConfig& optim) {
  check_backprop_combination(strategy, backprop_through_first);
  batch.validate(state.model.config());
  const double tf_prob = tf_probability(schedule, state.step);
  StepStreams streams = split_step_streams(state.rng);
  return optimise(state, optim, [&](StepResult& result) {
    ScheduledForward fwd =
        scheduled_forward(state.model, batch, strategy, tf_prob, backprop_through_first, streams, true);
    result.tf_prob = tf_prob;
    result.mix_fraction = fwd.mixed.mix_fraction();
    return fwd.loss;
  });
}

// --- evaluation ------------------------------------------------------------

EvalMetrics evaluate(const Transformer& model, const std::vector<SentencePair>& dataset, int batch_size) {
  if (dataset.empty()) throw ContractError("evaluate: empty dataset");
  if (batch_size < 1) throw ContractError("evaluate: batch size must be >= 1");
  NoGradGuard no_grad;
  const auto& cfg = model.config();
  double loss_sum = 0.0;
  long tokens = 0;
  long correct = 0;
  std::vector<std::vector<int>> hyps;
  std::vector<std::vector<int>> refs;
  for (std::size_t start = 0; start < dataset.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(dataset.size(), start + static_cast<std::size_t>(batch_size));
    const Batch batch = make_batch(std::span<const SentencePair>(dataset.data() + start, end - start), cfg);
    const Memory memory = model.encode(batch.source);
    const Tensor logits = model.decode(batch.decoder_input(cfg.pad_id), memory);
    const IdMatrix gold = batch.gold_output();
    const auto pad = batch.output_pad_mask(cfg.pad_id);
    long count = 0;
    for (Index i = 0; i < gold.size(); ++i) {
      if (pad[static_cast<std::size_t>(i)]) continue;
      ++count;
      if (kernels::argmax(logits.value().row(i)) == gold.data()[i]) ++correct;
    }
    const Tensor ce = cross_entropy(logits, {gold.data(), static_cast<std::size_t>(gold.size())}, pad);
    loss_sum += ce.item() * static_cast<double>(count);
    tokens += count;
    auto out = model.greedy_decode(batch.source, cfg.max_len);
    for (std::size_t i = 0; i < out.size(); ++i) {
      hyps.push_back(std::move(out[i]));
      refs.push_back(dataset[start + i].target);
    }
  }
  EvalMetrics m;
  m.loss = loss_sum / static_cast<double>(tokens);
  m.token_accuracy = static_cast<double>(correct) / static_cast<double>(tokens);
  m.bleu = corpus_bleu(hyps, refs);
  return m;
}

// --- loop ------------------------------------------------------------------

void TrainConfig::validate() const {
  model.validate();
  mix.validate();
  schedule.validate();
  if (scheduled) check_backprop_combination(mix, backprop_through_first);
  if (max_steps < 0) throw ConfigError("train.max_steps must be >= 0");
  if (validation_interval < 1) throw ConfigError("train.validation_interval must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (optim.warmup_steps < 1) throw ConfigError("optim.warmup_steps must be >= 1");
  if (!(optim.lr_scale > 0.0)) throw ConfigError("optim.lr_scale must be > 0");
}

std::string format_metrics_row(const MetricsRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld,%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", static_cast<long long>(r.step),
                r.split.c_str(), r.loss, r.token_acc, r.bleu, r.tf_prob, r.mix_fraction, r.lr);
  return buf;
}

TrainReport train_loop(const TrainConfig& config, const ParallelCorpus& train, const ParallelCorpus& dev,
                       const ParallelCorpus& test, TrainState& state) {
  config.validate();
  if (train.pairs.empty()) throw DataError("training set is empty");
  if (dev.pairs.empty()) throw DataError("validation set is empty");
  const auto& mcfg = state.model.config();
  train.validate(mcfg.vocab_size, mcfg.vocab_size);
  dev.validate(mcfg.vocab_size, mcfg.vocab_size);

  namespace fs = std::filesystem;
  const bool to_disk = !config.out_dir.empty();
  const fs::path out_dir(config.out_dir);
  std::ofstream metrics;
  if (to_disk) {
    fs::create_directories(out_dir);
    const fs::path path = out_dir / "metrics.csv";
    const bool fresh = state.step == 0 || !fs::exists(path) || fs::file_size(path) == 0;
    metrics.open(path, fresh ? std::ios::trunc : std::ios::app);
    if (!metrics) throw DataError("cannot write " + path.string());
    if (fresh) metrics << kMetricsHeader << '\n';
  }

  TrainReport report;
  std::optional<Transformer> best_model;
  StepResult last;
  last.tf_prob = config.scheduled ? tf_probability(config.schedule, state.step) : 1.0;

  auto validate_now = [&] {
    round_to_checkpoint_precision(state);
    const EvalMetrics m = evaluate(state.model, dev.pairs, config.batch_size);
    MetricsRow row{state.step, "dev", m.loss, m.token_accuracy, m.bleu, last.tf_prob, last.mix_fraction, last.lr};
    report.rows.push_back(row);
    if (to_disk) metrics << format_metrics_row(row) << '\n' << std::flush;
    if (m.bleu > state.best_validation_bleu || !best_model) {
      if (m.bleu > state.best_validation_bleu) {
        state.best_validation_bleu = m.bleu;
        report.best_step = state.step;
        report.best_dev = m;
      }
      best_model = state.model.clone();
      if (to_disk) {
        state.best_checkpoint_path = (out_dir / "best.ckpt").string();
        save_checkpoint(state, state.best_checkpoint_path);
      }
    }
    if (to_disk && state.step > 0) save_checkpoint(state, (out_dir / "last.ckpt").string());
  };

  if (state.step == 0) validate_now();

  std::vector<const SentencePair*> picks(static_cast<std::size_t>(config.batch_size));
  double seconds = 0.0;
  std::int64_t timed = 0;
  while (state.step < config.max_steps) {
    for (auto& p : picks) p = &train.pairs[state.rng.below(train.pairs.size())];
    const Batch batch = make_batch(picks, mcfg);
    const auto t0 = std::chrono::steady_clock::now();
    last = config.scheduled ? train_step_scheduled(state, batch, config.mix, config.schedule,
                                                   config.backprop_through_first, config.optim)
                            : train_step_baseline(state, batch, config.optim);
    seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ++timed;
    report.steps.push_back(last);
    if (state.step % config.validation_interval == 0) validate_now();
  }

  report.final_step = state.step;
  report.mean_step_seconds = timed ? seconds / static_cast<double>(timed) : 0.0;
  report.best_checkpoint = state.best_checkpoint_path;
  if (!best_model) best_model = state.model.clone();
  if (report.rows.empty()) report.best_dev = evaluate(*best_model, dev.pairs, config.batch_size);
  if (!test.pairs.empty()) report.best_test = evaluate(*best_model, test.pairs, config.batch_size);
  if (state.step % config.validation_interval != 0 || timed == 0) {
    round_to_checkpoint_precision(state);
    if (to_disk) save_checkpoint(state, (out_dir / "last.ckpt").string());
  }
  return report;
}

}  // namespace sstx
