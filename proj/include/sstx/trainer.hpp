#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sstx/mixing.hpp"
#include "sstx/scheduling.hpp"
#include "sstx/tasks.hpp"
#include "sstx/transformer.hpp"

namespace sstx {

// Right-padded id matrices. Target rows read BOS w1 .. wn EOS PAD ...
struct Batch {
  IdMatrix source;
  IdMatrix target;

  // Shifted gold inputs; positions whose gold output is padding hold pad_id.
  IdMatrix decoder_input(int pad_id) const;
  IdMatrix gold_output() const;
  std::vector<std::uint8_t> output_pad_mask(int pad_id) const;
  void validate(const TransformerConfig& config) const;
};

Batch make_batch(std::span<const SentencePair> pairs, const TransformerConfig& config);
Batch make_batch(const std::vector<const SentencePair*>& pairs, const TransformerConfig& config);

struct OptimConfig {
  double lr_scale = 2.0;
  std::int64_t warmup_steps = 400;
  double beta1 = 0.9;
  double beta2 = 0.998;
  double eps = 1e-9;
  double clip_norm = 5.0;  // <= 0 disables clipping
};

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
};

struct TrainState {
  TrainState(const TransformerConfig& config, std::uint64_t seed);

  std::int64_t step = 0;
  Transformer model;
  AdamState adam;
  Rng rng;
  double best_validation_bleu = -1.0;
  std::string best_checkpoint_path;
};

struct StepResult {
  double loss = 0.0;
  double tf_prob = 1.0;
  double mix_fraction = 0.0;
  double lr = 0.0;
};

// Per-step random streams derived from one draw of the run generator.
// The dropout stream feeds the encoder and the loss-producing decoder pass;
// the sampling stream feeds everything the scheduled step adds on top.
struct StepStreams {
  Rng dropout;
  Rng sampling;
};
StepStreams split_step_streams(Rng& run_rng);

// Teacher-forced loss of one decoder pass on the shifted gold sequence.
Tensor baseline_loss(const Transformer& model, const Batch& batch, ForwardMode mode);

struct ScheduledForward {
  Tensor loss;
  Tensor first_pass_logits;
  Tensor second_pass_logits;
  MixedInputs mixed;
};

// Pass 1 on gold inputs, mixing, pass 2 on the mixed inputs (same
// parameters); the loss is cross-entropy of pass-2 logits against gold.
ScheduledForward scheduled_forward(const Transformer& model, const Batch& batch,
                                   const MixStrategy& strategy, double tf_prob,
                                   bool backprop_through_first, StepStreams& streams, bool train);

StepResult train_step_baseline(TrainState& state, const Batch& batch, const OptimConfig& optim);
StepResult train_step_scheduled(TrainState& state, const Batch& batch, const MixStrategy& strategy,
                                const TeacherForcingSchedule& schedule, bool backprop_through_first,
                                const OptimConfig& optim);

// Scales grads so their global L2 norm is at most max_norm; returns the norm
// before clipping.
double clip_grad_norm(std::vector<NamedParameter>& params, double max_norm);

// One bias-corrected Adam update at 1-based step t.
void adam_update(std::vector<NamedParameter>& params, AdamState& adam, std::int64_t t, double lr,
                 const OptimConfig& optim);

struct EvalMetrics {
  double loss = 0.0;
  double token_accuracy = 0.0;
  double bleu = 0.0;
};

// Teacher-forced loss and next-token accuracy plus BLEU of greedy outputs,
// with dropout off.
EvalMetrics evaluate(const Transformer& model, const std::vector<SentencePair>& dataset, int batch_size = 32);

// --- checkpoints ---------------------------------------------------------

inline constexpr std::uint16_t kCheckpointVersion = 1;

void save_checkpoint(const TrainState& state, const std::string& path);
TrainState load_checkpoint(const std::string& path, const TransformerConfig& config);
// Snaps parameters and Adam moments to the values a checkpoint stores, so a
// run continuing in memory and one resumed from disk follow the same path.
void round_to_checkpoint_precision(TrainState& state);

// --- training loop -------------------------------------------------------

struct TrainConfig {
  TransformerConfig model;
  OptimConfig optim;
  bool scheduled = false;
  MixStrategy mix;
  bool backprop_through_first = false;
  TeacherForcingSchedule schedule = TeacherForcingSchedule::constant(1.0);
  std::int64_t max_steps = 3000;
  std::int64_t validation_interval = 250;
  int batch_size = 32;
  std::uint64_t seed = 1;
  std::string out_dir;  // empty: keep everything in memory

  void validate() const;
};

struct MetricsRow {
  std::int64_t step = 0;
  std::string split;
  double loss = 0.0;
  double token_acc = 0.0;
  double bleu = 0.0;
  double tf_prob = 1.0;
  double mix_fraction = 0.0;
  double lr = 0.0;
};

inline constexpr const char* kMetricsHeader = "step,split,loss,token_acc,bleu,tf_prob,mix_fraction,lr";
std::string format_metrics_row(const MetricsRow& row);

struct TrainReport {
  std::vector<MetricsRow> rows;
  std::vector<StepResult> steps;
  std::int64_t best_step = 0;
  EvalMetrics best_dev;
  EvalMetrics best_test;
  std::string best_checkpoint;
  std::int64_t final_step = 0;
  double mean_step_seconds = 0.0;
};

// Trains from state (fresh or resumed) until state.step == max_steps,
// validating every validation_interval steps and at step 0 of a fresh run.
// With out_dir set, writes metrics.csv, best.ckpt and last.ckpt there.
TrainReport train_loop(const TrainConfig& config, const ParallelCorpus& train, const ParallelCorpus& dev,
                       const ParallelCorpus& test, TrainState& state);

}  // namespace sstx
