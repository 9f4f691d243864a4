#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "sstx/grad_suite.hpp"
#include "sstx/trainer.hpp"

using namespace sstx;
namespace fs = std::filesystem;

namespace {

TransformerConfig tiny_config() {
  TransformerConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.vocab_size = 10;
  c.max_len = 8;
  c.dropout = 0.1;
  return c;
}

TaskSplits tiny_task() {
  TaskSpec spec;
  spec.vocab_size = 10;
  spec.min_len = 2;
  spec.max_len = 5;
  spec.n_train = 200;
  spec.n_dev = 20;
  spec.n_test = 20;
  spec.seed = 3;
  return generate_task(spec);
}

TrainConfig tiny_train_config(bool scheduled) {
  TrainConfig t;
  t.model = tiny_config();
  t.scheduled = scheduled;
  t.schedule = TeacherForcingSchedule::linear(1.0, 1.0 / 40.0, 0.3);
  t.max_steps = 30;
  t.validation_interval = 7;
  t.batch_size = 8;
  t.seed = 5;
  return t;
}

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("sstx_test_trainer_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Batch random_batch(const TransformerConfig& c, Rng& rng, int n = 4) {
  std::vector<SentencePair> pairs(static_cast<std::size_t>(n));
  for (auto& p : pairs) {
    const int len = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(c.max_len - 2)));
    for (int i = 0; i < len; ++i) p.source.push_back(4 + static_cast<int>(rng.below(static_cast<std::uint64_t>(c.vocab_size - 4))));
    p.target = p.source;
  }
  return make_batch(std::span<const SentencePair>(pairs), c);
}

double relative(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

}  // namespace

TEST_CASE("batches pad on the right and wrap targets in BOS and EOS") {
  const TransformerConfig c = tiny_config();
  const std::vector<SentencePair> pairs{{{4, 5, 6}, {7, 8}}, {{9}, {4, 5, 6, 7}}};
  const Batch b = make_batch(std::span<const SentencePair>(pairs), c);
  IdMatrix src(2, 3), tgt(2, 6);
  src << 4, 5, 6, 9, 0, 0;
  tgt << 1, 7, 8, 2, 0, 0, 1, 4, 5, 6, 7, 2;
  CHECK(b.source == src);
  CHECK(b.target == tgt);
  IdMatrix in(2, 5), out(2, 5);
  in << 1, 7, 8, 0, 0, 1, 4, 5, 6, 7;
  out << 7, 8, 2, 0, 0, 4, 5, 6, 7, 2;
  CHECK(b.decoder_input(c.pad_id) == in);
  CHECK(b.gold_output() == out);
  CHECK(b.output_pad_mask(c.pad_id) == std::vector<std::uint8_t>{0, 0, 0, 1, 1, 0, 0, 0, 0, 0});
  CHECK_NOTHROW(b.validate(c));

  const std::vector<SentencePair> too_long{{{4}, std::vector<int>(static_cast<std::size_t>(c.max_len), 5)}};
  CHECK_THROWS_AS(make_batch(std::span<const SentencePair>(too_long), c), SequenceLengthError);
}

TEST_CASE("invalid batches are rejected") {
  const TransformerConfig c = tiny_config();
  Batch b;
  b.source = IdMatrix::Constant(1, 2, 4);
  b.target.resize(1, 4);
  b.target << 4, 5, 2, 0;
  CHECK_THROWS_AS(b.validate(c), ContractError);
  b.target << 1, 5, 6, 7;
  CHECK_THROWS_AS(b.validate(c), ContractError);
  b.target << 1, 0, 2, 0;
  CHECK_THROWS_AS(b.validate(c), ContractError);
  b.target << 1, 2, 5, 0;
  CHECK_THROWS_AS(b.validate(c), ContractError);
  b.target << 1, 5, 2, 0;
  CHECK_NOTHROW(b.validate(c));
}

TEST_CASE("initial loss is close to log vocabulary size") {
  const TransformerConfig c = TransformerConfig::desk();
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Transformer model(c, seed);
    Rng rng(seed);
    const double loss = baseline_loss(model, random_batch(c, rng, 32), ForwardMode::eval()).item();
    CHECK(std::abs(loss - std::log(16.0)) <= 0.1 * std::log(16.0));
  }
}

TEST_CASE("identically seeded steps give identical losses") {
  const TransformerConfig c = tiny_config();
  TrainState a(c, 9), b(c, 9);
  Rng ra(1), rb(1);
  OptimConfig optim;
  MixStrategy mix;
  for (int i = 0; i < 10; ++i) {
    const Batch ba = random_batch(c, ra), bb = random_batch(c, rb);
    CHECK(train_step_baseline(a, ba, optim).loss == train_step_baseline(b, bb, optim).loss);
    const auto sa = train_step_scheduled(a, ba, mix, TeacherForcingSchedule::constant(0.5), true, optim);
    const auto sb = train_step_scheduled(b, bb, mix, TeacherForcingSchedule::constant(0.5), true, optim);
    CHECK(sa.loss == sb.loss);
    CHECK(sa.mix_fraction == sb.mix_fraction);
  }
  CHECK(a.step == 20);
}

TEST_CASE("constant full teacher forcing reproduces the baseline bitwise") {
  const TransformerConfig c = tiny_config();
  OptimConfig optim;
  for (MixKind kind : {MixKind::argmax, MixKind::topk, MixKind::softmax, MixKind::gumbel, MixKind::sparsemax}) {
    MixStrategy mix;
    mix.kind = kind;
    const bool modes[] = {false, true};
    for (bool through_first : modes) {
      if (through_first && !mix.sums_full_vocabulary()) continue;
      TrainState base(c, 4), sched(c, 4);
      Rng rng(2);
      for (int i = 0; i < 20; ++i) {
        const Batch batch = random_batch(c, rng);
        const double lb = train_step_baseline(base, batch, optim).loss;
        const StepResult rs =
            train_step_scheduled(sched, batch, mix, TeacherForcingSchedule::constant(1.0), through_first, optim);
        CHECK(lb == rs.loss);
        CHECK(rs.mix_fraction == 0.0);
      }
      for (std::size_t p = 0; p < base.model.parameters().size(); ++p)
        CHECK(base.model.parameters()[p].tensor.value() == sched.model.parameters()[p].tensor.value());
    }
  }
}

TEST_CASE("zero teacher forcing with argmax feeds pass-1 predictions") {
  const TransformerConfig c = tiny_config();
  Transformer model(c, 3);
  Rng rng(3);
  const Batch batch = random_batch(c, rng);
  Rng stream_seed(8);
  StepStreams streams = split_step_streams(stream_seed);
  MixStrategy mix;
  mix.kind = MixKind::argmax;
  const ScheduledForward fwd = scheduled_forward(model, batch, mix, 0.0, false, streams, false);
  CHECK(fwd.mixed.mixed == fwd.mixed.eligible);
  const IdMatrix inputs = batch.decoder_input(c.pad_id);
  const Index T = inputs.cols();
  for (Index i = 0; i < inputs.size(); ++i) {
    if (i % T == 0 || inputs.data()[i] == c.pad_id) continue;
    const Index predicted = kernels::argmax(fwd.first_pass_logits.value().row(i - 1));
    CHECK(fwd.mixed.embeddings.value().row(i) == model.target_embedding().value().row(predicted));
  }
}

TEST_CASE("the loss touches pass-1 logits only through the mix") {
  const TransformerConfig c = tiny_config();
  Transformer model(c, 5);
  Rng rng(5);
  const Batch batch = random_batch(c, rng);
  MixStrategy mix;
  Rng seeds(1);

  StepStreams s1 = split_step_streams(seeds);
  const ScheduledForward detached = scheduled_forward(model, batch, mix, 0.0, false, s1, false);
  backward(detached.loss);
  CHECK_FALSE(detached.first_pass_logits.requires_grad());

  model.zero_grad();
  StepStreams s2 = split_step_streams(seeds);
  const ScheduledForward gold_only = scheduled_forward(model, batch, mix, 1.0, true, s2, false);
  backward(gold_only.loss);
  CHECK(gold_only.first_pass_logits.requires_grad());
  if (gold_only.first_pass_logits.has_grad()) CHECK(gold_only.first_pass_logits.grad().cwiseAbs().maxCoeff() == 0.0);

  model.zero_grad();
  StepStreams s3 = split_step_streams(seeds);
  const ScheduledForward mixed = scheduled_forward(model, batch, mix, 0.0, true, s3, false);
  backward(mixed.loss);
  CHECK(mixed.first_pass_logits.grad().cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("two-pass loss gradients pass finite differences in both modes") {
  const GradSuiteReport report = check_two_pass_model(GradSuiteOptions{});
  CHECK(report.cases.size() == 6);
  for (const auto& c : report.cases) {
    INFO(c.name << " " << c.worst << " resampled " << c.resampled);
    CHECK(c.max_error <= 1e-5);
  }
}

TEST_CASE("adam leaves parameters alone under zero gradients") {
  std::vector<NamedParameter> params{{"w", Tensor(Matrix::Constant(2, 3, 0.7), true)}};
  backward(scale(sum(params[0].tensor), 0.0));
  AdamState adam;
  OptimConfig optim;
  for (std::int64_t t = 1; t <= 5; ++t) adam_update(params, adam, t, 0.1, optim);
  CHECK(params[0].tensor.value() == Matrix::Constant(2, 3, 0.7));
}

TEST_CASE("first adam step moves each parameter by about lr") {
  Rng rng(1);
  Matrix start(3, 4);
  for (Index i = 0; i < start.size(); ++i) start.data()[i] = rng.uniform() - 0.5;
  std::vector<NamedParameter> params{{"w", Tensor(start, true)}};
  const Matrix weights = Matrix::NullaryExpr(3, 4, [&] { return 4.0 * rng.uniform() - 2.0; });
  backward(sum(multiply(params[0].tensor, Tensor(weights))));
  AdamState adam;
  adam_update(params, adam, 1, 0.01, OptimConfig{});
  const Matrix moved = params[0].tensor.value() - start;
  for (Index i = 0; i < moved.size(); ++i)
    CHECK(moved.data()[i] == doctest::Approx(-0.01 * (weights.data()[i] > 0 ? 1.0 : -1.0)).epsilon(1e-6));
}

TEST_CASE("adam minimises a quadratic") {
  // f(x) = 0.5 x'Ax - b'x, optimum A^-1 b.
  Matrix A(2, 2);
  A << 3.0, 0.5, 0.5, 1.0;
  Matrix b(2, 1);
  b << 1.0, -2.0;
  const Matrix optimum = A.ldlt().solve(b);
  std::vector<NamedParameter> params{{"x", Tensor(Matrix::Zero(2, 1), true)}};
  AdamState adam;
  OptimConfig optim;
  for (std::int64_t t = 1; t <= 5000; ++t) {
    params[0].tensor.zero_grad();
    const Tensor& x = params[0].tensor;
    backward(add(scale(matmul(transpose(x), matmul(Tensor(A), x)), 0.5), scale(matmul(transpose(Tensor(b)), x), -1.0)));
    adam_update(params, adam, t, 0.01, optim);
  }
  CHECK((params[0].tensor.value() - optimum).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("gradient clipping bounds the global norm") {
  std::vector<NamedParameter> params{{"a", Tensor(Matrix::Zero(1, 2), true)}, {"b", Tensor(Matrix::Zero(1, 1), true)}};
  Matrix wa(1, 2), wb(1, 1);
  wa << 3.0, 4.0;
  wb << 12.0;
  backward(add(sum(multiply(params[0].tensor, Tensor(wa))), sum(multiply(params[1].tensor, Tensor(wb)))));
  CHECK(clip_grad_norm(params, 5.0) == doctest::Approx(13.0));
  const double norm = std::sqrt(params[0].tensor.grad().squaredNorm() + params[1].tensor.grad().squaredNorm());
  CHECK(norm == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(clip_grad_norm(params, 10.0) == doctest::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("evaluation loss equals the training-path loss with dropout off") {
  const TransformerConfig c = tiny_config();
  Transformer model(c, 2);
  const TaskSplits task = tiny_task();
  const EvalMetrics m = evaluate(model, task.dev.pairs, 64);
  const Batch batch = make_batch(std::span<const SentencePair>(task.dev.pairs), c);
  CHECK(m.loss == doctest::Approx(baseline_loss(model, batch, ForwardMode::eval()).item()).epsilon(1e-12));
  CHECK(m.bleu >= 0.0);
  CHECK(m.bleu <= 100.0);
  CHECK(evaluate(model, task.dev.pairs, 3).loss == doctest::Approx(m.loss).epsilon(1e-12));
  CHECK_THROWS_AS(evaluate(model, {}, 8), ContractError);
}

TEST_CASE("untrained accuracy sits near chance") {
  const TransformerConfig c = tiny_config();
  const TaskSplits task = tiny_task();
  double total = 0.0;
  const int models = 20;
  for (int seed = 0; seed < models; ++seed) total += evaluate(Transformer(c, 100 + static_cast<std::uint64_t>(seed)), task.dev.pairs).token_accuracy;
  const double chance = 1.0 / c.vocab_size;
  CHECK(total / models >= 0.25 * chance);
  CHECK(total / models <= 2.5 * chance);
}

TEST_CASE("checkpoints round trip at single precision") {
  const fs::path dir = temp_dir("roundtrip");
  const TransformerConfig c = tiny_config();
  TrainState state(c, 6);
  Rng rng(6);
  for (int i = 0; i < 3; ++i) train_step_baseline(state, random_batch(c, rng), OptimConfig{});
  const std::string path = (dir / "a.ckpt").string();
  save_checkpoint(state, path);
  CHECK_FALSE(fs::exists(path + ".tmp"));
  const TrainState loaded = load_checkpoint(path, c);
  CHECK(loaded.step == 3);
  CHECK(loaded.rng == state.rng);
  for (std::size_t i = 0; i < state.model.parameters().size(); ++i) {
    const Matrix& orig = state.model.parameters()[i].tensor.value();
    CHECK(loaded.model.parameters()[i].tensor.value() == orig.cast<float>().cast<double>());
    CHECK(loaded.adam.m[i] == state.adam.m[i].cast<float>().cast<double>());
    CHECK(loaded.adam.v[i] == state.adam.v[i].cast<float>().cast<double>());
  }

  const TaskSplits task = tiny_task();
  save_checkpoint(loaded, (dir / "b.ckpt").string());
  CHECK(slurp(path) == slurp(dir / "b.ckpt"));
  const TrainState again = load_checkpoint((dir / "b.ckpt").string(), c);
  const EvalMetrics ma = evaluate(loaded.model, task.dev.pairs);
  const EvalMetrics mb = evaluate(again.model, task.dev.pairs);
  CHECK(ma.loss == mb.loss);
  CHECK(ma.token_accuracy == mb.token_accuracy);
  CHECK(ma.bleu == mb.bleu);
  CHECK(relative(ma.loss, evaluate(state.model, task.dev.pairs).loss) <= 1e-5);
}

TEST_CASE("damaged checkpoints raise format errors") {
  const fs::path dir = temp_dir("corrupt");
  const TransformerConfig c = tiny_config();
  TrainState state(c, 7);
  const std::string path = (dir / "good.ckpt").string();
  save_checkpoint(state, path);
  const std::string good = slurp(path);
  auto write = [&](const std::string& name, const std::string& bytes) {
    std::ofstream((dir / name).string(), std::ios::binary) << bytes;
    return (dir / name).string();
  };
  std::string bad_magic = good;
  bad_magic[1] = 'X';
  CHECK_THROWS_AS(load_checkpoint(write("magic", bad_magic), c), FormatError);
  std::string bad_version = good;
  bad_version[4] = 9;
  CHECK_THROWS_AS(load_checkpoint(write("version", bad_version), c), FormatError);
  CHECK_THROWS_AS(load_checkpoint(write("truncated", good.substr(0, good.size() / 2)), c), FormatError);
  CHECK_THROWS_AS(load_checkpoint(write("short", good.substr(0, good.size() - 1)), c), FormatError);
  CHECK_THROWS_AS(load_checkpoint(write("trailing", good + "x"), c), FormatError);
  std::string bad_name = good;
  bad_name[good.find("embedding")] = 'E';
  CHECK_THROWS_AS(load_checkpoint(write("name", bad_name), c), FormatError);
  TransformerConfig wider = c;
  wider.d_ff = 64;
  CHECK_THROWS_AS(load_checkpoint(path, wider), FormatError);
  CHECK_THROWS_AS(load_checkpoint((dir / "missing.ckpt").string(), c), DataError);
}

TEST_CASE("resuming from a checkpoint follows the uninterrupted run") {
  const fs::path dir = temp_dir("resume");
  const TaskSplits task = tiny_task();
  for (bool scheduled : {false, true}) {
    TrainConfig config = tiny_train_config(scheduled);
    config.max_steps = 40;
    config.validation_interval = 20;
    TrainState straight(config.model, config.seed);
    const TrainReport full = train_loop(config, task.train, task.dev, task.test, straight);

    TrainConfig first = config;
    first.max_steps = 20;
    first.out_dir = (dir / (scheduled ? "s" : "b")).string();
    TrainState interrupted(config.model, config.seed);
    train_loop(first, task.train, task.dev, task.test, interrupted);
    TrainState resumed = load_checkpoint(first.out_dir + "/last.ckpt", config.model);
    CHECK(resumed.step == 20);
    const TrainReport rest = train_loop(config, task.train, task.dev, task.test, resumed);
    REQUIRE(rest.steps.size() == 20);
    for (std::size_t i = 0; i < 20; ++i) {
      INFO("step " << 21 + i);
      CHECK(relative(rest.steps[i].loss, full.steps[20 + i].loss) <= 1e-6);
      CHECK(rest.steps[i].loss == full.steps[20 + i].loss);
      CHECK(rest.steps[i].tf_prob == full.steps[20 + i].tf_prob);
    }
  }
}

TEST_CASE("training loop bookkeeping") {
  const TaskSplits task = tiny_task();
  SUBCASE("no steps validates once") {
    TrainConfig config = tiny_train_config(false);
    config.max_steps = 0;
    TrainState state(config.model, config.seed);
    const TrainReport r = train_loop(config, task.train, task.dev, task.test, state);
    CHECK(r.rows.size() == 1);
    CHECK(r.rows[0].step == 0);
    CHECK(r.steps.empty());
  }
  SUBCASE("metrics rows, best checkpoint and determinism") {
    for (bool scheduled : {false, true}) {
      TrainConfig config = tiny_train_config(scheduled);
      config.out_dir = temp_dir(scheduled ? "loop_s1" : "loop_b1").string();
      TrainState a(config.model, config.seed);
      const TrainReport ra = train_loop(config, task.train, task.dev, task.test, a);
      CHECK(ra.rows.size() == 1 + 30 / 7);

      std::ifstream csv(fs::path(config.out_dir) / "metrics.csv");
      std::string line;
      std::getline(csv, line);
      CHECK(line == kMetricsHeader);
      std::int64_t best_step = -1;
      double best_bleu = -1.0;
      std::size_t rows = 0;
      while (std::getline(csv, line)) {
        ++rows;
        std::stringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        REQUIRE(fields.size() == 8);
        CHECK(fields[1] == "dev");
        const double bleu = std::stod(fields[4]);
        if (bleu > best_bleu) {
          best_bleu = bleu;
          best_step = std::stoll(fields[0]);
        }
      }
      CHECK(rows == ra.rows.size());
      CHECK(best_step == ra.best_step);
      CHECK(fs::exists(fs::path(config.out_dir) / "best.ckpt"));
      CHECK(fs::exists(fs::path(config.out_dir) / "last.ckpt"));
      CHECK(load_checkpoint((fs::path(config.out_dir) / "best.ckpt").string(), config.model).step == ra.best_step);

      const std::string first_csv = slurp(fs::path(config.out_dir) / "metrics.csv");
      config.out_dir = temp_dir(scheduled ? "loop_s2" : "loop_b2").string();
      TrainState b(config.model, config.seed);
      train_loop(config, task.train, task.dev, task.test, b);
      CHECK(slurp(fs::path(config.out_dir) / "metrics.csv") == first_csv);
      if (scheduled) CHECK(ra.steps.back().tf_prob < 1.0);
    }
  }
  SUBCASE("invalid settings") {
    TrainConfig config = tiny_train_config(false);
    config.validation_interval = 0;
    TrainState state(config.model, config.seed);
    CHECK_THROWS_AS(train_loop(config, task.train, task.dev, task.test, state), ConfigError);
    config = tiny_train_config(true);
    config.mix.kind = MixKind::argmax;
    config.backprop_through_first = true;
    CHECK_THROWS_AS(train_loop(config, task.train, task.dev, task.test, state), UnsupportedCombinationError);
  }
}

TEST_CASE("metrics rows are formatted in fixed column order") {
  MetricsRow r{250, "dev", 0.5, 0.75, 12.5, 0.3, 0.25, 0.001};
  CHECK(format_metrics_row(r) == "250,dev,0.5,0.75,12.5,0.3,0.25,0.001");
}
