// Acceptance checks A1-A9. Prints one PASS/FAIL line per criterion; A5 is
// informational and never fails the run. Pass criterion ids as arguments to
// run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "sstx/cli.hpp"
#include "sstx/grad_suite.hpp"
#include "sstx/trainer.hpp"

using namespace sstx;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path work_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("sstx_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

struct Desk {
  PreparedData data;
  TrainConfig train;
};

Desk desk(const std::vector<std::string>& overrides = {}) {
  Config c = desk_preset();
  for (const auto& o : overrides) c.set_override(o);
  Desk d{prepare_data(c), {}};
  d.train = train_config_from(c, std::max(d.data.source_vocab.size(), d.data.target_vocab.size()));
  return d;
}

// Same batch sampling as train_loop, without validation.
std::vector<double> step_losses(const Desk& d, const TrainConfig& config, int steps) {
  TrainState state(config.model, config.seed);
  std::vector<const SentencePair*> picks(static_cast<std::size_t>(config.batch_size));
  std::vector<double> losses;
  for (int i = 0; i < steps; ++i) {
    for (auto& p : picks) p = &d.data.train.pairs[state.rng.below(d.data.train.pairs.size())];
    const Batch batch = make_batch(picks, config.model);
    losses.push_back(config.scheduled ? train_step_scheduled(state, batch, config.mix, config.schedule,
                                                             config.backprop_through_first, config.optim)
                                            .loss
                                      : train_step_baseline(state, batch, config.optim).loss);
  }
  return losses;
}

double max_relative_gap(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(std::abs(b[i]), 1e-300));
  return a.size() == b.size() ? worst : INFINITY;
}

Outcome a1() {
  const Desk d = desk();
  auto t0 = Clock::now();
  const std::vector<double> baseline = step_losses(d, d.train, 100);
  const double baseline_seconds = seconds_since(t0);
  Outcome out{true, ""};
  double worst_gap = 0.0, worst_seconds = 0.0;
  for (MixKind kind : {MixKind::argmax, MixKind::topk, MixKind::softmax, MixKind::gumbel, MixKind::sparsemax}) {
    for (bool through_first : {false, true}) {
      TrainConfig config = d.train;
      config.scheduled = true;
      config.mix.kind = kind;
      config.backprop_through_first = through_first;
      config.schedule = TeacherForcingSchedule::constant(1.0);
      if (through_first && !config.mix.sums_full_vocabulary()) continue;
      t0 = Clock::now();
      const double gap = max_relative_gap(step_losses(d, config, 100), baseline);
      const double pair_seconds = baseline_seconds + seconds_since(t0);
      worst_gap = std::max(worst_gap, gap);
      worst_seconds = std::max(worst_seconds, pair_seconds);
      if (!(gap <= 1e-9) || pair_seconds >= 60.0) {
        out.pass = false;
        out.detail += fmt(" [%s%s gap %.3g, %.1fs]", std::string(to_string(kind)).c_str(),
                          through_first ? "+first" : "", gap, pair_seconds);
      }
    }
  }
  out.detail = fmt("8 strategy/mode variants x 100 steps, max relative loss gap %.3g (<= 1e-9), "
                   "slowest baseline+scheduled pair %.1fs (< 60s)",
                   worst_gap, worst_seconds) + out.detail;
  return out;
}

Outcome a2() {
  const auto t0 = Clock::now();
  const GradSuiteReport report = run_grad_suite(GradSuiteOptions{});
  const double secs = seconds_since(t0);
  std::string worst_case;
  double worst = -1.0;
  int resampled = 0;
  for (const auto& c : report.cases) {
    resampled += c.resampled;
    if (c.max_error > worst) {
      worst = c.max_error;
      worst_case = c.name;
    }
    std::printf("    %-44s %.3e  resampled %d\n", c.name.c_str(), c.max_error, c.resampled);
  }
  std::printf("    note: points whose gradient components are too small for h = 1e-5 to resolve at 1e-5\n"
              "          above double rounding noise are redrawn (%d redraws in total); admissibility is\n"
              "          decided by a coarse-step probe that never looks at the analytic gradient\n",
              resampled);
  return {report.passed() && secs < 120.0,
          fmt("%zu cases, max relative error %.3e at %s (<= 1e-5), %.1fs (< 120s)", report.cases.size(), worst,
              worst_case.c_str(), secs)};
}

Outcome a3() {
  const auto t0 = Clock::now();
  using Row = kernels::RowVector<double>;
  auto row = [](std::initializer_list<double> v) {
    Row r(static_cast<Index>(v.size()));
    Index i = 0;
    for (double x : v) r(i++) = x;
    return r;
  };
  const bool worked = kernels::sparsemax(row({0.5, 0.5})) == row({0.5, 0.5}) &&
                      kernels::sparsemax(row({2.0, 0.0})) == row({1.0, 0.0}) &&
                      kernels::sparsemax(row({1.2, 1.0, -5.0})) == row({0.6, 0.4, 0.0});
  Rng rng(2024);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Index n = 1 + static_cast<Index>(rng.below(6));
    Row z(n);
    for (Index j = 0; j < n; ++j) z(j) = 4.0 * rng.uniform() - 2.0;
    worst = std::max(worst, (kernels::sparsemax(z) - oracle::brute_sparsemax(z)).cwiseAbs().maxCoeff());
  }
  const double secs = seconds_since(t0);
  return {worked && worst <= 1e-9 && secs < 10.0,
          fmt("worked values %s, max abs gap vs exhaustive projection %.3g over 1000 vectors (<= 1e-9), %.2fs",
              worked ? "exact" : "WRONG", worst, secs)};
}

struct DeskRun {
  TrainReport report;
  double seconds = 0.0;
};

DeskRun desk_run(const Desk& d, const TrainConfig& config) {
  TrainState state(config.model, config.seed);
  const auto t0 = Clock::now();
  DeskRun r{train_loop(config, d.data.train, d.data.dev, d.data.test, state), 0.0};
  r.seconds = seconds_since(t0);
  return r;
}

DeskRun g_baseline_run, g_scheduled_run;
bool g_have_desk_runs = false;

void ensure_desk_runs() {
  if (g_have_desk_runs) return;
  const Desk base = desk();
  g_baseline_run = desk_run(base, base.train);
  const Desk sched = desk({"train.mode=scheduled", "mix.strategy=softmax", "mix.alpha=1", "schedule.kind=linear",
                           "schedule.k=1", "schedule.c=0.00033333333333333332", "schedule.epsilon=0.3"});
  g_scheduled_run = desk_run(sched, sched.train);
  g_have_desk_runs = true;
}

Outcome a4() {
  ensure_desk_runs();
  auto ok = [](const DeskRun& r) {
    return r.report.best_test.token_accuracy >= 0.99 && r.report.best_test.bleu >= 99.0 &&
           r.report.final_step <= 3000 && r.seconds <= 600.0;
  };
  auto describe = [](const char* name, const DeskRun& r) {
    return fmt("%s: test acc %.4f bleu %.2f (best step %lld), %.0fs", name, r.report.best_test.token_accuracy,
               r.report.best_test.bleu, static_cast<long long>(r.report.best_step), r.seconds);
  };
  return {ok(g_baseline_run) && ok(g_scheduled_run),
          describe("baseline", g_baseline_run) + "; " + describe("scheduled softmax", g_scheduled_run) +
              " (need acc >= 0.99, bleu >= 99, <= 600s)"};
}

Outcome a5() {
  const int steps = 2000;
  std::vector<std::pair<std::string, double>> results;
  for (MixKind kind : {MixKind::argmax, MixKind::topk, MixKind::softmax, MixKind::gumbel, MixKind::sparsemax}) {
    const Desk d = desk({"task.kind=reverse", "train.mode=scheduled", "schedule.kind=linear", "schedule.k=1",
                         "schedule.c=0.001", "schedule.epsilon=0", "mix.strategy=" + std::string(to_string(kind)),
                         "train.max_steps=" + std::to_string(steps)});
    const DeskRun r = desk_run(d, d.train);
    double best_acc = 0.0;
    for (const auto& row : r.report.rows) best_acc = std::max(best_acc, row.token_acc);
    results.emplace_back(std::string(to_string(kind)), best_acc);
  }
  bool trend = true;
  std::string detail = fmt("reverse task, eps 0, c 1/1000, %d steps, best dev token acc:", steps);
  for (const auto& [name, acc] : results) {
    detail += fmt(" %s %.4f", name.c_str(), acc);
    if (name != "argmax" && results.front().second > acc) trend = false;
  }
  detail += trend ? " (argmax <= every dense mix)" : " (argmax beats some dense mix)";
  return {trend, detail};
}

Outcome a6() {
  double worst = 0.0;
  bool changed_when_expected = true;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed, 6);
    TransformerConfig c;
    c.n_layers = 1 + static_cast<int>(rng.below(2));
    c.n_heads = 2;
    c.d_model = 8 * (1 + static_cast<int>(rng.below(2)));
    c.d_ff = 16;
    c.vocab_size = 9;
    c.max_len = 10;
    c.dropout = 0.0;
    Transformer model(c, seed);
    auto random_ids = [&](Index rows, Index cols) {
      IdMatrix m(rows, cols);
      for (Index i = 0; i < m.size(); ++i) m.data()[i] = 3 + static_cast<int>(rng.below(6));
      return m;
    };
    const Index len = 7;
    const IdMatrix src = random_ids(1, 5);
    const Memory memory = model.encode(src);

    // Decoder: inputs after position j never reach logits at positions <= j.
    IdMatrix tgt = random_ids(1, len);
    tgt(0, 0) = c.bos_id;
    const Matrix base = model.decode(tgt, memory).value();
    for (Index j = 0; j + 1 < len; ++j) {
      IdMatrix changed = tgt;
      for (Index p = j + 1; p < len; ++p) changed(0, p) = 3 + static_cast<int>(rng.below(6));
      const Matrix emb = model.embed_target(changed).value() +
                         Matrix::NullaryExpr(len, c.d_model, [&] { return rng.uniform() - 0.5; });
      Matrix noisy = emb;
      noisy.topRows(j + 1) = model.embed_target(tgt).value().topRows(j + 1);
      const Matrix out = model.decode(Tensor(noisy), 1, len, memory).value();
      worst = std::max(worst, (out.topRows(j + 1) - base.topRows(j + 1)).cwiseAbs().maxCoeff());
      if ((out.bottomRows(len - j - 1) - base.bottomRows(len - j - 1)).cwiseAbs().maxCoeff() == 0.0)
        changed_when_expected = false;
    }

    // Two-pass: second-pass logits at position j depend on gold inputs <= j only.
    std::vector<SentencePair> pair{{{4, 5, 6, 7, 8}, {}}};
    for (Index p = 1; p < len - 1; ++p) pair[0].target.push_back(tgt(0, p));
    const Batch batch = make_batch(std::span<const SentencePair>(pair), c);
    MixStrategy mix;
    mix.kind = static_cast<MixKind>(2 + rng.below(3));
    const std::uint64_t stream_seed = rng();
    Rng s1(stream_seed);
    StepStreams st1 = split_step_streams(s1);
    const Matrix two_pass = scheduled_forward(model, batch, mix, 0.3, false, st1, false).second_pass_logits.value();
    const Index T = two_pass.rows();
    for (Index j = 1; j + 1 < T; ++j) {
      Batch changed = batch;
      for (Index p = j + 1; p < T; ++p) changed.target(0, p) = 3 + static_cast<int>(rng.below(6));
      Rng s2(stream_seed);
      StepStreams st2 = split_step_streams(s2);
      const Matrix out = scheduled_forward(model, changed, mix, 0.3, false, st2, false).second_pass_logits.value();
      worst = std::max(worst, (out.topRows(j) - two_pass.topRows(j)).cwiseAbs().maxCoeff());
    }

    // Encoder: padding appended to the source changes nothing downstream.
    IdMatrix padded = IdMatrix::Constant(1, 8, c.pad_id);
    padded.leftCols(5) = src;
    const Memory padded_memory = model.encode(padded);
    worst = std::max(worst, (padded_memory.states.value().topRows(5) - memory.states.value()).cwiseAbs().maxCoeff());
    worst = std::max(worst, (model.decode(tgt, padded_memory).value() - base).cwiseAbs().maxCoeff());
  }
  return {worst <= 1e-9 && changed_when_expected,
          fmt("50 random models: max abs change at positions that must be unaffected %.3g (<= 1e-9)%s", worst,
              changed_when_expected ? "" : "; some perturbation had no effect at all")};
}

Outcome a7() {
  const Desk d = desk({"train.mode=scheduled", "mix.strategy=gumbel", "train.max_steps=200",
                       "train.validation_interval=50"});
  const fs::path dir = work_dir("a7");
  auto run = [&](const std::string& name, std::int64_t max_steps, TrainState& state) {
    TrainConfig config = d.train;
    config.max_steps = max_steps;
    config.out_dir = (dir / name).string();
    return train_loop(config, d.data.train, d.data.dev, d.data.test, state);
  };
  TrainState s1(d.train.model, d.train.seed), s2(d.train.model, d.train.seed);
  const TrainReport straight = run("one", 200, s1);
  run("two", 200, s2);
  const bool identical = slurp(dir / "one" / "metrics.csv") == slurp(dir / "two" / "metrics.csv") &&
                         !slurp(dir / "one" / "metrics.csv").empty();

  TrainState first(d.train.model, d.train.seed);
  run("resume", 100, first);
  TrainState resumed = load_checkpoint((dir / "resume" / "last.ckpt").string(), d.train.model);
  const TrainReport rest = run("resume", 200, resumed);
  std::vector<double> a, b;
  for (const auto& s : rest.steps) a.push_back(s.loss);
  for (std::size_t i = 100; i < straight.steps.size(); ++i) b.push_back(straight.steps[i].loss);
  const double gap = max_relative_gap(a, b);
  return {identical && gap <= 1e-6,
          fmt("metrics CSVs %s; resume at step 100 of 200: max relative loss gap %.3g (<= 1e-6)",
              identical ? "byte-identical" : "DIFFER", gap)};
}

Outcome a8() {
  const auto lin = TeacherForcingSchedule::linear(1.0, 1e-5, 0.1);
  const bool spots = tf_probability(lin, 0) == 1.0 && tf_probability(lin, 50000) == 0.5 &&
                     tf_probability(lin, 1000000) == 0.1 &&
                     tf_probability({ScheduleKind::exponential, 0.0, 0.9999, 0.0, 0}, 0) == 1.0;
  Rng rng(8);
  long violations = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    TeacherForcingSchedule s;
    s.kind = static_cast<ScheduleKind>(rng.below(4));
    s.epsilon = 0.99 * rng.uniform();
    s.pure_tf_steps = static_cast<std::int64_t>(rng.below(1000));
    switch (s.kind) {
      case ScheduleKind::linear:
        s.k = 0.5 + rng.uniform();
        s.c = std::pow(10.0, -6.0 + 5.0 * rng.uniform());
        break;
      case ScheduleKind::exponential: s.k = 1.0 - std::pow(10.0, -5.0 + 4.9 * rng.uniform()); break;
      case ScheduleKind::inverse_sigmoid: s.k = 1.0 + std::pow(10.0, 4.0 * rng.uniform()); break;
      case ScheduleKind::constant: s.k = rng.uniform(); break;
    }
    double previous = 1.0;
    std::int64_t step = 0;
    for (int i = 0; i < 100; ++i) {
      const double t = tf_probability(s, step);
      const double floor = s.kind == ScheduleKind::constant ? 0.0 : s.epsilon;
      if (t > previous || t > 1.0 || t < floor) ++violations;
      previous = t;
      step += static_cast<std::int64_t>(rng.below(3000));
    }
  }
  double branch_gap = 0.0;
  for (std::int64_t w : {1, 10, 400, 4000, 20000, 123457}) {
    const double scale = std::pow(64.0, -0.5);
    const double decay = scale * std::pow(static_cast<double>(w), -0.5);
    const double warm = scale * static_cast<double>(w) * std::pow(static_cast<double>(w), -1.5);
    const double lr = learning_rate(w, 64, w, 1.0);
    branch_gap = std::max({branch_gap, std::abs(decay - warm), std::abs(lr - decay), std::abs(lr - warm)});
  }
  return {spots && violations == 0 && branch_gap <= 1e-12,
          fmt("spot values %s; %ld monotonicity/range violations over 10^4 parameterizations; "
              "LR branch gap at step = warmup %.3g (<= 1e-12)",
              spots ? "exact" : "WRONG", violations, branch_gap)};
}

Outcome a9() {
  ensure_desk_runs();
  const double base = g_baseline_run.report.mean_step_seconds;
  const double sched = g_scheduled_run.report.mean_step_seconds;
  const double ratio = sched / base;
  return {ratio <= 2.5, fmt("mean step %.1f ms scheduled vs %.1f ms baseline, ratio %.2f (<= 2.5)", 1e3 * sched,
                            1e3 * base, ratio)};
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    const char* id;
    const char* title;
    bool blocking;
    std::function<Outcome()> check;
  };
  const std::vector<Criterion> criteria{
      {"A1", "baseline equivalence under full teacher forcing", true, a1},
      {"A2", "gradient suite", true, a2},
      {"A3", "sparsemax oracle", true, a3},
      {"A4", "end-to-end learning on the desk copy task", true, a4},
      {"A5", "argmax vs dense mixes on reverse (informational)", false, a5},
      {"A6", "causality and masking", true, a6},
      {"A7", "determinism and resume", true, a7},
      {"A8", "schedules and learning rate", true, a8},
      {"A9", "scheduled step cost", true, a9},
  };
  std::set<std::string> only(argv + 1, argv + argc);
  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    std::fflush(stdout);
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const char* verdict = o.pass ? "PASS" : (c.blocking ? "FAIL" : "FAIL (non-blocking)");
    std::printf("%s %s %s: %s\n", verdict, c.id, c.title, o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass && c.blocking) ++failures;
  }
  std::printf("%d blocking failure%s\n", failures, failures == 1 ? "" : "s");
  return failures == 0 ? 0 : 1;
}
