#include "sstx/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "sstx/bleu.hpp"
#include "sstx/grad_suite.hpp"

namespace sstx {

namespace fs = std::filesystem;

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "model.n_layers", "model.n_heads", "model.d_model", "model.d_ff", "model.max_len", "model.dropout",
      "model.share_embeddings", "model.share_decoder_out_embedding",
      "schedule.kind", "schedule.epsilon", "schedule.k", "schedule.c", "schedule.pure_tf_steps",
      "optim.warmup_steps", "optim.lr_scale", "optim.clip_norm",
      "mix.strategy", "mix.alpha", "mix.k", "mix.backprop_through_first",
      "train.mode", "train.max_steps", "train.validation_interval", "train.batch_size", "train.seed",
      "task.kind", "task.vocab", "task.min_len", "task.max_len", "task.n_train", "task.n_dev", "task.n_test",
      "task.seed",
      "data.train_src", "data.train_tgt", "data.dev_src", "data.dev_tgt", "data.test_src", "data.test_tgt",
      "data.min_freq", "data.shared_vocab"};
  return keys;
}

int to_int(const Config& c, const std::string& key, std::int64_t fallback) {
  const std::int64_t v = c.get_int(key, fallback);
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
    throw ConfigError(key + " is out of range");
  return static_cast<int>(v);
}

std::string sibling(const std::string& checkpoint, const std::string& name) {
  return (fs::path(checkpoint).parent_path() / name).string();
}

struct RunArtifacts {
  Config config;
  Vocabulary source_vocab, target_vocab;
  TrainConfig train;
};

// Config and vocabularies written next to a checkpoint by `train`.
RunArtifacts load_artifacts(const std::string& checkpoint, const std::string& config_path) {
  RunArtifacts a;
  a.config = Config::load(config_path.empty() ? sibling(checkpoint, "config.txt") : config_path);
  check_known_keys(a.config);
  a.source_vocab = Vocabulary::load(sibling(checkpoint, "vocab.src.txt"));
  a.target_vocab = Vocabulary::load(sibling(checkpoint, "vocab.tgt.txt"));
  a.train = train_config_from(a.config, std::max(a.source_vocab.size(), a.target_vocab.size()));
  return a;
}

std::vector<std::string> strip_specials(const std::vector<std::string>& tokens) {
  std::vector<std::string> out;
  for (const auto& t : tokens)
    if (t != "<pad>" && t != "<s>" && t != "</s>") out.push_back(t);
  return out;
}

nlohmann::json metrics_json(const EvalMetrics& m) {
  return {{"loss", m.loss}, {"token_acc", m.token_accuracy}, {"bleu", m.bleu}};
}

int run_train(const std::string& config_path, std::optional<std::uint64_t> seed, const std::string& out,
              const std::vector<std::string>& overrides, const std::string& resume) {
  Config config = desk_preset();
  if (!config_path.empty()) {
    const Config file = Config::load(config_path);
    for (const auto& [k, v] : file.values()) config.set(k, v);
  }
  for (const auto& o : overrides) config.set_override(o);
  if (seed) config.set("train.seed", std::to_string(*seed));
  check_known_keys(config);

  const PreparedData data = prepare_data(config);
  TrainConfig tc = train_config_from(config, std::max(data.source_vocab.size(), data.target_vocab.size()));
  tc.out_dir = out;
  tc.validate();

  fs::create_directories(out);
  {
    std::ofstream cfg(fs::path(out) / "config.txt");
    if (!cfg) throw DataError("cannot write " + (fs::path(out) / "config.txt").string());
    cfg << config.serialize();
  }
  data.source_vocab.save((fs::path(out) / "vocab.src.txt").string());
  data.target_vocab.save((fs::path(out) / "vocab.tgt.txt").string());

  TrainState state = resume.empty() ? TrainState(tc.model, tc.seed) : load_checkpoint(resume, tc.model);
  const TrainReport report = train_loop(tc, data.train, data.dev, data.test, state);

  nlohmann::json j;
  j["mode"] = tc.scheduled ? "scheduled" : "baseline";
  if (tc.scheduled) {
    j["mix"] = tc.mix.describe();
    j["backprop_through_first"] = tc.backprop_through_first;
    j["schedule"] = std::string(to_string(tc.schedule.kind));
  }
  j["seed"] = tc.seed;
  j["parameters"] = state.model.parameter_count();
  j["final_step"] = report.final_step;
  j["best_step"] = report.best_step;
  j["best_checkpoint"] = report.best_checkpoint;
  j["dev"] = metrics_json(report.best_dev);
  if (!data.test.pairs.empty()) j["test"] = metrics_json(report.best_test);
  j["mean_step_seconds"] = report.mean_step_seconds;
  std::ofstream(fs::path(out) / "report.json") << j.dump(2) << '\n';

  std::printf("best step %lld  dev bleu %.2f  dev acc %.4f", static_cast<long long>(report.best_step),
              report.best_dev.bleu, report.best_dev.token_accuracy);
  if (!data.test.pairs.empty())
    std::printf("  test bleu %.2f  test acc %.4f", report.best_test.bleu, report.best_test.token_accuracy);
  std::printf("\n");
  return kExitOk;
}

int run_evaluate(const std::string& checkpoint, const std::string& src, const std::string& ref,
                 const std::string& config_path) {
  const RunArtifacts a = load_artifacts(checkpoint, config_path);
  const TrainState state = load_checkpoint(checkpoint, a.train.model);
  const ParallelCorpus corpus = load_corpus(src, ref, a.source_vocab, a.target_vocab);
  corpus.validate(a.train.model.vocab_size, a.train.model.vocab_size);
  if (corpus.pairs.empty()) throw DataError(src + ": no sentences");
  const EvalMetrics m = evaluate(state.model, corpus.pairs, a.train.batch_size);
  std::printf("loss %.6f\ntoken_acc %.6f\nbleu %.2f\n", m.loss, m.token_accuracy, m.bleu);
  return kExitOk;
}

int run_decode(const std::string& checkpoint, const std::string& src, const std::string& out,
               const std::string& config_path) {
  const RunArtifacts a = load_artifacts(checkpoint, config_path);
  const TrainState state = load_checkpoint(checkpoint, a.train.model);
  const auto lines = read_token_lines(src);
  const auto& mcfg = a.train.model;
  std::vector<std::vector<std::string>> hyps;
  const std::size_t bs = static_cast<std::size_t>(a.train.batch_size);
  for (std::size_t start = 0; start < lines.size(); start += bs) {
    const std::size_t end = std::min(lines.size(), start + bs);
    std::size_t width = 1;
    for (std::size_t i = start; i < end; ++i) width = std::max(width, lines[i].size());
    if (width > static_cast<std::size_t>(mcfg.max_len))
      throw SequenceLengthError(src + ": sentence longer than max_len " + std::to_string(mcfg.max_len));
    IdMatrix ids = IdMatrix::Constant(static_cast<Index>(end - start), static_cast<Index>(width), mcfg.pad_id);
    for (std::size_t i = start; i < end; ++i) {
      if (lines[i].empty()) throw DataError(src + ":" + std::to_string(i + 1) + ": empty line");
      const auto enc = a.source_vocab.encode(lines[i]);
      for (std::size_t t = 0; t < enc.size(); ++t) ids(static_cast<Index>(i - start), static_cast<Index>(t)) = enc[t];
    }
    for (const auto& h : state.model.greedy_decode(ids, mcfg.max_len))
      hyps.push_back(strip_specials(a.target_vocab.decode(h)));
  }
  if (out.empty()) {
    for (const auto& h : hyps) std::cout << detokenize(h) << '\n';
  } else {
    write_token_lines(out, hyps);
  }
  return kExitOk;
}

int run_gen_task(const TaskSpec& spec, const std::string& out) {
  const TaskSplits splits = generate_task(spec);
  fs::create_directories(out);
  auto write = [&](const ParallelCorpus& c, const std::string& name) {
    std::vector<std::vector<std::string>> src, tgt;
    for (const auto& p : c.pairs) {
      src.push_back(splits.vocab.decode(p.source));
      tgt.push_back(splits.vocab.decode(p.target));
    }
    write_token_lines((fs::path(out) / (name + ".src")).string(), src);
    write_token_lines((fs::path(out) / (name + ".tgt")).string(), tgt);
  };
  write(splits.train, "train");
  write(splits.dev, "dev");
  write(splits.test, "test");
  std::printf("%zu train, %zu dev, %zu test pairs written to %s\n", splits.train.size(), splits.dev.size(),
              splits.test.size(), out.c_str());
  return kExitOk;
}

int run_grad_check(const GradSuiteOptions& options) {
  const GradSuiteReport report = run_grad_suite(options);
  for (const auto& c : report.cases)
    std::printf("%-44s %.3e  resampled %d%s\n", c.name.c_str(), c.max_error, c.resampled,
                c.max_error <= report.tolerance ? "" : ("  FAIL at " + c.worst).c_str());
  std::printf("max relative error %.3e (tolerance %.0e)\n", report.max_error(), report.tolerance);
  return report.passed() ? kExitOk : kExitNumeric;
}

}  // namespace

Config desk_preset() {
  return Config::parse(R"(
[model]
n_layers = 2
n_heads = 2
d_model = 64
d_ff = 128
max_len = 32
dropout = 0.1
share_embeddings = true
share_decoder_out_embedding = true

[task]
kind = "copy"
vocab = 16
min_len = 4
max_len = 12
n_train = 2000
n_dev = 200
n_test = 200
seed = 1

[train]
mode = "baseline"
max_steps = 3000
validation_interval = 250
batch_size = 32
seed = 1

[optim]
warmup_steps = 400
lr_scale = 2.0
clip_norm = 5.0

[schedule]
kind = "linear"
epsilon = 0.3
k = 1.0
c = 0.00033333333333333332
pure_tf_steps = 0

[mix]
strategy = "softmax"
alpha = 1.0
k = 5
backprop_through_first = false
)",
                       "<desk preset>");
}

void check_known_keys(const Config& config) {
  for (const auto& [key, value] : config.values())
    if (!known_keys().count(key)) throw ConfigError("unknown configuration key '" + key + "'");
}

PreparedData prepare_data(const Config& c) {
  PreparedData d;
  const std::string kind = c.get_string("task.kind", "copy");
  if (kind == "files") {
    auto path = [&](const std::string& key) {
      const std::string p = c.get_string(key, "");
      if (p.empty()) throw ConfigError(key + " is required when task.kind = \"files\"");
      return p;
    };
    VocabOptions vo;
    vo.min_freq = c.get_int("data.min_freq", 1);
    vo.shared = c.get_bool("data.shared_vocab", true);
    if (vo.min_freq < 1) throw ConfigError("data.min_freq must be >= 1");
    LoadedCorpus train = load_corpus(path("data.train_src"), path("data.train_tgt"), vo);
    d.train = std::move(train.corpus);
    d.source_vocab = std::move(train.source_vocab);
    d.target_vocab = std::move(train.target_vocab);
    d.dev = load_corpus(path("data.dev_src"), path("data.dev_tgt"), d.source_vocab, d.target_vocab);
    if (!c.get_string("data.test_src", "").empty())
      d.test = load_corpus(path("data.test_src"), path("data.test_tgt"), d.source_vocab, d.target_vocab);
    return d;
  }
  TaskSpec spec;
  spec.kind = parse_task_kind(kind);
  spec.vocab_size = to_int(c, "task.vocab", spec.vocab_size);
  spec.min_len = to_int(c, "task.min_len", spec.min_len);
  spec.max_len = to_int(c, "task.max_len", spec.max_len);
  spec.n_train = to_int(c, "task.n_train", spec.n_train);
  spec.n_dev = to_int(c, "task.n_dev", spec.n_dev);
  spec.n_test = to_int(c, "task.n_test", spec.n_test);
  spec.seed = static_cast<std::uint64_t>(c.get_int("task.seed", 1));
  TaskSplits splits = generate_task(spec);
  d.train = std::move(splits.train);
  d.dev = std::move(splits.dev);
  d.test = std::move(splits.test);
  d.source_vocab = splits.vocab;
  d.target_vocab = std::move(splits.vocab);
  return d;
}

TrainConfig train_config_from(const Config& c, int vocab_size) {
  TrainConfig t;
  auto& m = t.model;
  m.n_layers = to_int(c, "model.n_layers", m.n_layers);
  m.n_heads = to_int(c, "model.n_heads", m.n_heads);
  m.d_model = to_int(c, "model.d_model", m.d_model);
  m.d_ff = to_int(c, "model.d_ff", m.d_ff);
  m.max_len = to_int(c, "model.max_len", m.max_len);
  m.dropout = c.get_double("model.dropout", m.dropout);
  m.share_embeddings = c.get_bool("model.share_embeddings", m.share_embeddings);
  m.share_decoder_out_embedding = c.get_bool("model.share_decoder_out_embedding", m.share_decoder_out_embedding);
  m.vocab_size = vocab_size;
  m.pad_id = Vocabulary::kPad;
  m.bos_id = Vocabulary::kBos;
  m.eos_id = Vocabulary::kEos;

  t.optim.warmup_steps = c.get_int("optim.warmup_steps", t.optim.warmup_steps);
  t.optim.lr_scale = c.get_double("optim.lr_scale", t.optim.lr_scale);
  t.optim.clip_norm = c.get_double("optim.clip_norm", t.optim.clip_norm);

  const std::string mode = c.get_string("train.mode", "baseline");
  if (mode != "baseline" && mode != "scheduled")
    throw ConfigError("train.mode must be \"baseline\" or \"scheduled\", got \"" + mode + "\"");
  t.scheduled = mode == "scheduled";
  t.mix.kind = parse_mix_kind(c.get_string("mix.strategy", "softmax"));
  t.mix.alpha = c.get_double("mix.alpha", t.mix.alpha);
  t.mix.k = to_int(c, "mix.k", t.mix.k);
  t.backprop_through_first = c.get_bool("mix.backprop_through_first", false);

  auto& s = t.schedule;
  s.kind = parse_schedule_kind(c.get_string("schedule.kind", "linear"));
  s.epsilon = c.get_double("schedule.epsilon", 0.3);
  s.k = c.get_double("schedule.k", 1.0);
  s.c = c.get_double("schedule.c", 1.0 / 3000.0);
  s.pure_tf_steps = c.get_int("schedule.pure_tf_steps", 0);

  t.max_steps = c.get_int("train.max_steps", t.max_steps);
  t.validation_interval = c.get_int("train.validation_interval", t.validation_interval);
  t.batch_size = to_int(c, "train.batch_size", t.batch_size);
  t.seed = static_cast<std::uint64_t>(c.get_int("train.seed", 1));
  t.validate();
  return t;
}

int cli_main(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli_main(static_cast<int>(argv.size()), argv.data());
}

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"Two-pass scheduled sampling for transformer sequence-to-sequence models", "sstx"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "Train a model and write metrics and checkpoints");
  std::string config_path, out_dir, resume;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  train->add_option("--config", config_path, "Configuration file")->check(CLI::ExistingFile);
  auto* seed_opt = train->add_option("--seed", seed, "Run seed (overrides train.seed)");
  train->add_option("--out", out_dir, "Output directory")->required();
  train->add_option("--set", overrides, "Override key=value")->allow_extra_args(false);
  train->add_option("--resume", resume, "Continue from a checkpoint")->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("evaluate", "Loss, token accuracy and BLEU of a checkpoint");
  std::string checkpoint, src, ref, eval_config;
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--src", src, "Source sentences")->required()->check(CLI::ExistingFile);
  eval->add_option("--ref", ref, "Reference sentences")->required()->check(CLI::ExistingFile);
  eval->add_option("--config", eval_config, "Configuration (default: config.txt beside the checkpoint)");

  auto* decode = app.add_subcommand("decode", "Greedy-decode source sentences");
  std::string hyp_out;
  decode->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  decode->add_option("--src", src, "Source sentences")->required()->check(CLI::ExistingFile);
  decode->add_option("--out", hyp_out, "Hypothesis file (default: stdout)");
  decode->add_option("--config", eval_config, "Configuration (default: config.txt beside the checkpoint)");

  auto* gen = app.add_subcommand("gen-task", "Write a synthetic copy/reverse/sort corpus");
  TaskSpec spec;
  std::string kind = "copy", gen_out;
  gen->add_option("--kind", kind, "copy | reverse | sort")->check(CLI::IsMember({"copy", "reverse", "sort"}));
  gen->add_option("--vocab", spec.vocab_size, "Vocabulary size including 4 reserved ids");
  gen->add_option("--min-len", spec.min_len, "Shortest source");
  gen->add_option("--max-len", spec.max_len, "Longest source");
  gen->add_option("--n-train", spec.n_train, "Training pairs");
  gen->add_option("--n-dev", spec.n_dev, "Validation pairs");
  gen->add_option("--n-test", spec.n_test, "Test pairs");
  gen->add_option("--seed", spec.seed, "Generator seed");
  gen->add_option("--out", gen_out, "Output directory")->required();

  auto* grad = app.add_subcommand("grad-check", "Finite-difference gradient suite");
  GradSuiteOptions gopt;
  grad->add_option("--seed", gopt.seed, "Seed");
  grad->add_option("--trials", gopt.trials, "Random cases per check")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e, std::cout, std::cerr);
    std::cerr << app.help();
    return kExitUsage;
  }

  try {
    if (*train) return run_train(config_path, *seed_opt ? std::optional(seed) : std::nullopt, out_dir, overrides, resume);
    if (*eval) return run_evaluate(checkpoint, src, ref, eval_config);
    if (*decode) return run_decode(checkpoint, src, hyp_out, eval_config);
    if (*gen) {
      spec.kind = parse_task_kind(kind);
      return run_gen_task(spec, gen_out);
    }
    if (*grad) return run_grad_check(gopt);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace sstx
