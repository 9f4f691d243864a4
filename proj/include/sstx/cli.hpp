#pragma once

#include <string>
#include <vector>

#include "sstx/config.hpp"
#include "sstx/tasks.hpp"
#include "sstx/trainer.hpp"

namespace sstx {

enum ExitCode { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

// Subcommands: train, evaluate, decode, gen-task, grad-check.
int cli_main(int argc, const char* const* argv);
int cli_main(const std::vector<std::string>& args);  // args[0] is the program name

// Copy task at desk scale with the baseline trainer.
Config desk_preset();

// Throws ConfigError naming the first key that is not recognised.
void check_known_keys(const Config& config);

struct PreparedData {
  ParallelCorpus train, dev, test;
  Vocabulary source_vocab, target_vocab;
};

// Synthetic task or files, per task.kind.
PreparedData prepare_data(const Config& config);

// vocab_size is the joint model vocabulary.
TrainConfig train_config_from(const Config& config, int vocab_size);

}  // namespace sstx
