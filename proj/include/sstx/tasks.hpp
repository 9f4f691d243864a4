#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace sstx {

// Token string <-> id map with reserved ids 0 pad, 1 bos, 2 eos, 3 unk.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kReserved = 4;

  Vocabulary();

  // Ids 4..size-1 spelled as their decimal value (synthetic tasks).
  static Vocabulary numeric(int size);
  // Tokens sorted by descending count then spelling; count < min_freq dropped.
  static Vocabulary from_counts(const std::unordered_map<std::string, long>& counts, long min_freq);

  int add(const std::string& token);
  int id(const std::string& token) const;  // kUnk when absent
  const std::string& token(int id) const;
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct SentencePair {
  std::vector<int> source;
  std::vector<int> target;  // without BOS / EOS
};

struct ParallelCorpus {
  std::vector<SentencePair> pairs;

  std::size_t size() const { return pairs.size(); }
  void validate(int src_vocab, int tgt_vocab) const;
};

enum class TaskKind { copy, reverse, sort };
TaskKind parse_task_kind(std::string_view name);
std::string_view to_string(TaskKind kind);

struct TaskSpec {
  TaskKind kind = TaskKind::copy;
  int vocab_size = 16;  // including the 4 reserved ids
  int min_len = 4;
  int max_len = 12;
  int n_train = 2000;
  int n_dev = 200;
  int n_test = 200;
  std::uint64_t seed = 1;
};

struct TaskSplits {
  ParallelCorpus train, dev, test;
  Vocabulary vocab;
};

std::vector<int> task_target(TaskKind kind, const std::vector<int>& source);

// Unique random sources, assigned to splits by a hash of the sequence so no
// source appears in two splits.
TaskSplits generate_task(const TaskSpec& spec);

std::vector<std::string> tokenize(std::string_view line);
std::string detokenize(const std::vector<std::string>& tokens);

std::vector<std::vector<std::string>> read_token_lines(const std::string& path);
void write_token_lines(const std::string& path, const std::vector<std::vector<std::string>>& lines);

struct VocabOptions {
  long min_freq = 1;
  bool shared = true;
};

struct LoadedCorpus {
  ParallelCorpus corpus;
  Vocabulary source_vocab;
  Vocabulary target_vocab;
};

// Builds vocabularies from these (training) files.
LoadedCorpus load_corpus(const std::string& src_path, const std::string& tgt_path,
                         const VocabOptions& options);
// Maps tokens through existing vocabularies; unseen tokens become unk.
ParallelCorpus load_corpus(const std::string& src_path, const std::string& tgt_path,
                           const Vocabulary& source_vocab, const Vocabulary& target_vocab);

}  // namespace sstx
