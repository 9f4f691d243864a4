#include "sstx/tasks.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "sstx/errors.hpp"
#include "sstx/rng.hpp"

namespace sstx {

// --- Vocabulary ------------------------------------------------------------

Vocabulary::Vocabulary() {
  for (const char* t : {"<pad>", "<s>", "</s>", "<unk>"}) add(t);
}

Vocabulary Vocabulary::numeric(int size) {
  if (size < kReserved + 1) throw ConfigError("vocabulary size must be >= 5");
  Vocabulary v;
  for (int i = kReserved; i < size; ++i) v.add(std::to_string(i));
  return v;
}

Vocabulary Vocabulary::from_counts(const std::unordered_map<std::string, long>& counts, long min_freq) {
  std::vector<std::pair<std::string, long>> items(counts.begin(), counts.end());
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  Vocabulary v;
  for (const auto& [token, count] : items)
    if (count >= min_freq) v.add(token);
  return v;
}

int Vocabulary::add(const std::string& token) {
  auto it = index_.find(token);
  if (it != index_.end()) return it->second;
  const int id = size();
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw ContractError("vocabulary: id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(token(i));
  return out;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write vocabulary to " + path);
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read vocabulary " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  Vocabulary v;
  if (tokens.size() < static_cast<std::size_t>(kReserved))
    throw DataError(path + ": vocabulary file lacks the reserved entries");
  for (int i = 0; i < kReserved; ++i)
    if (tokens[static_cast<std::size_t>(i)] != v.tokens_[static_cast<std::size_t>(i)])
      throw DataError(path + ": reserved entry " + std::to_string(i) + " is '" +
                      tokens[static_cast<std::size_t>(i)] + "'");
  for (std::size_t i = kReserved; i < tokens.size(); ++i) {
    if (v.contains(tokens[i])) throw DataError(path + ": duplicate token '" + tokens[i] + "'");
    v.add(tokens[i]);
  }
  return v;
}

// --- corpora ---------------------------------------------------------------

void ParallelCorpus::validate(int src_vocab, int tgt_vocab) const {
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    if (p.source.empty() || p.target.empty())
      throw DataError("sentence pair " + std::to_string(i) + " has an empty side");
    for (int id : p.source)
      if (id < 0 || id >= src_vocab) throw DataError("source id out of range in pair " + std::to_string(i));
    for (int id : p.target)
      if (id < 0 || id >= tgt_vocab) throw DataError("target id out of range in pair " + std::to_string(i));
  }
}

TaskKind parse_task_kind(std::string_view name) {
  for (auto k : {TaskKind::copy, TaskKind::reverse, TaskKind::sort})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown task kind '" + std::string(name) + "' (expected copy | reverse | sort)");
}

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::sort: return "sort";
  }
  return "?";
}

std::vector<int> task_target(TaskKind kind, const std::vector<int>& source) {
  std::vector<int> t = source;
  if (kind == TaskKind::reverse) std::reverse(t.begin(), t.end());
  if (kind == TaskKind::sort) std::sort(t.begin(), t.end());
  return t;
}

namespace {

std::uint64_t fnv1a(const std::vector<int>& seq) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (int v : seq) {
    for (int byte = 0; byte < 4; ++byte) {
      h ^= static_cast<std::uint64_t>((static_cast<std::uint32_t>(v) >> (8 * byte)) & 0xffu);
      h *= 0x100000001b3ull;
    }
  }
  // Final avalanche so nearby sequences spread over [0, 2^64).
  h ^= h >> 33;
  h *= 0xff51afd7ed558ccdull;
  h ^= h >> 33;
  return h;
}

}  // namespace

TaskSplits generate_task(const TaskSpec& spec) {
  if (spec.vocab_size < 5) throw ConfigError("task vocabulary must be >= 5");
  if (spec.min_len < 1 || spec.max_len < spec.min_len) throw ConfigError("task lengths must satisfy 1 <= min <= max");
  if (spec.n_train < 0 || spec.n_dev < 0 || spec.n_test < 0) throw ConfigError("split sizes must be >= 0");
  const long total = static_cast<long>(spec.n_train) + spec.n_dev + spec.n_test;
  if (total == 0) throw ConfigError("task needs at least one example");

  const double symbols = spec.vocab_size - Vocabulary::kReserved;
  double space = 0.0;
  for (int L = spec.min_len; L <= spec.max_len; ++L) space += std::pow(symbols, L);
  if (space < static_cast<double>(total))
    throw ConfigError("task space of " + std::to_string(static_cast<long>(space)) +
                      " distinct sources cannot hold " + std::to_string(total) + " examples");

  const std::array<int, 3> wanted{spec.n_train, spec.n_dev, spec.n_test};
  const double train_cut = static_cast<double>(spec.n_train) / static_cast<double>(total);
  const double dev_cut = train_cut + static_cast<double>(spec.n_dev) / static_cast<double>(total);

  TaskSplits out;
  out.vocab = Vocabulary::numeric(spec.vocab_size);
  std::array<ParallelCorpus*, 3> splits{&out.train, &out.dev, &out.test};
  std::set<std::vector<int>> seen;
  Rng rng(spec.seed, 0x7a5c);
  const long budget = 200 * total + 10000;
  long attempts = 0;
  while (out.train.size() + out.dev.size() + out.test.size() < static_cast<std::size_t>(total)) {
    if (++attempts > budget)
      throw ConfigError("could not fill disjoint splits; the task space is too small for the requested sizes");
    const int len = spec.min_len + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_len - spec.min_len + 1)));
    std::vector<int> src(static_cast<std::size_t>(len));
    for (int& t : src) t = Vocabulary::kReserved + static_cast<int>(rng.below(static_cast<std::uint64_t>(symbols)));
    if (seen.count(src)) continue;
    const double u = static_cast<double>(fnv1a(src) >> 11) * 0x1.0p-53;
    const std::size_t which = u < train_cut ? 0 : (u < dev_cut ? 1 : 2);
    if (splits[which]->size() >= static_cast<std::size_t>(wanted[which])) continue;
    seen.insert(src);
    splits[which]->pairs.push_back({src, task_target(spec.kind, src)});
  }
  return out;
}

// --- text I/O --------------------------------------------------------------

std::vector<std::string> tokenize(std::string_view line) {
  std::vector<std::string> tokens;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) tokens.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return tokens;
}

std::string detokenize(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

std::vector<std::vector<std::string>> read_token_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::vector<std::vector<std::string>> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(tokenize(line));
  return lines;
}

void write_token_lines(const std::string& path, const std::vector<std::vector<std::string>>& lines) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& l : lines) out << detokenize(l) << '\n';
}

namespace {

void check_aligned(const std::string& src_path, const std::string& tgt_path,
                   const std::vector<std::vector<std::string>>& src,
                   const std::vector<std::vector<std::string>>& tgt) {
  if (src.size() != tgt.size())
    throw DataError("line count mismatch: " + src_path + " has " + std::to_string(src.size()) +
                    " lines, " + tgt_path + " has " + std::to_string(tgt.size()));
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].empty()) throw DataError(src_path + ":" + std::to_string(i + 1) + ": empty line");
    if (tgt[i].empty()) throw DataError(tgt_path + ":" + std::to_string(i + 1) + ": empty line");
  }
}

ParallelCorpus encode_pairs(const std::vector<std::vector<std::string>>& src,
                            const std::vector<std::vector<std::string>>& tgt, const Vocabulary& sv,
                            const Vocabulary& tv) {
  ParallelCorpus c;
  c.pairs.reserve(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) c.pairs.push_back({sv.encode(src[i]), tv.encode(tgt[i])});
  return c;
}

}  // namespace

LoadedCorpus load_corpus(const std::string& src_path, const std::string& tgt_path,
                         const VocabOptions& options) {
  const auto src = read_token_lines(src_path);
  const auto tgt = read_token_lines(tgt_path);
  check_aligned(src_path, tgt_path, src, tgt);
  std::unordered_map<std::string, long> src_counts, tgt_counts;
  for (const auto& l : src)
    for (const auto& t : l) ++src_counts[t];
  for (const auto& l : tgt)
    for (const auto& t : l) ++(options.shared ? src_counts : tgt_counts)[t];
  LoadedCorpus out;
  out.source_vocab = Vocabulary::from_counts(src_counts, options.min_freq);
  out.target_vocab = options.shared ? out.source_vocab : Vocabulary::from_counts(tgt_counts, options.min_freq);
  out.corpus = encode_pairs(src, tgt, out.source_vocab, out.target_vocab);
  return out;
}

ParallelCorpus load_corpus(const std::string& src_path, const std::string& tgt_path,
                           const Vocabulary& source_vocab, const Vocabulary& target_vocab) {
  const auto src = read_token_lines(src_path);
  const auto tgt = read_token_lines(tgt_path);
  check_aligned(src_path, tgt_path, src, tgt);
  return encode_pairs(src, tgt, source_vocab, target_vocab);
}

}  // namespace sstx
