#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "sstx/errors.hpp"

namespace sstx {

// Sufficient statistics of corpus BLEU; they add across sentences.
struct BleuStats {
  std::vector<long> matches;
  std::vector<long> totals;
  long hyp_len = 0;
  long ref_len = 0;

  explicit BleuStats(int max_n = 4) : matches(max_n, 0), totals(max_n, 0) {}
  BleuStats& operator+=(const BleuStats& o);
  // Unsmoothed BLEU in [0, 100]; 0 when any n-gram precision is zero.
  double score() const;
};

template <typename Token>
BleuStats sentence_bleu_stats(const std::vector<Token>& hyp, const std::vector<Token>& ref, int max_n = 4) {
  BleuStats s(max_n);
  s.hyp_len = static_cast<long>(hyp.size());
  s.ref_len = static_cast<long>(ref.size());
  for (int n = 1; n <= max_n; ++n) {
    std::map<std::vector<Token>, long> ref_counts;
    for (std::size_t i = 0; i + n <= ref.size(); ++i)
      ++ref_counts[std::vector<Token>(ref.begin() + i, ref.begin() + i + n)];
    std::map<std::vector<Token>, long> hyp_counts;
    for (std::size_t i = 0; i + n <= hyp.size(); ++i)
      ++hyp_counts[std::vector<Token>(hyp.begin() + i, hyp.begin() + i + n)];
    for (const auto& [gram, count] : hyp_counts) {
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) s.matches[n - 1] += std::min(count, it->second);
      s.totals[n - 1] += count;
    }
  }
  return s;
}

// Corpus-level BLEU with a single reference per hypothesis.
template <typename Token>
double corpus_bleu(const std::vector<std::vector<Token>>& hypotheses,
                   const std::vector<std::vector<Token>>& references, int max_n = 4) {
  if (hypotheses.empty()) throw ContractError("corpus_bleu: empty hypothesis set");
  if (hypotheses.size() != references.size())
    throw ContractError("corpus_bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                        std::to_string(references.size()) + " references");
  if (max_n < 1) throw ContractError("corpus_bleu: max_n must be >= 1");
  BleuStats total(max_n);
  for (std::size_t i = 0; i < hypotheses.size(); ++i)
    total += sentence_bleu_stats(hypotheses[i], references[i], max_n);
  return total.score();
}

}  // namespace sstx
