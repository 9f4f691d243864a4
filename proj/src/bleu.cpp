#include "sstx/bleu.hpp"

namespace sstx {

BleuStats& BleuStats::operator+=(const BleuStats& o) {
  if (o.matches.size() != matches.size()) throw ContractError("BleuStats: max_n mismatch");
  for (std::size_t n = 0; n < matches.size(); ++n) {
    matches[n] += o.matches[n];
    totals[n] += o.totals[n];
  }
  hyp_len += o.hyp_len;
  ref_len += o.ref_len;
  return *this;
}

double BleuStats::score() const {
  if (hyp_len == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < matches.size(); ++n) {
    if (matches[n] == 0 || totals[n] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matches[n]) / static_cast<double>(totals[n]));
  }
  const double log_bp = std::min(0.0, 1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return 100.0 * std::exp(log_bp + log_sum / static_cast<double>(matches.size()));
}

}  // namespace sstx
