#pragma once

#include <cmath>
#include <limits>

#include "sstx/autodiff.hpp"

namespace sstx::oracle {

// Projection onto the simplex by trying every support set.
inline kernels::RowVector<double> brute_sparsemax(const kernels::RowVector<double>& z) {
  const Index n = z.size();
  kernels::RowVector<double> best = kernels::RowVector<double>::Zero(n);
  double best_dist = std::numeric_limits<double>::infinity();
  for (unsigned mask = 1; mask < (1u << n); ++mask) {
    double total = 0.0;
    int size = 0;
    for (Index i = 0; i < n; ++i)
      if (mask & (1u << i)) {
        total += z(i);
        ++size;
      }
    const double tau = (total - 1.0) / size;
    kernels::RowVector<double> p = kernels::RowVector<double>::Zero(n);
    bool feasible = true;
    for (Index i = 0; i < n; ++i)
      if (mask & (1u << i)) {
        p(i) = z(i) - tau;
        if (p(i) < 0.0) feasible = false;
      }
    if (!feasible) continue;
    const double dist = (p - z).squaredNorm();
    if (dist < best_dist) {
      best_dist = dist;
      best = p;
    }
  }
  return best;
}

}  // namespace sstx::oracle
