#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace sstx {

enum class ScheduleKind { linear, exponential, inverse_sigmoid, constant };

std::string_view to_string(ScheduleKind kind);
ScheduleKind parse_schedule_kind(std::string_view name);

// Probability of feeding the gold token at training step i.
//   linear           max(epsilon, k - c * j)
//   exponential      max(epsilon, k^j),            0 < k < 1
//   inverse_sigmoid  max(epsilon, k / (k + e^(j/k))), k >= 1
//   constant         k
// with j = i - pure_tf_steps; steps before pure_tf_steps return 1.
struct TeacherForcingSchedule {
  ScheduleKind kind = ScheduleKind::linear;
  double epsilon = 0.0;
  double k = 1.0;
  double c = 0.0;
  std::int64_t pure_tf_steps = 0;

  void validate() const;

  static TeacherForcingSchedule constant(double p) {
    return {ScheduleKind::constant, 0.0, p, 0.0, 0};
  }
  static TeacherForcingSchedule linear(double k, double c, double epsilon) {
    return {ScheduleKind::linear, epsilon, k, c, 0};
  }
};

double tf_probability(const TeacherForcingSchedule& schedule, std::int64_t step);

// Inverse square-root schedule with linear warmup:
// scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5).
double learning_rate(std::int64_t step, int d_model, std::int64_t warmup_steps, double scale);

}  // namespace sstx
