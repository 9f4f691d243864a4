#include "sstx/scheduling.hpp"

#include <algorithm>
#include <cmath>

#include "sstx/errors.hpp"

namespace sstx {

std::string_view to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::linear: return "linear";
    case ScheduleKind::exponential: return "exponential";
    case ScheduleKind::inverse_sigmoid: return "inverse_sigmoid";
    case ScheduleKind::constant: return "constant";
  }
  return "?";
}

ScheduleKind parse_schedule_kind(std::string_view name) {
  for (auto k : {ScheduleKind::linear, ScheduleKind::exponential, ScheduleKind::inverse_sigmoid,
                 ScheduleKind::constant})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown schedule kind '" + std::string(name) +
                    "' (expected linear | exponential | inverse_sigmoid | constant)");
}

void TeacherForcingSchedule::validate() const {
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw ConfigError("schedule.epsilon must lie in [0, 1)");
  if (pure_tf_steps < 0) throw ConfigError("schedule.pure_tf_steps must be >= 0");
  switch (kind) {
    case ScheduleKind::linear:
      if (!std::isfinite(k)) throw ConfigError("schedule.k must be finite");
      if (!(c >= 0.0) || !std::isfinite(c)) throw ConfigError("linear schedule needs c >= 0");
      break;
    case ScheduleKind::exponential:
      if (!(k > 0.0 && k < 1.0)) throw ConfigError("exponential schedule needs 0 < k < 1");
      break;
    case ScheduleKind::inverse_sigmoid:
      if (!(k >= 1.0) || !std::isfinite(k)) throw ConfigError("inverse_sigmoid schedule needs k >= 1");
      break;
    case ScheduleKind::constant:
      if (!(k >= 0.0 && k <= 1.0)) throw ConfigError("constant schedule needs 0 <= k <= 1");
      break;
  }
}

double tf_probability(const TeacherForcingSchedule& schedule, std::int64_t step) {
  schedule.validate();
  if (step < 0) throw ContractError("tf_probability: step must be >= 0");
  if (step < schedule.pure_tf_steps) return 1.0;
  const auto j = static_cast<double>(step - schedule.pure_tf_steps);
  double t = 0.0;
  switch (schedule.kind) {
    case ScheduleKind::linear: t = std::max(schedule.epsilon, schedule.k - schedule.c * j); break;
    case ScheduleKind::exponential: t = std::max(schedule.epsilon, std::pow(schedule.k, j)); break;
    case ScheduleKind::inverse_sigmoid:
      t = std::max(schedule.epsilon, schedule.k / (schedule.k + std::exp(j / schedule.k)));
      break;
    case ScheduleKind::constant: t = schedule.k; break;
  }
  return std::clamp(t, 0.0, 1.0);
}

double learning_rate(std::int64_t step, int d_model, std::int64_t warmup_steps, double scale) {
  if (step < 1) throw ContractError("learning_rate: step must be >= 1");
  if (d_model < 1 || warmup_steps < 1) throw ContractError("learning_rate: d_model and warmup must be >= 1");
  const auto s = static_cast<double>(step);
  const auto w = static_cast<double>(warmup_steps);
  return scale * std::pow(static_cast<double>(d_model), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

}  // namespace sstx
