#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "hetmoe/error.hpp"
#include "hetmoe/ndgrad/tensor.hpp"

namespace hetmoe {

enum class TaskKind { Classification, Regression };

inline std::string to_string(TaskKind k) { return k == TaskKind::Classification ? "classification" : "regression"; }

inline TaskKind parse_task_kind(std::string_view s) {
  if (s == "classification") return TaskKind::Classification;
  if (s == "regression") return TaskKind::Regression;
  throw ConfigError("unknown task kind '" + std::string(s) + "'");
}

/// Supervision for a batch: class labels or a [batch x out] target matrix.
struct Targets {
  std::vector<int> labels;
  ndgrad::Tensor values;
};

}  // namespace hetmoe
