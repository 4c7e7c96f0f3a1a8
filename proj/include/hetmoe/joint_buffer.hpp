#pragma once

#include <algorithm>
#include <cstddef>
#include <set>
#include <string>
#include <vector>

#include "hetmoe/error.hpp"
#include "hetmoe/ndgrad/tensor.hpp"

namespace hetmoe {

/// Running estimate B(D, E) of the dataset/expert joint usage for one MoE
/// layer. Rows are datasets, columns are pool experts (by stable id).
struct JointBuffer {
  static constexpr double kDefaultMomentum = 0.98;

  double momentum = kDefaultMomentum;
  std::vector<int> dataset_ids;
  std::vector<int> expert_ids;
  std::vector<std::vector<double>> rows;
  std::vector<bool> initialized;

  std::size_t n_datasets() const noexcept { return dataset_ids.size(); }
  std::size_t n_experts() const noexcept { return expert_ids.size(); }

  bool has_dataset(int id) const {
    return std::find(dataset_ids.begin(), dataset_ids.end(), id) != dataset_ids.end();
  }

  std::size_t row_of(int dataset_id) const {
    const auto it = std::find(dataset_ids.begin(), dataset_ids.end(), dataset_id);
    if (it == dataset_ids.end()) {
      throw MissingEntityError("joint buffer has no row for dataset " + std::to_string(dataset_id));
    }
    return static_cast<std::size_t>(it - dataset_ids.begin());
  }

  std::size_t col_of(int expert_id) const {
    const auto it = std::find(expert_ids.begin(), expert_ids.end(), expert_id);
    if (it == expert_ids.end()) {
      throw MissingEntityError("joint buffer has no column for expert " + std::to_string(expert_id));
    }
    return static_cast<std::size_t>(it - expert_ids.begin());
  }

  void add_dataset(int dataset_id) {
    if (has_dataset(dataset_id)) throw StructuralError("dataset " + std::to_string(dataset_id) + " already in buffer");
    dataset_ids.push_back(dataset_id);
    rows.emplace_back(expert_ids.size(), 0.0);
    initialized.push_back(false);
  }

  void remove_dataset(int dataset_id) {
    const std::size_t r = row_of(dataset_id);
    dataset_ids.erase(dataset_ids.begin() + static_cast<std::ptrdiff_t>(r));
    rows.erase(rows.begin() + static_cast<std::ptrdiff_t>(r));
    initialized.erase(initialized.begin() + static_cast<std::ptrdiff_t>(r));
  }

  /// New columns start at zero mass for every existing dataset.
  void add_experts(const std::vector<int>& ids) {
    for (int id : ids) {
      expert_ids.push_back(id);
      for (auto& row : rows) row.push_back(0.0);
    }
  }

  void remove_experts(const std::set<int>& ids) {
    std::vector<int> kept_ids;
    std::vector<std::vector<double>> kept_rows(rows.size());
    for (std::size_t c = 0; c < expert_ids.size(); ++c) {
      if (ids.count(expert_ids[c])) continue;
      kept_ids.push_back(expert_ids[c]);
      for (std::size_t r = 0; r < rows.size(); ++r) kept_rows[r].push_back(rows[r][c]);
    }
    expert_ids = std::move(kept_ids);
    rows = std::move(kept_rows);
  }

  /// Buffer as an [M x N] tensor.
  ndgrad::Tensor matrix() const {
    ndgrad::Tensor out(ndgrad::Shape{std::max<std::size_t>(rows.size(), 1), std::max<std::size_t>(expert_ids.size(), 1)},
                       0.0);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t c = 0; c < expert_ids.size(); ++c) out.at(r, c) = rows[r][c];
    }
    return out;
  }
};

}  // namespace hetmoe
