#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace quala::training {

/// Metric rows keyed by a fixed column list. Missing cells are written empty.
class MetricHistory {
 public:
  MetricHistory() = default;
  explicit MetricHistory(std::vector<std::string> columns);

  void add_row(std::vector<std::optional<double>> row);

  const std::vector<std::string>& columns() const { return columns_; }
  const std::vector<std::vector<std::optional<double>>>& rows() const { return rows_; }
  std::optional<double> last(const std::string& column) const;

  /// Header row, then one line per row with values printed at fixed precision.
  std::string to_csv() const;
  void write_csv(const std::filesystem::path& path) const;

 private:
  std::vector<std::string> columns_;
  std::vector<std::vector<std::optional<double>>> rows_;
};

}  // namespace quala::training
