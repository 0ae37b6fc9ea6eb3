#include "quala/training/history.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "quala/errors.hpp"

namespace quala::training {

MetricHistory::MetricHistory(std::vector<std::string> columns) : columns_(std::move(columns)) {}

void MetricHistory::add_row(std::vector<std::optional<double>> row) {
  if (row.size() != columns_.size()) {
    throw ContractError("metric row has " + std::to_string(row.size()) + " cells, expected " +
                        std::to_string(columns_.size()));
  }
  rows_.push_back(std::move(row));
}

std::optional<double> MetricHistory::last(const std::string& column) const {
  const auto it = std::find(columns_.begin(), columns_.end(), column);
  if (it == columns_.end()) throw ContractError("unknown metric column '" + column + "'");
  const auto c = std::size_t(it - columns_.begin());
  for (auto r = rows_.rbegin(); r != rows_.rend(); ++r)
    if ((*r)[c]) return (*r)[c];
  return std::nullopt;
}

std::string MetricHistory::to_csv() const {
  std::string out;
  for (std::size_t i = 0; i < columns_.size(); ++i) out += (i ? "," : "") + columns_[i];
  out += '\n';
  char buf[64];
  for (const auto& row : rows_) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += ',';
      if (!row[i]) continue;
      const double v = *row[i];
      if (v == std::floor(v) && std::abs(v) < 1e15)
        std::snprintf(buf, sizeof buf, "%.0f", v);
      else
        std::snprintf(buf, sizeof buf, "%.6f", v);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

void MetricHistory::write_csv(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot write " + path.string());
  f << to_csv();
}

}  // namespace quala::training
