#include "quala/model/config.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

#include "quala/errors.hpp"

namespace quala::model {

void ModelConfig::validate() const {
  if (num_layers == 0 || hidden_size == 0 || num_heads == 0 || ffn_size == 0 || vocab_size == 0 ||
      max_positions == 0) {
    throw ConfigurationError("model config fields must all be >= 1");
  }
  if (hidden_size % num_heads != 0) {
    throw ConfigurationError("hidden size " + std::to_string(hidden_size) + " is not divisible by " +
                             std::to_string(num_heads) + " heads");
  }
}

std::string stage_name(TrainingStage stage) {
  switch (stage) {
    case TrainingStage::initialized: return "initialized";
    case TrainingStage::distilled: return "distilled";
    case TrainingStage::finetuned: return "finetuned";
    case TrainingStage::length_adaptive: return "length_adaptive";
  }
  return "unknown";
}

LengthConfiguration::LengthConfiguration(std::vector<std::size_t> retain) : retain_(std::move(retain)) {
  if (retain_.empty()) throw ConfigurationError("length configuration is empty");
  for (std::size_t i = 0; i < retain_.size(); ++i) {
    if (retain_[i] == 0) throw ConfigurationError("length configuration " + to_string() + " retains 0 tokens");
    if (i > 0 && retain_[i] > retain_[i - 1]) {
      throw ConfigurationError("length configuration " + to_string() + " is not monotone non-increasing");
    }
  }
}

LengthConfiguration LengthConfiguration::full(std::size_t n, std::size_t num_layers) {
  return LengthConfiguration(std::vector<std::size_t>(num_layers, n));
}

void LengthConfiguration::check_against(std::size_t n, std::size_t num_layers) const {
  if (retain_.size() != num_layers) {
    throw ConfigurationError("length configuration " + to_string() + " has " + std::to_string(retain_.size()) +
                             " entries for a " + std::to_string(num_layers) + "-layer model");
  }
  if (!retain_.empty() && retain_.front() > n) {
    throw ConfigurationError("length configuration " + to_string() + " exceeds input length " + std::to_string(n));
  }
}

LengthConfiguration LengthConfiguration::clamped(std::size_t n) const {
  std::vector<std::size_t> out(retain_);
  std::size_t active = n;
  for (auto& l : out) {
    l = std::min(l, active);
    active = l;
  }
  LengthConfiguration lc;
  lc.retain_ = std::move(out);
  return lc;
}

std::string LengthConfiguration::to_string(char sep) const {
  std::ostringstream out;
  for (std::size_t i = 0; i < retain_.size(); ++i) {
    if (i) out << sep;
    out << retain_[i];
  }
  return out.str();
}

LengthConfiguration LengthConfiguration::parse(const std::string& text) {
  std::vector<std::size_t> values;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find_first_of(",-", pos);
    if (end == std::string::npos) end = text.size();
    const std::string item = text.substr(pos, end - pos);
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (item.empty() || ec != std::errc() || ptr != item.data() + item.size()) {
      throw ConfigurationError("cannot parse length configuration '" + text + "'");
    }
    values.push_back(v);
    pos = end + 1;
  }
  return LengthConfiguration(std::move(values));
}

}  // namespace quala::model
