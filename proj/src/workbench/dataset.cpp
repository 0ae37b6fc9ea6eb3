#include "quala/workbench/dataset.hpp"

#include <fstream>
#include <json.hpp>
#include <string>

#include "quala/errors.hpp"
#include "quala/numerics/rng.hpp"

namespace quala::workbench {

using training::Dataset;
using training::Example;

void GeneratorSettings::validate() const {
  if (vocab_size < 8) throw ConfigurationError("vocab_size must be at least 8");
  if (seq_len < 8) throw ConfigurationError("seq_len must be at least 8");
  if (answer_vocab == 0 || answer_base + answer_vocab >= vocab_size)
    throw ConfigurationError("answer_vocab must leave at least one background token");
  if (min_span == 0 || min_span > max_span) throw ConfigurationError("span lengths need 1 <= min_span <= max_span");
  // CLS, the two cue tokens, the span and one trailing token must fit.
  if (max_span + 4 > seq_len) throw ConfigurationError("max_span does not fit in seq_len");
  if (!(distractor_rate >= 0.0 && distractor_rate <= 1.0))
    throw ConfigurationError("distractor_rate must lie in [0, 1]");
}

namespace {

Example make_record(const GeneratorSettings& s, numerics::Rng& rng) {
  const std::size_t n = s.seq_len;
  const auto background = [&] {
    return model::TokenId(rng.uniform_int(GeneratorSettings::answer_base + s.answer_vocab, s.vocab_size - 1));
  };
  const auto answer = [&] {
    return model::TokenId(rng.uniform_int(GeneratorSettings::answer_base, GeneratorSettings::answer_base + s.answer_vocab - 1));
  };
  Example ex;
  ex.tokens.resize(n);
  ex.tokens[0] = GeneratorSettings::cls_token;
  for (std::size_t i = 1; i < n; ++i) ex.tokens[i] = background();

  const std::size_t len = rng.uniform_int(s.min_span, s.max_span);
  const std::size_t cue = rng.uniform_int(1, n - 2 - len);
  ex.tokens[cue] = GeneratorSettings::cue_first;
  ex.tokens[cue + 1] = GeneratorSettings::cue_second;
  ex.answer_start = cue + 2;
  ex.answer_end = cue + 1 + len;
  for (std::size_t i = ex.answer_start; i <= ex.answer_end; ++i) ex.tokens[i] = answer();

  if (rng.bernoulli(s.distractor_rate)) {
    // A run of answer tokens without the full cue, kept clear of the real span.
    const std::size_t dlen = rng.uniform_int(s.min_span, s.max_span);
    const std::size_t at = rng.uniform_int(1, n - dlen);
    const bool overlaps = at + dlen + 1 >= cue && at <= ex.answer_end + 1;
    if (!overlaps) {
      for (std::size_t i = at; i < at + dlen; ++i) ex.tokens[i] = answer();
      if (at > 1 && rng.bernoulli(0.5)) ex.tokens[at - 1] = GeneratorSettings::cue_second;
    }
  }
  return ex;
}

Dataset make_split(const GeneratorSettings& s, std::uint64_t seed, std::uint64_t stream, std::size_t count) {
  numerics::Rng rng(seed, stream);
  Dataset out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_record(s, rng));
  return out;
}

}  // namespace

Splits gen_dataset(const GeneratorSettings& settings, std::uint64_t seed) {
  settings.validate();
  return Splits{make_split(settings, seed, 1, settings.n_train), make_split(settings, seed, 2, settings.n_dev),
                make_split(settings, seed, 3, settings.n_test)};
}

void write_jsonl(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot write " + path.string());
  for (const auto& ex : data) {
    nlohmann::ordered_json j;
    j["tokens"] = ex.tokens;
    j["answer_start"] = ex.answer_start;
    j["answer_end"] = ex.answer_end;
    f << j.dump() << '\n';
  }
}

Dataset read_jsonl(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot read " + path.string());
  Dataset out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Example ex;
      ex.tokens = j.at("tokens").get<std::vector<model::TokenId>>();
      ex.answer_start = j.at("answer_start").get<std::size_t>();
      ex.answer_end = j.at("answer_end").get<std::size_t>();
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace quala::workbench
