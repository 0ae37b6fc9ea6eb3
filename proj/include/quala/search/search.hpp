#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "quala/model/config.hpp"
#include "quala/numerics/rng.hpp"

namespace quala::search {

using model::LengthConfiguration;

struct Candidate {
  LengthConfiguration lc;
  std::uint64_t macs = 0;
  double accuracy = 0.0;

  bool operator==(const Candidate&) const = default;
};

/// True when `a` is no worse on both axes and strictly better on one.
bool dominates(const Candidate& a, const Candidate& b);

/// Non-dominated candidates, strictly increasing in both macs and accuracy.
class ParetoFront {
 public:
  const std::vector<Candidate>& members() const { return members_; }
  std::size_t size() const { return members_.size(); }
  bool empty() const { return members_.empty(); }

  /// Area dominated by the front inside [0, reference_macs] × [0, accuracy].
  double hypervolume(std::uint64_t reference_macs) const;

  bool operator==(const ParetoFront&) const = default;

 private:
  friend bool pareto_insert(ParetoFront& front, const Candidate& c);
  std::vector<Candidate> members_;
};

/// Inserts `c` unless an incumbent dominates or equals it, then drops every
/// incumbent that `c` dominates. Returns whether `c` was inserted.
bool pareto_insert(ParetoFront& front, const Candidate& c);

struct SearchConfig {
  std::size_t population_size = 20;
  std::size_t iterations = 30;
  double mutation_prob = 0.3;
  std::size_t mutations_per_iter = 15;
  std::size_t crossovers_per_iter = 15;
  /// Leading records of the split used for scoring; 0 uses the whole split.
  std::size_t eval_subset_size = 0;
  std::uint64_t seed = 0;
  /// Restricts every l_i to these values when set.
  std::optional<std::vector<std::size_t>> allowed_values;
  std::size_t workers = 1;

  void validate() const;
};

/// Snaps each entry down to an allowed value (or up to the smallest one)
/// and restores monotonicity.
LengthConfiguration snap_to_grid(const LengthConfiguration& lc, std::span<const std::size_t> allowed);

/// The full-length configuration followed by LengthDrop samples with per-layer
/// ratios drawn from [0, 1).
std::vector<LengthConfiguration> init_population(std::size_t n, std::size_t num_layers, const SearchConfig& sc,
                                                 numerics::Rng& rng);

/// Resamples each l_i with probability `mutation_prob` from the integers in
/// [l_{i+1}, m_i] (m₁ = n, l_{L+1} = 1), or from `allowed` in that range.
LengthConfiguration mutate(const LengthConfiguration& lc, std::size_t n, double mutation_prob, numerics::Rng& rng,
                           const std::optional<std::vector<std::size_t>>& allowed = std::nullopt);

/// Per-layer uniform pick between the parents, then a running minimum.
LengthConfiguration crossover(const LengthConfiguration& a, const LengthConfiguration& b, numerics::Rng& rng);

/// Scores candidates once per distinct configuration. `accuracy` must be
/// safe to call from several threads at once.
class CandidateEvaluator {
 public:
  using AccuracyFn = std::function<double(const LengthConfiguration&)>;

  CandidateEvaluator(model::ModelConfig config, std::size_t n, AccuracyFn accuracy);

  Candidate evaluate(const LengthConfiguration& lc);
  /// Scores the uncached members on up to `workers` threads; results follow
  /// the input order.
  std::vector<Candidate> evaluate_all(std::span<const LengthConfiguration> lcs, std::size_t workers = 1);

  /// Number of accuracy sweeps actually run.
  std::size_t sweeps() const { return sweeps_; }
  std::size_t sequence_length() const { return n_; }
  const model::ModelConfig& config() const { return config_; }

 private:
  model::ModelConfig config_;
  std::size_t n_;
  AccuracyFn accuracy_;
  std::map<LengthConfiguration, Candidate> cache_;
  std::size_t sweeps_ = 0;
};

struct SearchRound {
  std::size_t iteration = 0;
  std::size_t front_size = 0;
  double hypervolume = 0.0;
  std::size_t sweeps = 0;
};

struct SearchResult {
  ParetoFront front;
  /// Round 0 is the initial population.
  std::vector<SearchRound> history;
};

/// Elitist multi-objective search. Parents for each round are drawn uniformly
/// from the current front.
SearchResult evolutionary_search(CandidateEvaluator& evaluator, const SearchConfig& sc);

/// Every monotone configuration with entries from `values` (each ≤ n).
std::vector<LengthConfiguration> enumerate_grid(std::size_t n, std::size_t num_layers,
                                                std::span<const std::size_t> values);

/// Exhaustive front over `lcs`. Refuses more than 10⁴ configurations.
ParetoFront brute_force_front(CandidateEvaluator& evaluator, std::span<const LengthConfiguration> lcs);

inline constexpr std::size_t brute_force_limit = 10000;

/// Most accurate member within `budget_macs`.
const Candidate& pick_for_budget(const ParetoFront& front, std::uint64_t budget_macs);

/// length_config,macs,flops_ratio_vs_reference,token_f1
std::string pareto_csv(const ParetoFront& front, std::uint64_t reference_macs);
void write_pareto_csv(const std::filesystem::path& path, const ParetoFront& front, std::uint64_t reference_macs);

/// iteration,front_size,hypervolume,sweeps
std::string history_csv(std::span<const SearchRound> history);

}  // namespace quala::search
