#include "quala/search/search.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <thread>

#include "quala/costmodel/costmodel.hpp"
#include "quala/errors.hpp"

namespace quala::search {

bool dominates(const Candidate& a, const Candidate& b) {
  return a.macs <= b.macs && a.accuracy >= b.accuracy && (a.macs < b.macs || a.accuracy > b.accuracy);
}

double ParetoFront::hypervolume(std::uint64_t reference_macs) const {
  double area = 0.0;
  for (std::size_t i = 0; i < members_.size(); ++i) {
    const std::uint64_t next = i + 1 < members_.size() ? members_[i + 1].macs : reference_macs;
    if (members_[i].macs >= reference_macs) break;
    area += double(std::min(next, reference_macs) - members_[i].macs) * members_[i].accuracy;
  }
  return area;
}

bool pareto_insert(ParetoFront& front, const Candidate& c) {
  auto& m = front.members_;
  for (const auto& inc : m)
    if (dominates(inc, c) || (inc.macs == c.macs && inc.accuracy == c.accuracy)) return false;
  std::erase_if(m, [&](const Candidate& inc) { return dominates(c, inc); });
  const auto at = std::lower_bound(m.begin(), m.end(), c.macs,
                                   [](const Candidate& x, std::uint64_t macs) { return x.macs < macs; });
  m.insert(at, c);
  return true;
}

void SearchConfig::validate() const {
  if (population_size == 0 || iterations == 0 || mutations_per_iter == 0 || crossovers_per_iter == 0)
    throw ConfigurationError("search counts must all be at least 1");
  if (!(mutation_prob > 0.0 && mutation_prob <= 1.0)) throw ConfigurationError("mutation_prob must lie in (0, 1]");
  if (workers == 0) throw ConfigurationError("workers must be at least 1");
  if (allowed_values) {
    if (allowed_values->empty()) throw ConfigurationError("allowed_values must not be empty");
    for (std::size_t v : *allowed_values)
      if (v == 0) throw ConfigurationError("allowed_values must be positive");
  }
}

namespace {

std::vector<std::size_t> sorted_unique(std::span<const std::size_t> values) {
  std::vector<std::size_t> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

LengthConfiguration running_min(std::vector<std::size_t> retain) {
  for (std::size_t i = 1; i < retain.size(); ++i) retain[i] = std::min(retain[i], retain[i - 1]);
  return LengthConfiguration(std::move(retain));
}

}  // namespace

LengthConfiguration snap_to_grid(const LengthConfiguration& lc, std::span<const std::size_t> allowed) {
  const auto grid = sorted_unique(allowed);
  if (grid.empty()) throw ConfigurationError("snap_to_grid: empty grid");
  std::vector<std::size_t> out(lc.retain());
  for (auto& l : out) {
    const auto it = std::upper_bound(grid.begin(), grid.end(), l);
    l = it == grid.begin() ? grid.front() : *std::prev(it);
  }
  return running_min(std::move(out));
}

std::vector<LengthConfiguration> init_population(std::size_t n, std::size_t num_layers, const SearchConfig& sc,
                                                 numerics::Rng& rng) {
  sc.validate();
  std::vector<LengthConfiguration> pop{LengthConfiguration::full(n, num_layers)};
  while (pop.size() < sc.population_size) {
    std::vector<std::size_t> retain;
    std::size_t m = n;
    for (std::size_t i = 0; i < num_layers; ++i) {
      const double p = rng.uniform();
      m = std::max<std::size_t>(1, std::min(m, std::size_t(double(m) * (1.0 - p))));
      retain.push_back(m);
    }
    pop.emplace_back(std::move(retain));
  }
  if (sc.allowed_values)
    for (auto& lc : pop) lc = snap_to_grid(lc, *sc.allowed_values);
  return pop;
}

LengthConfiguration mutate(const LengthConfiguration& lc, std::size_t n, double mutation_prob, numerics::Rng& rng,
                           const std::optional<std::vector<std::size_t>>& allowed) {
  std::vector<std::size_t> out(lc.retain());
  const auto grid = allowed ? sorted_unique(*allowed) : std::vector<std::size_t>{};
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!rng.bernoulli(mutation_prob)) continue;
    const std::size_t hi = i == 0 ? n : out[i - 1];
    const std::size_t lo = std::min(hi, i + 1 < out.size() ? out[i + 1] : std::size_t{1});
    if (!allowed) {
      out[i] = rng.uniform_int(lo, hi);
      continue;
    }
    std::vector<std::size_t> choices;
    for (std::size_t v : grid)
      if (v >= lo && v <= hi) choices.push_back(v);
    if (!choices.empty()) out[i] = choices[rng.uniform_int(0, choices.size() - 1)];
  }
  return running_min(std::move(out));
}

LengthConfiguration crossover(const LengthConfiguration& a, const LengthConfiguration& b, numerics::Rng& rng) {
  if (a.size() != b.size())
    throw ContractError("crossover: parents have " + std::to_string(a.size()) + " and " + std::to_string(b.size()) +
                        " layers");
  std::vector<std::size_t> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = rng.bernoulli(0.5) ? a[i] : b[i];
  return running_min(std::move(out));
}

CandidateEvaluator::CandidateEvaluator(model::ModelConfig config, std::size_t n, AccuracyFn accuracy)
    : config_(std::move(config)), n_(n), accuracy_(std::move(accuracy)) {}

Candidate CandidateEvaluator::evaluate(const LengthConfiguration& lc) {
  const std::vector<LengthConfiguration> one{lc};
  return evaluate_all(one).front();
}

std::vector<Candidate> CandidateEvaluator::evaluate_all(std::span<const LengthConfiguration> lcs,
                                                        std::size_t workers) {
  std::vector<LengthConfiguration> pending;
  std::set<LengthConfiguration> seen;
  for (const auto& lc : lcs) {
    lc.check_against(n_, config_.num_layers);
    if (!cache_.contains(lc) && seen.insert(lc).second) pending.push_back(lc);
  }
  std::vector<double> scores(pending.size());
  const std::size_t threads = std::max<std::size_t>(1, std::min(workers, pending.size()));
  if (threads == 1) {
    for (std::size_t i = 0; i < pending.size(); ++i) scores[i] = accuracy_(pending[i]);
  } else {
    std::vector<std::jthread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::size_t i = t; i < pending.size(); i += threads) scores[i] = accuracy_(pending[i]);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    pool.clear();
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  for (std::size_t i = 0; i < pending.size(); ++i) {
    cache_.emplace(pending[i], Candidate{pending[i], costmodel::flops_count(config_, n_, pending[i]), scores[i]});
  }
  sweeps_ += pending.size();
  std::vector<Candidate> out;
  out.reserve(lcs.size());
  for (const auto& lc : lcs) out.push_back(cache_.at(lc));
  return out;
}

SearchResult evolutionary_search(CandidateEvaluator& evaluator, const SearchConfig& sc) {
  sc.validate();
  const std::size_t n = evaluator.sequence_length(), L = evaluator.config().num_layers;
  const std::uint64_t reference = costmodel::flops_count_full(evaluator.config(), n);
  numerics::Rng rng(sc.seed);
  SearchResult result;
  auto record = [&](std::size_t iteration) {
    result.history.push_back(
        {iteration, result.front.size(), result.front.hypervolume(reference), evaluator.sweeps()});
  };

  const auto population = init_population(n, L, sc, rng);
  for (const auto& c : evaluator.evaluate_all(population, sc.workers)) pareto_insert(result.front, c);
  record(0);

  for (std::size_t it = 1; it <= sc.iterations; ++it) {
    const auto parents = result.front.members();
    auto pick = [&]() -> const LengthConfiguration& { return parents[rng.uniform_int(0, parents.size() - 1)].lc; };
    std::vector<LengthConfiguration> offspring;
    offspring.reserve(sc.mutations_per_iter + sc.crossovers_per_iter);
    for (std::size_t i = 0; i < sc.mutations_per_iter; ++i)
      offspring.push_back(mutate(pick(), n, sc.mutation_prob, rng, sc.allowed_values));
    for (std::size_t i = 0; i < sc.crossovers_per_iter; ++i) {
      const auto& a = pick();
      const auto& b = pick();
      offspring.push_back(crossover(a, b, rng));
    }
    for (const auto& c : evaluator.evaluate_all(offspring, sc.workers)) pareto_insert(result.front, c);
    record(it);
  }
  return result;
}

std::vector<LengthConfiguration> enumerate_grid(std::size_t n, std::size_t num_layers,
                                                std::span<const std::size_t> values) {
  const auto grid = sorted_unique(values);
  for (std::size_t v : grid)
    if (v == 0 || v > n) throw ConfigurationError("grid value " + std::to_string(v) + " outside [1, n]");
  std::vector<LengthConfiguration> out;
  std::vector<std::size_t> current;
  auto rec = [&](auto&& self, std::size_t upper) -> void {
    if (current.size() == num_layers) {
      out.emplace_back(current);
      return;
    }
    for (auto it = grid.rbegin(); it != grid.rend(); ++it) {
      if (*it > upper) continue;
      current.push_back(*it);
      self(self, *it);
      current.pop_back();
      if (out.size() > brute_force_limit) return;
    }
  };
  rec(rec, n);
  return out;
}

ParetoFront brute_force_front(CandidateEvaluator& evaluator, std::span<const LengthConfiguration> lcs) {
  if (lcs.size() > brute_force_limit)
    throw ConfigurationError("brute_force_front refuses " + std::to_string(lcs.size()) + " configurations (limit " +
                             std::to_string(brute_force_limit) + ")");
  const auto candidates = evaluator.evaluate_all(lcs);
  ParetoFront front;
  for (const auto& c : candidates) {
    bool dominated = false;
    for (const auto& other : candidates) dominated = dominated || dominates(other, c);
    if (!dominated) pareto_insert(front, c);
  }
  return front;
}

const Candidate& pick_for_budget(const ParetoFront& front, std::uint64_t budget_macs) {
  if (front.empty()) throw ContractError("pick_for_budget: empty front");
  const Candidate* best = nullptr;
  for (const auto& c : front.members())
    if (c.macs <= budget_macs && (!best || c.accuracy > best->accuracy)) best = &c;
  if (!best)
    throw BudgetInfeasibleError("budget of " + std::to_string(budget_macs) +
                                " MACs is below the cheapest configuration on the front (" +
                                std::to_string(front.members().front().macs) + " MACs)");
  return *best;
}

std::string pareto_csv(const ParetoFront& front, std::uint64_t reference_macs) {
  std::string out = "length_config,macs,flops_ratio_vs_reference,token_f1\n";
  char buf[160];
  for (const auto& c : front.members()) {
    std::snprintf(buf, sizeof buf, ",%llu,%.6f,%.6f\n", static_cast<unsigned long long>(c.macs),
                  costmodel::flops_ratio(reference_macs, c.macs), c.accuracy);
    out += c.lc.to_string('-') + buf;
  }
  return out;
}

void write_pareto_csv(const std::filesystem::path& path, const ParetoFront& front, std::uint64_t reference_macs) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot write " + path.string());
  f << pareto_csv(front, reference_macs);
}

std::string history_csv(std::span<const SearchRound> history) {
  std::string out = "iteration,front_size,hypervolume,sweeps\n";
  char buf[160];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.6f,%zu\n", r.iteration, r.front_size, r.hypervolume, r.sweeps);
    out += buf;
  }
  return out;
}

}  // namespace quala::search
