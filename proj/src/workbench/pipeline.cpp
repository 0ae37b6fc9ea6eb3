#include "quala/workbench/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

#include "quala/costmodel/costmodel.hpp"
#include "quala/errors.hpp"
#include "quala/numerics/rng.hpp"
#include "quala/quant/quant.hpp"
#include "quala/training/distill.hpp"
#include "quala/training/length_adaptive.hpp"
#include "quala/training/supervised.hpp"

namespace quala::workbench {

using model::LengthConfiguration;
using training::Dataset;

namespace {

template <typename Fn>
void guarded(const char* stage, std::ostream* log, Fn&& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  try {
    fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
  if (log) {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    char buf[96];
    std::snprintf(buf, sizeof buf, "%.1f s", s);
    *log << "[" << stage << "] done in " << buf << "\n" << std::flush;
  }
}

Dataset load_split(const RunLayout& layout, const std::string& split) {
  const auto path = layout.dataset(split);
  if (!std::filesystem::exists(path)) throw InputError(path.string() + " is missing; run gen-data first");
  return read_jsonl(path);
}

model::Parameters<float> load_fp32(const RunLayout& layout, const char* name) {
  const auto path = layout.checkpoint(name);
  if (!std::filesystem::exists(path)) throw InputError(path.string() + " is missing; run the earlier stages first");
  auto ck = load_checkpoint(path);
  if (ck.kind != CheckpointKind::fp32) throw FormatError(path.string() + " is not an fp32 checkpoint");
  return std::move(ck.params);
}

training::TrainConfig seeded(training::TrainConfig tc, const RunConfig& rc, SeedTag tag) {
  tc.seed = derive_seed(rc.seed, tag);
  return tc;
}

std::size_t eval_span_len(const RunConfig& rc) { return rc.finetune.max_span_len; }

void log_metric(std::ostream* log, const char* stage, const std::string& text) {
  if (log) *log << "[" << stage << "] " << text << "\n";
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

void stage_gen_data(const RunConfig& rc, std::ostream* log) {
  guarded("gen-data", log, [&] {
    const RunLayout layout{rc.output_dir};
    const auto splits = gen_dataset(rc.data, rc.seed);
    std::filesystem::create_directories(layout.dataset("train").parent_path());
    write_jsonl(layout.dataset("train"), splits.train);
    write_jsonl(layout.dataset("dev"), splits.dev);
    write_jsonl(layout.dataset("test"), splits.test);
  });
}

void stage_train_teacher(const RunConfig& rc, std::ostream* log) {
  guarded("train-teacher", log, [&] {
    const RunLayout layout{rc.output_dir};
    const auto train = load_split(layout, "train");
    const auto dev = load_split(layout, "dev");
    numerics::Rng rng(derive_seed(rc.seed, teacher_init_seed));
    auto init = model::init_params<float>(rc.teacher, rng);
    const auto r = training::finetune_supervised(std::move(init), train, seeded(rc.teacher_training, rc, teacher_train_seed), dev);
    save_checkpoint(layout.checkpoint(teacher_ckpt), r.params);
    write_file(layout.metrics("teacher"), r.history.to_csv());
    if (const auto em = r.history.last("dev_exact_match")) log_metric(log, "train-teacher", "dev exact match " + fmt("%.4f", *em));
  });
}

void stage_distill(const RunConfig& rc, std::ostream* log) {
  guarded("distill", log, [&] {
    const RunLayout layout{rc.output_dir};
    const auto teacher = load_fp32(layout, teacher_ckpt);
    if (teacher.config != rc.teacher) throw ConfigurationError("teacher checkpoint architecture differs from the run config");
    const auto train = load_split(layout, "train");
    std::vector<std::vector<model::TokenId>> corpus;
    corpus.reserve(train.size());
    for (const auto& ex : train) corpus.push_back(ex.tokens);
    numerics::Rng rng(derive_seed(rc.seed, student_init_seed));
    auto student = model::init_params<float>(rc.student, rng);
    const auto r = training::distill_train(teacher, std::move(student), corpus, rc.distillation,
                                           seeded(rc.distill_training, rc, distill_seed));
    save_checkpoint(layout.checkpoint(distilled_ckpt), r.params);
    write_file(layout.metrics("distill"), r.history.to_csv());
    if (const auto l = r.history.last("distill_loss")) log_metric(log, "distill", "final relation loss " + fmt("%.5f", *l));
  });
}

void stage_finetune(const RunConfig& rc, std::ostream* log) {
  guarded("finetune", log, [&] {
    const RunLayout layout{rc.output_dir};
    auto student = load_fp32(layout, distilled_ckpt);
    const auto train = load_split(layout, "train");
    const auto dev = load_split(layout, "dev");
    const auto r = training::finetune_supervised(std::move(student), train, seeded(rc.finetune, rc, finetune_seed), dev);
    save_checkpoint(layout.checkpoint(finetuned_ckpt), r.params);
    write_file(layout.metrics("finetune"), r.history.to_csv());
    if (const auto em = r.history.last("dev_exact_match")) log_metric(log, "finetune", "dev exact match " + fmt("%.4f", *em));
  });
}

void stage_lat(const RunConfig& rc, std::ostream* log) {
  guarded("lat-train", log, [&] {
    const RunLayout layout{rc.output_dir};
    auto student = load_fp32(layout, finetuned_ckpt);
    const auto train = load_split(layout, "train");
    const auto dev = load_split(layout, "dev");
    const auto r = training::train_drop_and_restore(std::move(student), train, seeded(rc.length_adaptive, rc, lat_seed), dev);
    save_checkpoint(layout.checkpoint(adaptive_ckpt), r.params);
    write_file(layout.metrics("length_adaptive"), r.history.to_csv());
    if (const auto f1 = r.history.last("dev_token_f1")) log_metric(log, "lat-train", "dev token F1 " + fmt("%.4f", *f1));
  });
}

void stage_search(const RunConfig& rc, std::ostream* log) {
  guarded("search", log, [&] {
    const RunLayout layout{rc.output_dir};
    const auto params = load_fp32(layout, adaptive_ckpt);
    const auto dev = load_split(layout, "dev");
    const std::size_t take = rc.search.eval_subset_size == 0 ? dev.size() : std::min(rc.search.eval_subset_size, dev.size());
    const std::span<const training::Example> subset(dev.data(), take);
    const std::size_t n = rc.data.seq_len;
    const std::size_t span_len = eval_span_len(rc);
    search::CandidateEvaluator evaluator(params.config, n, [&](const LengthConfiguration& lc) {
      return training::evaluate(params, subset, lc, span_len).token_f1;
    });
    auto sc = rc.search;
    sc.seed = derive_seed(rc.seed, search_seed);
    const auto result = search::evolutionary_search(evaluator, sc);
    const auto reference = costmodel::flops_count_full(params.config, n);
    write_file(layout.pareto(), search::pareto_csv(result.front, reference));
    write_file(layout.search_history(), search::history_csv(result.history));
    log_metric(log, "search", std::to_string(result.front.members().size()) + " frontier members after " +
                                  std::to_string(evaluator.sweeps()) + " evaluations");
  });
}

void stage_quantize(const RunConfig& rc, std::ostream* log) {
  guarded("quantize", log, [&] {
    const RunLayout layout{rc.output_dir};
    const auto params = load_fp32(layout, adaptive_ckpt);
    const auto train = load_split(layout, "train");
    std::vector<quant::CalibrationBatch> batches(rc.quant.calibration_batches);
    for (std::size_t b = 0; b < batches.size(); ++b)
      for (std::size_t i = 0; i < rc.quant.calibration_batch_size; ++i)
        batches[b].push_back(train.at(b * rc.quant.calibration_batch_size + i).tokens);
    const auto qm = quant::quantize_model(params, batches);
    save_checkpoint(layout.checkpoint(quantized_ckpt), qm);
  });
}

void stage_summary(const RunConfig& rc, std::ostream* log) {
  guarded("summary", log, [&] {
    const RunLayout layout{rc.output_dir};
    const auto fp = load_checkpoint(layout.checkpoint(adaptive_ckpt));
    const auto q = load_checkpoint(layout.checkpoint(quantized_ckpt));
    if (q.kind != CheckpointKind::quantized) throw FormatError("quantized checkpoint expected");
    const auto test = load_split(layout, summary_split);
    const auto front = read_pareto_csv(layout.pareto());
    const auto& config = fp.params.config;
    const std::size_t n = rc.data.seq_len;
    const auto full = LengthConfiguration::full(n, config.num_layers);
    const auto budget =
        static_cast<std::uint64_t>(std::floor(rc.summary.budget_fraction * double(costmodel::flops_count_full(config, n))));
    const auto picked = search::pick_for_budget(front, budget).lc;

    const double fp_mib = costmodel::size_estimate(config, costmodel::QuantPlan::none()).mib();
    const double q_mib = costmodel::size_estimate(config, q.quantized->plan()).mib();
    std::vector<SummaryRow> rows;
    auto add = [&](const char* name, const Checkpoint& ck, double mib, const LengthConfiguration& lc) {
      const auto m = evaluate_checkpoint(ck, test, lc, eval_span_len(rc));
      rows.push_back({name, mib, lc, m.token_f1, m.exact_match, costmodel::flops_count(config, n, lc)});
    };
    add("fp32_full_length", fp, fp_mib, full);
    add("fp32_length_adaptive", fp, fp_mib, picked);
    add("int8_full_length", q, q_mib, full);
    add("int8_length_adaptive", q, q_mib, picked);
    write_file(layout.summary(), summary_csv(rows));
    if (log)
      for (const auto& r : rows)
        *log << "[summary] " << r.model << " lc " << r.lc.to_string('-') << " F1 " << fmt("%.4f", r.token_f1) << "\n";
  });
}

void run_pipeline(const RunConfig& rc, std::ostream* log) {
  guarded("config", nullptr, [&] {
    rc.validate();
    write_file(RunLayout{rc.output_dir}.config(), to_json(rc));
  });
  stage_gen_data(rc, log);
  stage_train_teacher(rc, log);
  stage_distill(rc, log);
  stage_finetune(rc, log);
  stage_lat(rc, log);
  stage_search(rc, log);
  stage_quantize(rc, log);
  stage_summary(rc, log);
}

search::ParetoFront read_pareto_csv(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line) || line != "length_config,macs,flops_ratio_vs_reference,token_f1")
    throw FormatError(path.string() + ": unexpected header");
  search::ParetoFront front;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != 4) throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected 4 columns");
    try {
      search::Candidate c{LengthConfiguration::parse(cells[0]), std::stoull(cells[1]), std::stod(cells[3])};
      search::pareto_insert(front, c);
    } catch (const std::logic_error& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const ConfigurationError& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return front;
}

training::SpanMetrics evaluate_checkpoint(const Checkpoint& ck, std::span<const training::Example> data,
                                          const std::optional<LengthConfiguration>& lc, std::size_t max_span_len) {
  if (ck.kind == CheckpointKind::quantized) {
    quant::QuantizedLinear hook(*ck.quantized);
    return training::evaluate(ck.quantized->params, data, lc, max_span_len, &hook);
  }
  return training::evaluate(ck.params, data, lc, max_span_len);
}

std::string summary_csv(std::span<const SummaryRow> rows) {
  std::string out = "model,size_mib,tokens_per_layer,token_f1,exact_match,macs\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, ",%.4f,%s,%.6f,%.6f,%llu\n", r.size_mib, r.lc.to_string('-').c_str(), r.token_f1,
                  r.exact_match, static_cast<unsigned long long>(r.macs));
    out += r.model + buf;
  }
  return out;
}

}  // namespace quala::workbench
