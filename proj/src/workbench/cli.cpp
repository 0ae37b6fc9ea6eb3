#include "quala/workbench/cli.hpp"

#include <CLI11.hpp>
#include <cstdio>
#include <optional>
#include <ostream>

#include "quala/costmodel/costmodel.hpp"
#include "quala/errors.hpp"
#include "quala/workbench/pipeline.hpp"

namespace quala::workbench {

namespace {

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

RunConfig resolve(const GlobalOptions& g) {
  RunConfig rc = g.config.empty() ? RunConfig::defaults() : load_run_config(g.config);
  if (g.seed) rc.seed = *g.seed;
  if (!g.out.empty()) rc.output_dir = g.out;
  rc.validate();
  return rc;
}

std::string sci(std::uint64_t macs) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3E", double(macs));
  return buf;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Length-adaptive quantized span-QA workbench", "quala"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  GlobalOptions g;
  app.add_option("--config", g.config, "RunConfig JSON file");
  app.add_option("--seed", g.seed, "Overrides the run seed");
  app.add_option("--out", g.out, "Overrides the output directory");

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic train/dev/test splits");
  auto* teacher = app.add_subcommand("train-teacher", "Fine-tune the teacher on the span task");
  auto* distill = app.add_subcommand("distill", "Distill the student from the teacher's self-attention relations");
  auto* finetune = app.add_subcommand("finetune", "Fine-tune the distilled student");
  auto* lat = app.add_subcommand("lat-train", "Drop-and-Restore training with LengthDrop and the sandwich rule");
  auto* search = app.add_subcommand("search", "Evolutionary search for the accuracy/MACs frontier");
  auto* quantize = app.add_subcommand("quantize", "Post-training quantization, then the summary table");
  auto* pipeline = app.add_subcommand("pipeline", "Run every stage in order");

  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a split");
  std::string checkpoint, split = summary_split, length_config;
  std::optional<std::uint64_t> budget;
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file (default: the length-adaptive student)");
  eval->add_option("--split", split, "train, dev or test")->check(CLI::IsMember({"train", "dev", "test"}));
  auto* lc_opt = eval->add_option("--length-config", length_config, "Tokens kept per layer, e.g. 12,8");
  auto* budget_opt = eval->add_option("--budget-macs", budget, "Best frontier member within this many MACs");
  lc_opt->excludes(budget_opt);

  auto* flops = app.add_subcommand("flops", "Encoder MACs of a preset");
  std::string preset_name, flops_lc;
  std::size_t len = 0;
  flops->add_option("--preset", preset_name, "Architecture preset")->required();
  flops->add_option("--len", len, "Input length")->required()->check(CLI::PositiveNumber);
  flops->add_option("--length-config", flops_lc, "Tokens kept per layer (default: full length)");

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return exit_ok;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return exit_ok;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return exit_usage;
  }

  try {
    if (*flops) {
      const auto config = costmodel::preset(preset_name);
      const auto lc = flops_lc.empty() ? model::LengthConfiguration::full(len, config.num_layers)
                                       : model::LengthConfiguration::parse(flops_lc);
      lc.check_against(len, config.num_layers);
      const auto macs = costmodel::flops_count(config, len, lc);
      out << preset_name << " n=" << len << " lc=" << lc.to_string('-') << ": " << macs << " MACs (" << sci(macs)
          << ")\n";
      return exit_ok;
    }

    const RunConfig rc = resolve(g);
    const RunLayout layout{rc.output_dir};
    if (*gen) stage_gen_data(rc, &err);
    if (*teacher) stage_train_teacher(rc, &err);
    if (*distill) stage_distill(rc, &err);
    if (*finetune) stage_finetune(rc, &err);
    if (*lat) stage_lat(rc, &err);
    if (*search) stage_search(rc, &err);
    if (*quantize) {
      stage_quantize(rc, &err);
      stage_summary(rc, &err);
    }
    if (*pipeline) {
      run_pipeline(rc, &err);
      out << "artifacts written to " << layout.root.string() << "\n";
    }
    if (*eval) {
      const auto path = checkpoint.empty() ? layout.checkpoint(adaptive_ckpt) : std::filesystem::path(checkpoint);
      const auto ck = load_checkpoint(path);
      const auto data = read_jsonl(layout.dataset(split));
      const auto& config = ck.params.config;
      const std::size_t n = rc.data.seq_len;
      model::LengthConfiguration lc = model::LengthConfiguration::full(n, config.num_layers);
      if (!length_config.empty()) {
        lc = model::LengthConfiguration::parse(length_config);
      } else if (budget) {
        lc = search::pick_for_budget(read_pareto_csv(layout.pareto()), *budget).lc;
      }
      lc.check_against(n, config.num_layers);
      const auto m = evaluate_checkpoint(ck, data, lc, rc.finetune.max_span_len);
      char buf[128];
      std::snprintf(buf, sizeof buf, "token_f1 %.6f\nexact_match %.6f\n", m.token_f1, m.exact_match);
      const auto macs = costmodel::flops_count(config, n, lc);
      out << "checkpoint " << path.string() << "\nsplit " << split << "\nlength_config " << lc.to_string('-') << "\n"
          << buf << "macs " << macs << " (" << sci(macs) << ")\n";
    }
    return exit_ok;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_runtime;
  }
}

}  // namespace quala::workbench
