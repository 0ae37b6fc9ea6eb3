#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>
#include <unistd.h>

#include "quala/costmodel/costmodel.hpp"
#include "quala/errors.hpp"
#include "quala/workbench/checkpoint.hpp"
#include "quala/workbench/cli.hpp"
#include "quala/workbench/dataset.hpp"
#include "quala/workbench/pipeline.hpp"
#include "quala/workbench/run_config.hpp"
#include "quala/training/evaluate.hpp"
#include "quala/training/supervised.hpp"

using namespace quala;
using namespace quala::workbench;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("quala_wb_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

// A run small enough to finish in seconds.
RunConfig tiny_run(const fs::path& dir) {
  RunConfig rc = RunConfig::defaults();
  rc.seed = 5;
  rc.output_dir = dir;
  rc.data.vocab_size = 24;
  rc.data.seq_len = 12;
  rc.data.answer_vocab = 6;
  rc.data.n_train = 64;
  rc.data.n_dev = 32;
  rc.data.n_test = 32;
  model::ModelConfig m;
  m.num_layers = 2;
  m.hidden_size = 16;
  m.num_heads = 2;
  m.ffn_size = 32;
  m.vocab_size = 24;
  m.max_positions = 16;
  rc.teacher = m;
  rc.student = m;
  rc.distillation.relation_heads = 2;
  for (auto* tc : {&rc.teacher_training, &rc.distill_training, &rc.finetune, &rc.length_adaptive}) {
    tc->max_steps = 20;
    tc->log_every = 5;
    tc->eval_every = 10;
  }
  rc.search.population_size = 6;
  rc.search.iterations = 3;
  rc.search.mutations_per_iter = 3;
  rc.search.crossovers_per_iter = 3;
  rc.quant.calibration_batches = 2;
  rc.quant.calibration_batch_size = 8;
  return rc;
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).generic_string()] = read_file(e.path());
  return files;
}

std::vector<std::string> csv_row(const std::string& csv, const std::string& key) {
  std::istringstream in(csv);
  for (std::string line; std::getline(in, line);) {
    if (line.rfind(key + ",", 0) != 0) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    return cells;
  }
  return {};
}

std::string field(const std::string& text, const std::string& key) {
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);)
    if (line.rfind(key + " ", 0) == 0) return line.substr(key.size() + 1);
  return {};
}

template <typename Fn>
std::string format_error(Fn&& fn) {
  try {
    fn();
  } catch (const FormatError& e) {
    return e.what();
  }
  return "no error";
}

void replace_once(std::string& s, const std::string& from, const std::string& to) {
  const auto at = s.find(from);
  REQUIRE(at != std::string::npos);
  s.replace(at, from.size(), to);
}

}  // namespace

TEST_CASE("gen_dataset") {
  GeneratorSettings s;
  SUBCASE("same seed gives identical splits, other seeds differ") {
    const auto a = gen_dataset(s, 11), b = gen_dataset(s, 11), c = gen_dataset(s, 12);
    CHECK(a.train == b.train);
    CHECK(a.dev == b.dev);
    CHECK(a.test == b.test);
    CHECK(a.train != c.train);
    CHECK(a.train.size() == s.n_train);
    CHECK(a.dev.size() == s.n_dev);
  }
  SUBCASE("record invariants over 10^4 samples") {
    s.n_train = 10000;
    s.n_dev = s.n_test = 1;
    const auto splits = gen_dataset(s, 3);
    std::size_t cue_ok = 0;
    for (const auto& ex : splits.train) {
      CHECK_NOTHROW(training::validate_example(ex, s.vocab_size));
      REQUIRE(ex.tokens.size() == s.seq_len);
      const std::size_t len = ex.answer_end - ex.answer_start + 1;
      CHECK((len >= s.min_span && len <= s.max_span));
      CHECK(ex.tokens[0] == GeneratorSettings::cls_token);
      for (std::size_t i = ex.answer_start; i <= ex.answer_end; ++i) {
        CHECK(ex.tokens[i] >= GeneratorSettings::answer_base);
        CHECK(ex.tokens[i] < GeneratorSettings::answer_base + s.answer_vocab);
      }
      if (ex.answer_start >= 2 && ex.tokens[ex.answer_start - 2] == GeneratorSettings::cue_first &&
          ex.tokens[ex.answer_start - 1] == GeneratorSettings::cue_second)
        ++cue_ok;
    }
    CHECK(cue_ok == splits.train.size());
  }
  SUBCASE("always predicting position 0 almost never matches") {
    const auto splits = gen_dataset(s, 4);
    std::vector<std::pair<std::size_t, std::size_t>> zero(splits.dev.size(), {0, 0});
    CHECK(training::score_predictions(zero, splits.dev).exact_match < 0.05);
  }
  SUBCASE("splits are drawn from separate streams") {
    const auto splits = gen_dataset(s, 9);
    std::set<std::vector<model::TokenId>> train;
    for (const auto& ex : splits.train) train.insert(ex.tokens);
    for (const auto& ex : splits.dev) CHECK_FALSE(train.contains(ex.tokens));
  }
  SUBCASE("inconsistent settings") {
    auto bad = s;
    bad.vocab_size = 7;
    CHECK_THROWS_AS(gen_dataset(bad, 1), ConfigurationError);
    bad = s;
    bad.seq_len = 7;
    CHECK_THROWS_AS(gen_dataset(bad, 1), ConfigurationError);
    bad = s;
    bad.min_span = 3;
    bad.max_span = 2;
    CHECK_THROWS_AS(gen_dataset(bad, 1), ConfigurationError);
    bad = s;
    bad.answer_vocab = s.vocab_size;
    CHECK_THROWS_AS(gen_dataset(bad, 1), ConfigurationError);
  }
  SUBCASE("JSON lines round trip") {
    const auto dir = scratch_dir("jsonl");
    s.n_train = 50;
    const auto splits = gen_dataset(s, 2);
    write_jsonl(dir / "train.jsonl", splits.train);
    CHECK(read_jsonl(dir / "train.jsonl") == splits.train);
    write_file(dir / "bad.jsonl", "{\"tokens\":[0,1],\"answer_start\":0,\"answer_end\":0}\n{\"tokens\":[0,\n");
    try {
      read_jsonl(dir / "bad.jsonl");
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("bad.jsonl:2") != std::string::npos);
    }
    fs::remove_all(dir);
  }
}

TEST_CASE("checkpoint round trips") {
  const auto config = costmodel::preset("toy-student");
  numerics::Rng rng(3);
  auto params = model::init_params<float>(config, rng);
  params.stage = model::TrainingStage::finetuned;

  SUBCASE("fp32 tensors and forward outputs are bit-identical") {
    const auto bytes = encode_checkpoint(params);
    const auto back = decode_checkpoint(bytes);
    CHECK(back.kind == CheckpointKind::fp32);
    CHECK(back.params == params);
    const std::vector<model::TokenId> t{0, 5, 1, 2, 7, 8, 30, 40, 50, 9};
    model::Encoder<float> a(params), b(back.params);
    CHECK(a.full(t, 4).hidden == b.full(t, 4).hidden);
    CHECK(encode_checkpoint(back.params) == bytes);
  }
  SUBCASE("quantized payloads and scales are identical") {
    std::vector<quant::CalibrationBatch> calib(1);
    calib[0].push_back({0, 5, 1, 2, 7, 8, 30, 40});
    const auto qm = quant::quantize_model(params, calib);
    const auto bytes = encode_checkpoint(qm);
    const auto back = decode_checkpoint(bytes);
    REQUIRE(back.kind == CheckpointKind::quantized);
    REQUIRE(back.quantized.has_value());
    CHECK(back.quantized->weights == qm.weights);
    CHECK(back.quantized->activations == qm.activations);
    CHECK(back.quantized->params == qm.params);
    CHECK(encode_checkpoint(*back.quantized) == bytes);
  }
  SUBCASE("file size tracks the size estimate") {
    const auto minilm = costmodel::preset("minilm");
    auto zero = model::zero_params<float>(minilm);
    {
      const auto bytes = encode_checkpoint(zero);
      const double est = double(costmodel::size_estimate(minilm, costmodel::QuantPlan::none()).bytes);
      MESSAGE("fp32 file " << bytes.size() << " bytes vs estimate " << est);
      CHECK(std::abs(double(bytes.size()) - est) / est < 0.01);
    }
    quant::QuantizedModel qm;
    qm.params = zero;
    model::for_each_named(zero.tensors, [&](const std::string& name, const numerics::Tensor<float>& t) {
      if (!model::is_projection_weight(name)) return;
      qm.weights.emplace(name, quant::quantize_tensor(t, quant::compute_weight_qparams(t)));
      qm.activations.emplace(name, quant::QuantParams{quant::Scheme::asymmetric_per_tensor, {0.1f}, 128});
    });
    const auto bytes = encode_checkpoint(qm);
    const double est = double(costmodel::size_estimate(minilm, qm.plan()).bytes);
    MESSAGE("quantized file " << bytes.size() << " bytes vs estimate " << est);
    CHECK(std::abs(double(bytes.size()) - est) / est < 0.01);
  }
}

TEST_CASE("checkpoint rejects damaged files") {
  numerics::Rng rng(4);
  const auto params = model::init_params<float>(costmodel::preset("toy-student"), rng);
  const auto good = encode_checkpoint(params);
  CHECK_NOTHROW(decode_checkpoint(good));

  SUBCASE("magic and version") {
    auto bad = good;
    bad[0] = 'X';
    CHECK(format_error([&] { decode_checkpoint(bad); }).find("magic") != std::string::npos);
    bad = good;
    bad[4] = 2;
    CHECK(format_error([&] { decode_checkpoint(bad); }).find("version 2") != std::string::npos);
    CHECK(format_error([&] { decode_checkpoint("QLM"); }).find("truncated") != std::string::npos);
  }
  SUBCASE("truncated payload names the entry") {
    const auto bad = good.substr(0, good.size() - 100);
    const auto msg = format_error([&] { decode_checkpoint(bad); });
    CHECK(msg.find("truncated payload at entry span_head.weight") != std::string::npos);
  }
  SUBCASE("unknown dtype names the entry") {
    auto bad = good;
    replace_once(bad, "\"dtype\":\"f32\"", "\"dtype\":\"f16\"");
    CHECK(format_error([&] { decode_checkpoint(bad); }).find("unknown dtype 'f16' for entry embeddings.token") !=
          std::string::npos);
  }
  SUBCASE("directory and payload disagree") {
    auto overlap = good;
    replace_once(overlap, "\"offset\":8192", "\"offset\":8191");
    CHECK(format_error([&] { decode_checkpoint(overlap); }).find("embeddings.position") != std::string::npos);
    auto trailing = good + std::string(4, '\0');
    CHECK(format_error([&] { decode_checkpoint(trailing); }).find("not covered") != std::string::npos);
    auto size = good;
    replace_once(size, "\"nbytes\":8192", "\"nbytes\":8188");
    CHECK(format_error([&] { decode_checkpoint(size); }).find("entry embeddings.token declares") != std::string::npos);
  }
  SUBCASE("name set must match the architecture") {
    auto bad = good;
    replace_once(bad, "\"name\":\"embeddings.position\"", "\"name\":\"embeddings.positioN\"");
    CHECK(format_error([&] { decode_checkpoint(bad); }).find("embeddings.positioN") != std::string::npos);
    auto corrupt = good;
    replace_once(corrupt, "\"tensors\":[", "\"tensors\":{");
    CHECK(format_error([&] { decode_checkpoint(corrupt); }).find("corrupt header") != std::string::npos);
  }
}

TEST_CASE("RunConfig serialization") {
  const auto rc = RunConfig::defaults();
  CHECK_NOTHROW(rc.validate());
  SUBCASE("round trip is byte-stable") {
    const auto text = to_json(rc);
    CHECK(to_json(run_config_from_json(text)) == text);
    auto custom = rc;
    custom.search.allowed_values = std::vector<std::size_t>{4, 8, 16};
    custom.distillation.teacher_layer = 2;
    custom.distillation.relation_kinds = {training::RelationKind::vv};
    custom.length_adaptive.drop_policy = model::DropPolicy::random;
    custom.finetune.learning_rate = 0.1 + 0.2;
    const auto back = run_config_from_json(to_json(custom));
    CHECK(to_json(back) == to_json(custom));
    CHECK(back.finetune.learning_rate == custom.finetune.learning_rate);
    CHECK(back.search.allowed_values == custom.search.allowed_values);
  }
  SUBCASE("missing keys keep defaults") {
    const auto back = run_config_from_json(R"({"seed": 9, "finetune": {"max_steps": 7}})");
    CHECK(back.seed == 9);
    CHECK(back.finetune.max_steps == 7);
    CHECK(back.finetune.learning_rate == rc.finetune.learning_rate);
    CHECK(back.student == rc.student);
  }
  SUBCASE("bad documents") {
    CHECK_THROWS_AS(run_config_from_json(R"({"sed": 9})"), ConfigurationError);
    CHECK_THROWS_AS(run_config_from_json(R"({"finetune": {"adam": {"beta3": 1}}})"), ConfigurationError);
    CHECK_THROWS_AS(run_config_from_json(R"({"seed": "one"})"), ConfigurationError);
    CHECK_THROWS_AS(run_config_from_json("{"), ConfigurationError);
    CHECK_THROWS_AS(run_config_from_json(R"({"finetune": {"drop_policy": "longest"}})"), ConfigurationError);
    auto bad = rc;
    bad.student.max_positions = 8;
    CHECK_THROWS_AS(bad.validate(), ConfigurationError);
    bad = rc;
    bad.summary.budget_fraction = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigurationError);
  }
  SUBCASE("stage seeds") {
    CHECK(derive_seed(1, finetune_seed) == derive_seed(1, finetune_seed));
    CHECK(derive_seed(1, finetune_seed) != derive_seed(2, finetune_seed));
    CHECK(derive_seed(1, finetune_seed) != derive_seed(1, lat_seed));
  }
}

TEST_CASE("cli basics") {
  SUBCASE("flops for the bert-base preset") {
    const auto r = cli({"flops", "--preset", "bert-base", "--len", "384"});
    CHECK(r.code == exit_ok);
    CHECK(r.out.find("3.533E+10") != std::string::npos);
    const auto lc = cli({"flops", "--preset", "minilm", "--len", "384", "--length-config", "269,253,252,202,104,34"});
    CHECK(lc.code == exit_ok);
    CHECK(lc.out.find("2484023808 MACs (2.484E+09)") != std::string::npos);
  }
  SUBCASE("usage errors") {
    const auto unknown = cli({"flops", "--preset", "bert-base", "--len", "384", "--frobnicate"});
    CHECK(unknown.code == exit_usage);
    CHECK(unknown.err.find("Usage") != std::string::npos);
    CHECK(unknown.out.empty());
    CHECK(cli({}).code == exit_usage);
    CHECK(cli({"train-everything"}).code == exit_usage);
    CHECK(cli({"flops", "--preset", "bert-base"}).code == exit_usage);
    CHECK(cli({"eval", "--length-config", "4,2", "--budget-macs", "10"}).code == exit_usage);
  }
  SUBCASE("runtime errors") {
    CHECK(cli({"flops", "--preset", "gpt", "--len", "8"}).code == exit_runtime);
    const auto dir = scratch_dir("empty");
    const auto r = cli({"finetune", "--out", dir.string()});
    CHECK(r.code == exit_runtime);
    CHECK(r.err.find("stage 'finetune' failed") != std::string::npos);
    write_file(dir / "bad.json", R"({"seed": -})");
    CHECK(cli({"gen-data", "--config", (dir / "bad.json").string()}).code == exit_runtime);
    fs::remove_all(dir);
  }
  SUBCASE("help") {
    const auto r = cli({"--help"});
    CHECK(r.code == exit_ok);
    CHECK(r.out.find("pipeline") != std::string::npos);
  }
}

TEST_CASE("tiny pipeline") {
  const auto dir = scratch_dir("pipeline");
  const auto rc = tiny_run(dir / "a");
  write_file(dir / "run.json", to_json(rc));
  const auto first = cli({"pipeline", "--config", (dir / "run.json").string()});
  REQUIRE_MESSAGE(first.code == exit_ok, first.err);
  const auto files = snapshot(rc.output_dir);
  for (const char* f : {"run_config.json", "data/train.jsonl", "data/dev.jsonl", "data/test.jsonl",
                        "checkpoints/teacher.qlml", "checkpoints/student_distilled.qlml",
                        "checkpoints/student_finetuned.qlml", "checkpoints/student_length_adaptive.qlml",
                        "checkpoints/student_quantized.qlml", "metrics/teacher.csv", "metrics/distill.csv",
                        "metrics/finetune.csv", "metrics/length_adaptive.csv", "pareto.csv", "search_history.csv",
                        "summary.csv"})
    CHECK_MESSAGE(files.contains(f), f);
  CHECK(run_config_from_json(files.at("run_config.json")).seed == rc.seed);

  SUBCASE("rerunning reproduces every artifact byte for byte") {
    fs::remove_all(rc.output_dir);
    REQUIRE(cli({"pipeline", "--config", (dir / "run.json").string()}).code == exit_ok);
    CHECK(snapshot(rc.output_dir) == files);
    REQUIRE(cli({"pipeline", "--config", (dir / "run.json").string(), "--out", (dir / "b").string()}).code == exit_ok);
    auto other = snapshot(dir / "b");
    other.erase("run_config.json");
    auto mine = files;
    mine.erase("run_config.json");
    CHECK(other == mine);
  }
  SUBCASE("summary rows") {
    const auto& summary = files.at("summary.csv");
    const auto fp_full = csv_row(summary, "fp32_full_length");
    const auto fp_lc = csv_row(summary, "fp32_length_adaptive");
    const auto q_full = csv_row(summary, "int8_full_length");
    const auto q_lc = csv_row(summary, "int8_length_adaptive");
    REQUIRE(fp_full.size() == 6);
    REQUIRE(q_lc.size() == 6);
    for (const auto* row : {&fp_full, &fp_lc, &q_full}) {
      CHECK(std::stod(q_lc[1]) <= std::stod((*row)[1]));
      CHECK(std::stoull(q_lc[5]) <= std::stoull((*row)[5]));
    }
    CHECK(std::stod(q_lc[1]) < std::stod(fp_lc[1]));
    CHECK(std::stoull(q_lc[5]) < std::stoull(q_full[5]));
    for (const auto* row : {&fp_full, &fp_lc, &q_full, &q_lc}) {
      const auto lc = model::LengthConfiguration::parse((*row)[2]);
      CHECK(std::stoull((*row)[5]) == costmodel::flops_count(rc.student, rc.data.seq_len, lc));
    }
  }
  SUBCASE("eval reproduces the summary") {
    const auto& summary = files.at("summary.csv");
    const std::string out = rc.output_dir.string();
    const auto full = cli({"eval", "--out", out, "--config", (dir / "run.json").string()});
    REQUIRE_MESSAGE(full.code == exit_ok, full.err);
    CHECK(field(full.out, "token_f1") == csv_row(summary, "fp32_full_length")[3]);
    const auto picked = csv_row(summary, "fp32_length_adaptive")[2];
    const auto budget = std::to_string(std::uint64_t(0.7 * costmodel::flops_count_full(rc.student, rc.data.seq_len)));
    const auto lc = cli({"eval", "--out", out, "--config", (dir / "run.json").string(), "--budget-macs", budget});
    REQUIRE(lc.code == exit_ok);
    CHECK(field(lc.out, "length_config") == picked);
    CHECK(field(lc.out, "token_f1") == csv_row(summary, "fp32_length_adaptive")[3]);
    const auto q = cli({"eval", "--out", out, "--config", (dir / "run.json").string(), "--checkpoint",
                        (rc.output_dir / "checkpoints/student_quantized.qlml").string(), "--length-config", picked});
    REQUIRE(q.code == exit_ok);
    CHECK(field(q.out, "token_f1") == csv_row(summary, "int8_length_adaptive")[3]);
  }
  SUBCASE("budget below the frontier") {
    const auto r = cli({"eval", "--out", rc.output_dir.string(), "--config", (dir / "run.json").string(),
                        "--budget-macs", "10"});
    CHECK(r.code == exit_runtime);
    CHECK(r.err.find("budget") != std::string::npos);
  }
  SUBCASE("a failing stage keeps earlier artifacts") {
    fs::remove(rc.output_dir / "checkpoints/student_finetuned.qlml");
    const auto r = cli({"lat-train", "--config", (dir / "run.json").string()});
    CHECK(r.code == exit_runtime);
    CHECK(r.err.find("lat-train") != std::string::npos);
    CHECK(fs::exists(rc.output_dir / "checkpoints/student_distilled.qlml"));
  }
  fs::remove_all(dir);
}

TEST_CASE("toy span task converges from scratch") {
  GeneratorSettings gs;
  const auto data = gen_dataset(gs, 42);
  numerics::Rng rng(42);
  auto init = model::init_params<float>(costmodel::preset("toy-student"), rng);
  training::TrainConfig tc;
  tc.seed = 42;
  tc.epochs = 100;
  tc.max_steps = 2000;
  tc.learning_rate = 1e-3;
  const auto r = training::finetune_supervised(std::move(init), data.train, tc);
  const auto m = training::evaluate(r.params, data.dev, std::nullopt, tc.max_span_len);
  MESSAGE("dev exact match " << m.exact_match << " after " << r.steps << " steps");
  CHECK(r.steps <= 2000);
  CHECK(m.exact_match > 0.95);
}
