#include "quala/workbench/run_config.hpp"

#include <json.hpp>
#include <set>

#include "quala/costmodel/costmodel.hpp"
#include "quala/errors.hpp"
#include "quala/numerics/rng.hpp"
#include "quala/workbench/checkpoint.hpp"

namespace quala::workbench {

using nlohmann::ordered_json;

namespace {

// Reads the known keys of one JSON object and rejects the rest.
class ObjectReader {
 public:
  ObjectReader(const ordered_json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigurationError(path_ + " must be a JSON object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigurationError(path_ + "." + key + ": " + e.what());
    }
  }

  const ordered_json* child(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const std::string& key) const { return path_ + "." + key; }

  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.contains(key)) throw ConfigurationError("unknown key " + path_ + "." + key);
  }

 private:
  const ordered_json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

ordered_json model_json(const model::ModelConfig& c) {
  return ordered_json{{"num_layers", c.num_layers},       {"hidden_size", c.hidden_size},
                      {"num_heads", c.num_heads},         {"ffn_size", c.ffn_size},
                      {"vocab_size", c.vocab_size},       {"max_positions", c.max_positions},
                      {"type_vocab_size", c.type_vocab_size}};
}

void read_model(const ordered_json& j, const std::string& path, model::ModelConfig& c) {
  ObjectReader r(j, path);
  r.get("num_layers", c.num_layers);
  r.get("hidden_size", c.hidden_size);
  r.get("num_heads", c.num_heads);
  r.get("ffn_size", c.ffn_size);
  r.get("vocab_size", c.vocab_size);
  r.get("max_positions", c.max_positions);
  r.get("type_vocab_size", c.type_vocab_size);
  r.finish();
}

std::string drop_policy_name(model::DropPolicy p) { return p == model::DropPolicy::random ? "random" : "significance"; }

ordered_json train_json(const training::TrainConfig& t) {
  return ordered_json{{"epochs", t.epochs},
                      {"max_steps", t.max_steps},
                      {"batch_size", t.batch_size},
                      {"learning_rate", t.learning_rate},
                      {"warmup_steps", t.warmup_steps},
                      {"linear_decay", t.linear_decay},
                      {"p_max", t.p_max},
                      {"p_layerdrop", t.p_layerdrop},
                      {"n_random_sandwiches", t.n_random_sandwiches},
                      {"max_span_len", t.max_span_len},
                      {"drop_policy", drop_policy_name(t.drop_policy)},
                      {"submodel_supervised", t.submodel_supervised},
                      {"log_every", t.log_every},
                      {"eval_every", t.eval_every},
                      {"adam",
                       {{"beta1", t.adam.beta1},
                        {"beta2", t.adam.beta2},
                        {"epsilon", t.adam.epsilon},
                        {"weight_decay", t.adam.weight_decay}}}};
}

void read_train(const ordered_json& j, const std::string& path, training::TrainConfig& t) {
  ObjectReader r(j, path);
  r.get("epochs", t.epochs);
  r.get("max_steps", t.max_steps);
  r.get("batch_size", t.batch_size);
  r.get("learning_rate", t.learning_rate);
  r.get("warmup_steps", t.warmup_steps);
  r.get("linear_decay", t.linear_decay);
  r.get("p_max", t.p_max);
  r.get("p_layerdrop", t.p_layerdrop);
  r.get("n_random_sandwiches", t.n_random_sandwiches);
  r.get("max_span_len", t.max_span_len);
  std::string policy = drop_policy_name(t.drop_policy);
  r.get("drop_policy", policy);
  if (policy == "significance") {
    t.drop_policy = model::DropPolicy::significance;
  } else if (policy == "random") {
    t.drop_policy = model::DropPolicy::random;
  } else {
    throw ConfigurationError(r.path("drop_policy") + ": unknown policy '" + policy + "'");
  }
  r.get("submodel_supervised", t.submodel_supervised);
  r.get("log_every", t.log_every);
  r.get("eval_every", t.eval_every);
  if (const auto* a = r.child("adam")) {
    ObjectReader ar(*a, r.path("adam"));
    ar.get("beta1", t.adam.beta1);
    ar.get("beta2", t.adam.beta2);
    ar.get("epsilon", t.adam.epsilon);
    ar.get("weight_decay", t.adam.weight_decay);
    ar.finish();
  }
  r.finish();
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig rc;
  rc.teacher = costmodel::preset("toy-teacher");
  rc.student = costmodel::preset("toy-student");

  rc.teacher_training.epochs = 100;
  rc.teacher_training.max_steps = 2000;
  rc.teacher_training.learning_rate = 1e-3;
  rc.teacher_training.log_every = 100;
  rc.teacher_training.eval_every = 500;

  rc.distill_training.epochs = 100;
  rc.distill_training.max_steps = 1000;
  rc.distill_training.learning_rate = 1e-3;
  rc.distill_training.log_every = 100;

  rc.finetune.epochs = 100;
  rc.finetune.max_steps = 2000;
  rc.finetune.learning_rate = 1e-3;
  rc.finetune.linear_decay = true;
  rc.finetune.log_every = 100;
  rc.finetune.eval_every = 500;

  rc.length_adaptive.epochs = 100;
  rc.length_adaptive.max_steps = 1000;
  rc.length_adaptive.learning_rate = 5e-4;
  rc.length_adaptive.linear_decay = true;
  rc.length_adaptive.log_every = 100;
  rc.length_adaptive.eval_every = 500;
  return rc;
}

void RunConfig::validate() const {
  data.validate();
  teacher.validate();
  student.validate();
  for (const auto* m : {&teacher, &student}) {
    if (m->vocab_size < data.vocab_size)
      throw ConfigurationError("model vocab_size " + std::to_string(m->vocab_size) + " is smaller than the data vocabulary " +
                               std::to_string(data.vocab_size));
    if (m->max_positions < data.seq_len)
      throw ConfigurationError("model max_positions " + std::to_string(m->max_positions) + " is below seq_len " +
                               std::to_string(data.seq_len));
  }
  teacher_training.validate();
  distill_training.validate();
  finetune.validate();
  length_adaptive.validate();
  distillation.validate(teacher, student);
  search.validate();
  if (quant.plan != "projections") throw ConfigurationError("unknown quantization plan '" + quant.plan + "'");
  if (quant.calibration_batches == 0 || quant.calibration_batch_size == 0)
    throw ConfigurationError("calibration needs at least one non-empty batch");
  if (quant.calibration_batches * quant.calibration_batch_size > data.n_train)
    throw ConfigurationError("calibration asks for more records than the training split holds");
  if (!(summary.budget_fraction > 0.0 && summary.budget_fraction <= 1.0))
    throw ConfigurationError("summary.budget_fraction must lie in (0, 1]");
  if (search.eval_subset_size > data.n_dev) throw ConfigurationError("search.eval_subset_size exceeds n_dev");
}

std::string to_json(const RunConfig& rc) {
  ordered_json kinds = ordered_json::array();
  for (auto k : rc.distillation.relation_kinds) kinds.push_back(training::relation_kind_name(k));
  ordered_json allowed = nullptr;
  if (rc.search.allowed_values) allowed = *rc.search.allowed_values;
  ordered_json teacher_layer = nullptr;
  if (rc.distillation.teacher_layer) teacher_layer = *rc.distillation.teacher_layer;

  ordered_json j{
      {"seed", rc.seed},
      {"output_dir", rc.output_dir.generic_string()},
      {"data",
       {{"vocab_size", rc.data.vocab_size},
        {"seq_len", rc.data.seq_len},
        {"answer_vocab", rc.data.answer_vocab},
        {"min_span", rc.data.min_span},
        {"max_span", rc.data.max_span},
        {"distractor_rate", rc.data.distractor_rate},
        {"n_train", rc.data.n_train},
        {"n_dev", rc.data.n_dev},
        {"n_test", rc.data.n_test}}},
      {"teacher", model_json(rc.teacher)},
      {"student", model_json(rc.student)},
      {"teacher_training", train_json(rc.teacher_training)},
      {"distillation",
       {{"relation_heads", rc.distillation.relation_heads},
        {"teacher_layer", teacher_layer},
        {"relation_kinds", kinds},
        {"training", train_json(rc.distill_training)}}},
      {"finetune", train_json(rc.finetune)},
      {"length_adaptive", train_json(rc.length_adaptive)},
      {"search",
       {{"population_size", rc.search.population_size},
        {"iterations", rc.search.iterations},
        {"mutation_prob", rc.search.mutation_prob},
        {"mutations_per_iter", rc.search.mutations_per_iter},
        {"crossovers_per_iter", rc.search.crossovers_per_iter},
        {"eval_subset_size", rc.search.eval_subset_size},
        {"allowed_values", allowed},
        {"workers", rc.search.workers}}},
      {"quantization",
       {{"plan", rc.quant.plan},
        {"calibration_batches", rc.quant.calibration_batches},
        {"calibration_batch_size", rc.quant.calibration_batch_size}}},
      {"summary", {{"budget_fraction", rc.summary.budget_fraction}}}};
  return j.dump(2) + "\n";
}

RunConfig run_config_from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigurationError(std::string("run config is not valid JSON: ") + e.what());
  }
  RunConfig rc = RunConfig::defaults();
  ObjectReader r(j, "config");
  r.get("seed", rc.seed);
  std::string out = rc.output_dir.generic_string();
  r.get("output_dir", out);
  rc.output_dir = out;
  if (const auto* d = r.child("data")) {
    ObjectReader dr(*d, r.path("data"));
    dr.get("vocab_size", rc.data.vocab_size);
    dr.get("seq_len", rc.data.seq_len);
    dr.get("answer_vocab", rc.data.answer_vocab);
    dr.get("min_span", rc.data.min_span);
    dr.get("max_span", rc.data.max_span);
    dr.get("distractor_rate", rc.data.distractor_rate);
    dr.get("n_train", rc.data.n_train);
    dr.get("n_dev", rc.data.n_dev);
    dr.get("n_test", rc.data.n_test);
    dr.finish();
  }
  if (const auto* m = r.child("teacher")) read_model(*m, r.path("teacher"), rc.teacher);
  if (const auto* m = r.child("student")) read_model(*m, r.path("student"), rc.student);
  if (const auto* t = r.child("teacher_training")) read_train(*t, r.path("teacher_training"), rc.teacher_training);
  if (const auto* d = r.child("distillation")) {
    ObjectReader dr(*d, r.path("distillation"));
    dr.get("relation_heads", rc.distillation.relation_heads);
    if (const auto* tl = dr.child("teacher_layer")) {
      if (tl->is_null()) {
        rc.distillation.teacher_layer.reset();
      } else {
        std::size_t layer = 0;
        dr.get("teacher_layer", layer);
        rc.distillation.teacher_layer = layer;
      }
    }
    if (dr.child("relation_kinds")) {
      std::vector<std::string> names;
      dr.get("relation_kinds", names);
      rc.distillation.relation_kinds.clear();
      for (const auto& n : names) rc.distillation.relation_kinds.insert(training::parse_relation_kind(n));
    }
    if (const auto* t = dr.child("training")) read_train(*t, dr.path("training"), rc.distill_training);
    dr.finish();
  }
  if (const auto* t = r.child("finetune")) read_train(*t, r.path("finetune"), rc.finetune);
  if (const auto* t = r.child("length_adaptive")) read_train(*t, r.path("length_adaptive"), rc.length_adaptive);
  if (const auto* s = r.child("search")) {
    ObjectReader sr(*s, r.path("search"));
    sr.get("population_size", rc.search.population_size);
    sr.get("iterations", rc.search.iterations);
    sr.get("mutation_prob", rc.search.mutation_prob);
    sr.get("mutations_per_iter", rc.search.mutations_per_iter);
    sr.get("crossovers_per_iter", rc.search.crossovers_per_iter);
    sr.get("eval_subset_size", rc.search.eval_subset_size);
    if (const auto* a = sr.child("allowed_values")) {
      if (a->is_null()) {
        rc.search.allowed_values.reset();
      } else {
        std::vector<std::size_t> values;
        sr.get("allowed_values", values);
        rc.search.allowed_values = values;
      }
    }
    sr.get("workers", rc.search.workers);
    sr.finish();
  }
  if (const auto* q = r.child("quantization")) {
    ObjectReader qr(*q, r.path("quantization"));
    qr.get("plan", rc.quant.plan);
    qr.get("calibration_batches", rc.quant.calibration_batches);
    qr.get("calibration_batch_size", rc.quant.calibration_batch_size);
    qr.finish();
  }
  if (const auto* s = r.child("summary")) {
    ObjectReader sr(*s, r.path("summary"));
    sr.get("budget_fraction", rc.summary.budget_fraction);
    sr.finish();
  }
  r.finish();
  return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  try {
    return run_config_from_json(read_file(path));
  } catch (const ConfigurationError& e) {
    throw ConfigurationError(path.string() + ": " + e.what());
  }
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stage) { return numerics::Rng(seed, 1000 + stage).next_u64(); }

}  // namespace quala::workbench
