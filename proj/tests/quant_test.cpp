#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "quala/costmodel/costmodel.hpp"
#include "quala/errors.hpp"
#include "quala/numerics/mac_counter.hpp"
#include "quala/quant/quant.hpp"
#include "quala/training/length_adaptive.hpp"
#include "quala/training/supervised.hpp"
#include "quala/workbench/dataset.hpp"
#include "test_support.hpp"

using namespace quala;
using namespace quala::quant;
using numerics::Rng;
using numerics::Shape;

namespace {

RangeStats range(float lo, float hi) {
  RangeStats s;
  const std::vector<float> v{lo, hi};
  s.observe(v);
  return s;
}

// Reference for quantized_linear: dequantize both operands, multiply in double.
Tensor<float> dequant_matmul(const QuantizedTensor& x, const QuantizedTensor& w, const Tensor<float>& bias) {
  const auto xd = dequantize(x), wd = dequantize(w);
  const std::size_t m = x.shape[0], k = x.shape[1], n = w.shape[1];
  Tensor<float> out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t c = 0; c < n; ++c) {
      double acc = 0;
      for (std::size_t j = 0; j < k; ++j) acc += double(xd.at(i, j)) * double(wd.at(j, c));
      out.at(i, c) = float(acc + bias[c]);
    }
  return out;
}

model::ModelConfig toy_config() {
  model::ModelConfig c;
  c.num_layers = 2;
  c.hidden_size = 16;
  c.num_heads = 2;
  c.ffn_size = 32;
  c.vocab_size = 24;
  c.max_positions = 16;
  return c;
}

workbench::GeneratorSettings toy_task() {
  workbench::GeneratorSettings s;
  s.vocab_size = 24;
  s.seq_len = 12;
  s.answer_vocab = 6;
  s.n_train = 256;
  s.n_dev = 200;
  s.n_test = 16;
  return s;
}

std::vector<CalibrationBatch> calibration_from(const training::Dataset& data, std::size_t batches, std::size_t per) {
  std::vector<CalibrationBatch> out(batches);
  for (std::size_t b = 0; b < batches; ++b)
    for (std::size_t i = 0; i < per; ++i) out[b].push_back(data.at(b * per + i).tokens);
  return out;
}

}  // namespace

TEST_CASE("compute_qparams") {
  SUBCASE("asymmetric endpoints") {
    const auto qp = compute_qparams(range(-1.0f, 3.0f));
    CHECK(qp.scheme == Scheme::asymmetric_per_tensor);
    CHECK(qp.scale[0] == doctest::Approx(4.0 / 255.0).epsilon(1e-7));
    CHECK(qp.zero_point == 64);
    QuantizedTensor lowest{Shape{1}, qp, {0}};
    QuantizedTensor zero{Shape{1}, qp, {64}};
    CHECK(dequantize(lowest)[0] == doctest::Approx(-1.0039).epsilon(1e-4));
    CHECK(dequantize(zero)[0] == 0.0f);
  }
  SUBCASE("exact grid") {
    const float s = 0.125f;
    const auto qp = compute_qparams(range(0.0f, 255 * s));
    CHECK(qp.scale[0] == doctest::Approx(s).epsilon(1e-7));
    CHECK(qp.zero_point == 0);
  }
  SUBCASE("range is widened to contain zero") {
    const auto qp = compute_qparams(range(2.0f, 4.0f));
    CHECK(qp.zero_point == 0);
    CHECK(qp.scale[0] == doctest::Approx(4.0 / 255.0).epsilon(1e-7));
    const auto neg = compute_qparams(range(-4.0f, -2.0f));
    CHECK(neg.zero_point == 255);
  }
  SUBCASE("collapsed range") {
    const auto qp = compute_qparams(range(0.0f, 0.0f));
    CHECK(qp.scale[0] == doctest::Approx(2e-8 / 255.0).epsilon(1e-6));
    CHECK_NOTHROW(qp.validate());
  }
  SUBCASE("symmetric weights") {
    Tensor<float> w(Shape{3, 2}, {1.0f, 0.0f, -2.54f, 0.0f, 0.5f, 0.0f});
    const auto qp = compute_weight_qparams(w);
    CHECK(qp.scheme == Scheme::symmetric_per_channel);
    CHECK(qp.zero_point == 0);
    REQUIRE(qp.scale.size() == 2);
    CHECK(qp.scale[0] == doctest::Approx(2.54 / 127.0).epsilon(1e-7));
    CHECK(qp.scale[1] == doctest::Approx(1e-8 / 127.0).epsilon(1e-7));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(compute_qparams(RangeStats{}), ContractError);
    RangeStats bad{0.0f, std::numeric_limits<float>::infinity(), 1};
    CHECK_THROWS_AS(compute_qparams(bad), NumericError);
    RangeStats inverted{2.0f, 1.0f, 1};
    CHECK_THROWS_AS(compute_qparams(inverted), ContractError);
    Tensor<float> w(Shape{1, 1}, {std::nanf("")});
    CHECK_THROWS_AS(compute_weight_qparams(w), NumericError);
  }
}

TEST_CASE("QuantParams validation") {
  QuantParams qp{Scheme::symmetric_per_channel, {0.1f}, 3};
  CHECK_THROWS_AS(qp.validate(), ContractError);
  qp = {Scheme::asymmetric_per_tensor, {0.1f}, 256};
  CHECK_THROWS_AS(qp.validate(), ContractError);
  qp = {Scheme::asymmetric_per_tensor, {0.0f}, 0};
  CHECK_THROWS_AS(qp.validate(), ContractError);
  qp = {Scheme::asymmetric_per_tensor, {}, 0};
  CHECK_THROWS_AS(qp.validate(), ContractError);
}

TEST_CASE("quantize and dequantize") {
  SUBCASE("affine map example") {
    const QuantParams qp{Scheme::asymmetric_per_tensor, {0.5f}, 10};
    CHECK(dequantize(QuantizedTensor{Shape{1}, qp, {12}})[0] == 1.0f);
  }
  SUBCASE("zero maps to the zero point") {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
      const float lo = float(-5 * rng.uniform()), hi = float(5 * rng.uniform());
      const auto qp = compute_qparams(range(lo, hi));
      const auto q = quantize_tensor(Tensor<float>(Shape{1}, {0.0f}), qp);
      CHECK(q.codes[0] == qp.zero_point);
      CHECK(dequantize(q)[0] == 0.0f);
    }
  }
  SUBCASE("half away from zero") {
    const QuantParams qp{Scheme::symmetric_per_channel, {1.0f}, 0};
    const auto q = quantize_tensor(Tensor<float>(Shape{1, 1}, {2.5f}), qp);
    CHECK(q.codes[0] == 3);
    const auto n = quantize_tensor(Tensor<float>(Shape{1, 1}, {-2.5f}), qp);
    CHECK(n.codes[0] == -3);
  }
  SUBCASE("out of range values clamp") {
    const auto qp = compute_qparams(range(-1.0f, 1.0f));
    const auto q = quantize_tensor(Tensor<float>(Shape{2}, {-100.0f, 100.0f}), qp);
    CHECK(q.codes[0] == 0);
    CHECK(q.codes[1] == 255);
  }
  SUBCASE("round trip within half a step") {
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
      const float lo = float(-4 * rng.uniform()), hi = float(0.01 + 4 * rng.uniform());
      const auto qp = compute_qparams(range(lo, hi));
      const double s = qp.scale[0];
      // Grid points, midpoints and offsets around them, plus uniform draws.
      std::vector<float> xs;
      for (int q = qp.q_min(); q <= qp.q_max(); ++q)
        for (double off : {-0.5, -0.49, -0.25, 0.0, 0.25, 0.49, 0.5}) {
          const double x = s * (q - qp.zero_point + off);
          if (x >= lo && x <= hi) xs.push_back(float(x));
        }
      for (int i = 0; i < 200; ++i) xs.push_back(float(lo + (hi - lo) * rng.uniform()));
      const Tensor<float> x(Shape{xs.size()}, xs);
      const auto q = quantize_tensor(x, qp);
      const auto r = dequantize(q);
      double worst_exact = 0, worst_excess = 0;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        // S·(q − Z) evaluated in double, then the fp32 value dequantize returns,
        // which may add half an ulp of |x| on top.
        const double exact = s * double(q.codes[i] - qp.zero_point);
        worst_exact = std::max(worst_exact, std::abs(exact - double(xs[i])));
        const double half_ulp = std::abs(double(xs[i])) * std::ldexp(1.0, -24);
        worst_excess = std::max(worst_excess, std::abs(double(r[i]) - double(xs[i])) - half_ulp);
      }
      CHECK(worst_exact <= s / 2 + 1e-7);
      CHECK(worst_excess <= s / 2 + 1e-7);
    }
  }
  SUBCASE("per-channel weights") {
    Rng rng(3);
    const auto w = testing::random_tensor<float>(rng, Shape{9, 5}, 0.3);
    const auto qp = compute_weight_qparams(w);
    const auto q = quantize_tensor(w, qp);
    for (auto c : q.codes) CHECK((c >= -127 && c <= 127));
    const auto r = dequantize(q);
    for (std::size_t i = 0; i < w.numel(); ++i)
      CHECK(std::abs(r[i] - w[i]) <= qp.scale[i % 5] / 2 + 1e-7);
  }
  SUBCASE("scale count must match") {
    const QuantParams qp{Scheme::symmetric_per_channel, {1.0f, 1.0f}, 0};
    CHECK_THROWS_AS(quantize_tensor(Tensor<float>(Shape{2, 3}), qp), ContractError);
  }
}

TEST_CASE("quantized_linear") {
  SUBCASE("matches dequantize-then-multiply") {
    Rng rng(4);
    for (int trial = 0; trial < 40; ++trial) {
      const std::size_t m = rng.uniform_int(1, 8), k = rng.uniform_int(1, 64), n = rng.uniform_int(1, 16);
      const auto x = testing::random_tensor<float>(rng, Shape{m, k}, 2.0);
      const auto w = testing::random_tensor<float>(rng, Shape{k, n}, 0.2);
      const auto b = testing::random_tensor<float>(rng, Shape{n}, 0.5);
      RangeStats st;
      st.observe(x.data());
      const auto xq = quantize_tensor(x, compute_qparams(st));
      const auto wq = quantize_tensor(w, compute_weight_qparams(w));
      const auto got = quantized_linear(xq, wq, b);
      const auto want = dequant_matmul(xq, wq, b);
      double worst = 0;
      for (std::size_t i = 0; i < got.numel(); ++i) worst = std::max(worst, double(std::abs(got[i] - want[i])));
      CHECK(worst <= 1e-5);
    }
  }
  SUBCASE("exact grid with zero point 0 equals fp32") {
    const QuantParams xp{Scheme::asymmetric_per_tensor, {0.25f}, 0};
    const QuantParams wp{Scheme::symmetric_per_channel, {0.5f, 0.125f}, 0};
    const QuantizedTensor xq{Shape{2, 3}, xp, {0, 4, 255, 7, 1, 100}};
    const QuantizedTensor wq{Shape{3, 2}, wp, {1, -127, 3, 5, -2, 64}};
    const Tensor<float> bias(Shape{2}, {0.0f, 0.0f});
    const auto x = dequantize(xq), w = dequantize(wq);
    const auto got = quantized_linear(xq, wq, bias);
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t c = 0; c < 2; ++c) {
        float acc = 0;
        for (std::size_t j = 0; j < 3; ++j) acc += x.at(i, j) * w.at(j, c);
        CHECK(got.at(i, c) == acc);
      }
  }
  SUBCASE("zero weights give the bias") {
    Rng rng(5);
    const auto x = testing::random_tensor<float>(rng, Shape{4, 6});
    Tensor<float> w(Shape{6, 3});
    const Tensor<float> b(Shape{3}, {1.5f, -2.0f, 0.25f});
    RangeStats st;
    st.observe(x.data());
    const auto out = quantized_linear(quantize_tensor(x, compute_qparams(st)),
                                      quantize_tensor(w, compute_weight_qparams(w)), b);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t c = 0; c < 3; ++c) CHECK(out.at(i, c) == b[c]);
  }
  SUBCASE("counts m·k·n MACs") {
    const QuantParams xp{Scheme::asymmetric_per_tensor, {1.0f}, 0};
    const QuantParams wp{Scheme::symmetric_per_channel, std::vector<float>(7, 1.0f), 0};
    const QuantizedTensor xq{Shape{3, 5}, xp, std::vector<std::int32_t>(15, 1)};
    const QuantizedTensor wq{Shape{5, 7}, wp, std::vector<std::int32_t>(35, 1)};
    numerics::MacScope scope;
    quantized_linear(xq, wq, Tensor<float>(Shape{7}));
    CHECK(scope.elapsed() == 3 * 5 * 7);
  }
  SUBCASE("contracts") {
    const QuantParams xp{Scheme::asymmetric_per_tensor, {1.0f}, 0};
    const QuantParams wp{Scheme::symmetric_per_channel, {1.0f}, 0};
    const QuantizedTensor xq{Shape{1, 2}, xp, {1, 1}};
    const QuantizedTensor wq{Shape{2, 1}, wp, {1, 1}};
    CHECK_THROWS_AS(quantized_linear(wq, xq, Tensor<float>(Shape{1})), ContractError);
    CHECK_THROWS_AS(quantized_linear(xq, wq, Tensor<float>(Shape{3})), DimensionError);
    const std::size_t k = max_inner_dim + 1;
    const QuantizedTensor big_x{Shape{1, k}, xp, std::vector<std::int32_t>(k, 0)};
    const QuantizedTensor big_w{Shape{k, 1}, wp, std::vector<std::int32_t>(k, 0)};
    CHECK_THROWS_AS(quantized_linear(big_x, big_w, Tensor<float>(Shape{1})), ContractError);
  }
}

TEST_CASE("calibration statistics") {
  Rng rng(6);
  const auto params = model::init_params<float>(toy_config(), rng);
  const auto splits = workbench::gen_dataset(toy_task(), 2);
  const auto batches = calibration_from(splits.train, 3, 4);

  SUBCASE("empty batch set") {
    CHECK_THROWS_AS(collect_stats(params, std::span<const CalibrationBatch>{}), ContractError);
    const std::vector<CalibrationBatch> empty(1);
    CHECK_THROWS_AS(collect_stats(params, empty), ContractError);
  }
  SUBCASE("every projection input is observed") {
    const auto stats = collect_stats(params, std::span(batches).first(1));
    CHECK(stats.tensors.size() == 12);
    for (const auto& [name, s] : stats.tensors) {
      CHECK(model::is_projection_weight(name));
      CHECK(s.min <= s.max);
      CHECK(s.count == 4);
    }
  }
  SUBCASE("single batch equals that batch's extrema") {
    // Oracle: record the inputs with an independent hook.
    struct Recorder final : model::LinearHook<float> {
      std::map<std::string, std::pair<float, float>> seen;
      numerics::Var linear(numerics::Graph<float>& g, std::size_t layer, model::LinearSite site, numerics::Var x,
                           numerics::Var w, numerics::Var b) override {
        const auto& v = g.value(x).data();
        auto [it, fresh] = seen.try_emplace(weight_name(layer, site), v[0], v[0]);
        for (float f : v) {
          it->second.first = std::min(it->second.first, f);
          it->second.second = std::max(it->second.second, f);
        }
        return g.linear(x, w, b);
      }
    } rec;
    model::Encoder<float> enc(params, &rec);
    for (const auto& t : batches[0]) enc.full(t, 1);
    const auto stats = collect_stats(params, std::span(batches).first(1));
    for (const auto& [name, mm] : rec.seen) {
      CHECK(stats.tensors.at(name).min == mm.first);
      CHECK(stats.tensors.at(name).max == mm.second);
    }
  }
  SUBCASE("monotone and mergeable") {
    const auto one = collect_stats(params, std::span(batches).first(1));
    const auto two = collect_stats(params, std::span(batches).first(2));
    const auto second = collect_stats(params, std::span(batches).subspan(1, 1));
    const auto three = collect_stats(params, batches);
    for (const auto& [name, s] : two.tensors) {
      const auto& a = one.tensors.at(name);
      const auto& b = second.tensors.at(name);
      CHECK(s.min == std::min(a.min, b.min));
      CHECK(s.max == std::max(a.max, b.max));
      CHECK(s.min <= a.min);
      CHECK(s.max >= a.max);
      CHECK(three.tensors.at(name).min <= s.min);
      CHECK(three.tensors.at(name).max >= s.max);
    }
  }
  SUBCASE("non-finite activations") {
    RangeStats s;
    const std::vector<float> v{1.0f, std::nanf("")};
    CHECK_THROWS_AS(s.observe(v), NumericError);
  }
}

TEST_CASE("quantized model") {
  const auto splits = workbench::gen_dataset(toy_task(), 8);
  Rng rng(7);
  auto tc = training::TrainConfig{};
  tc.max_steps = 400;
  tc.epochs = 100;
  tc.batch_size = 8;
  tc.learning_rate = 3e-3;
  const auto trained = training::finetune_supervised(model::init_params<float>(toy_config(), rng), splits.train, tc).params;
  const auto calib = calibration_from(splits.train, 4, 8);
  const auto qm = quantize_model(trained, calib);

  SUBCASE("plan covers exactly the projection weights") {
    CHECK(qm.plan().quantized == costmodel::QuantPlan::projections(toy_config()).quantized);
    CHECK(qm.activations.size() == qm.weights.size());
    for (const auto& [name, q] : qm.weights) {
      CHECK(q.params.scheme == Scheme::symmetric_per_channel);
      CHECK(qm.activations.at(name).scheme == Scheme::asymmetric_per_tensor);
    }
    CHECK(qm.params.tensors.token_embedding == trained.tensors.token_embedding);
  }
  SUBCASE("deterministic") {
    CHECK(quantize_model(trained, calib) == qm);
    const auto& t = splits.dev[0].tokens;
    const auto a = forward_quantized_full(qm, t, 4);
    const auto b = forward_quantized_full(qm, t, 4);
    CHECK(a.hidden == b.hidden);
  }
  SUBCASE("MACs equal the fp32 model for the same length configuration") {
    model::Encoder<float> fp(trained);
    Rng pick(11);
    for (int trial = 0; trial < 30; ++trial) {
      const auto& t = splits.dev[trial].tokens;
      const auto lc = training::sample_length_config(t.size(), 2, 0.3, pick);
      std::uint64_t q_macs = 0, f_macs = 0;
      {
        numerics::MacScope s;
        const auto r = forward_quantized_adaptive(qm, t, lc, 4);
        q_macs = s.elapsed();
        CHECK(r.hidden.rows() == t.size());
        CHECK(r.trace.macs == costmodel::flops_count(toy_config(), t.size(), lc));
      }
      {
        numerics::MacScope s;
        fp.adaptive(t, lc, 4);
        f_macs = s.elapsed();
      }
      CHECK(q_macs == f_macs);
    }
  }
  SUBCASE("argmax agreement with the fp32 model") {
    model::Encoder<float> fp(trained);
    std::size_t agree = 0;
    for (const auto& ex : splits.dev) {
      const auto f = fp.full(ex.tokens, 4).span;
      const auto q = forward_quantized_full(qm, ex.tokens, 4).span;
      if (f.start == q.start && f.end == q.end) ++agree;
    }
    MESSAGE("agreement " << agree << "/" << splits.dev.size());
    CHECK(double(agree) / double(splits.dev.size()) >= 0.95);
  }
  SUBCASE("assemble checks completeness") {
    CHECK(assemble_quantized(qm.params, qm.weights, qm.activations) == qm);
    auto missing = qm.weights;
    missing.erase(missing.begin());
    CHECK_THROWS_AS(assemble_quantized(qm.params, missing, qm.activations), FormatError);
  }
}
