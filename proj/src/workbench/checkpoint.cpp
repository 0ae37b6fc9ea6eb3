#include "quala/workbench/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "quala/errors.hpp"

namespace quala::workbench {

using nlohmann::ordered_json;
using numerics::Shape;
using numerics::Tensor;

namespace {

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(char((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(char((v >> (8 * i)) & 0xff));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void i8(std::int32_t v) { bytes_.push_back(char(static_cast<std::int8_t>(v))); }
  void raw(const std::string& s) { bytes_ += s; }
  std::size_t size() const { return bytes_.size(); }
  std::string take() { return std::move(bytes_); }

 private:
  std::string bytes_;
};

std::uint32_t read_u32(const std::string& b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(b[at + i])) << (8 * i);
  return v;
}

std::uint64_t read_u64(const std::string& b, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(b[at + i])) << (8 * i);
  return v;
}

ordered_json architecture_json(const model::ModelConfig& c) {
  return ordered_json{{"num_layers", c.num_layers},       {"hidden_size", c.hidden_size},
                      {"num_heads", c.num_heads},         {"ffn_size", c.ffn_size},
                      {"vocab_size", c.vocab_size},       {"max_positions", c.max_positions},
                      {"type_vocab_size", c.type_vocab_size}};
}

model::ModelConfig architecture_from(const ordered_json& j) {
  model::ModelConfig c;
  c.num_layers = j.at("num_layers").get<std::size_t>();
  c.hidden_size = j.at("hidden_size").get<std::size_t>();
  c.num_heads = j.at("num_heads").get<std::size_t>();
  c.ffn_size = j.at("ffn_size").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_positions = j.at("max_positions").get<std::size_t>();
  c.type_vocab_size = j.at("type_vocab_size").get<std::size_t>();
  return c;
}

std::string scheme_name(quant::Scheme s) {
  return s == quant::Scheme::symmetric_per_channel ? "symmetric_per_channel" : "asymmetric_per_tensor";
}

quant::Scheme parse_scheme(const std::string& s, const std::string& entry) {
  if (s == "symmetric_per_channel") return quant::Scheme::symmetric_per_channel;
  if (s == "asymmetric_per_tensor") return quant::Scheme::asymmetric_per_tensor;
  throw FormatError("unknown quantization scheme '" + s + "' for " + entry);
}

// Builds header and payload together so offsets always match the bytes.
std::string encode(const model::Parameters<float>& params, const quant::QuantizedModel* qm) {
  Writer payload;
  ordered_json tensors = ordered_json::array();
  ordered_json weight_q = ordered_json::array();
  ordered_json act_q = ordered_json::array();

  model::for_each_named(params.tensors, [&](const std::string& name, const Tensor<float>& t) {
    ordered_json e{{"name", name}};
    const quant::QuantizedTensor* q = nullptr;
    if (qm) {
      const auto it = qm->weights.find(name);
      if (it != qm->weights.end()) q = &it->second;
    }
    e["dtype"] = q ? "i8" : "f32";
    e["shape"] = t.shape();
    e["offset"] = payload.size();
    if (q) {
      for (auto c : q->codes) payload.i8(c);
      e["nbytes"] = q->codes.size();
      e["qparams"] = weight_q.size();
      const std::size_t scale_at = payload.size();
      for (float s : q->params.scale) payload.f32(s);
      weight_q.push_back(ordered_json{{"scheme", scheme_name(q->params.scheme)},
                                      {"zero_point", q->params.zero_point},
                                      {"scale_offset", scale_at},
                                      {"scale_nbytes", 4 * q->params.scale.size()}});
    } else {
      for (float v : t.data()) payload.f32(v);
      e["nbytes"] = 4 * t.numel();
    }
    tensors.push_back(std::move(e));
  });
  if (qm) {
    for (const auto& [name, qp] : qm->activations) {
      const std::size_t at = payload.size();
      for (float s : qp.scale) payload.f32(s);
      act_q.push_back(ordered_json{{"weight", name},
                                   {"scheme", scheme_name(qp.scheme)},
                                   {"zero_point", qp.zero_point},
                                   {"scale_offset", at},
                                   {"scale_nbytes", 4 * qp.scale.size()}});
    }
  }

  ordered_json header{{"kind", qm ? "quantized" : "fp32"},
                      {"stage", model::stage_name(params.stage)},
                      {"architecture", architecture_json(params.config)},
                      {"tensors", std::move(tensors)}};
  if (qm) {
    header["weight_qparams"] = std::move(weight_q);
    header["activation_qparams"] = std::move(act_q);
  }
  const std::string header_text = header.dump();

  Writer out;
  out.raw(std::string(checkpoint_magic, 4));
  out.u32(checkpoint_version);
  out.u64(header_text.size());
  out.raw(header_text);
  out.raw(payload.take());
  return out.take();
}

struct Region {
  std::size_t offset, nbytes;
  std::string owner;
};

std::vector<float> read_f32s(const std::string& payload, std::size_t offset, std::size_t count) {
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = std::bit_cast<float>(read_u32(payload, offset + 4 * i));
  return out;
}

quant::QuantParams read_qparams(const ordered_json& j, const std::string& payload, const std::string& entry,
                                std::vector<Region>& regions) {
  quant::QuantParams qp;
  qp.scheme = parse_scheme(j.at("scheme").get<std::string>(), entry);
  qp.zero_point = j.at("zero_point").get<std::int32_t>();
  const auto offset = j.at("scale_offset").get<std::size_t>();
  const auto nbytes = j.at("scale_nbytes").get<std::size_t>();
  if (nbytes % 4 != 0 || nbytes == 0) throw FormatError("scale region of " + entry + " has " + std::to_string(nbytes) + " bytes");
  if (offset > payload.size() || nbytes > payload.size() - offset)
    throw FormatError("truncated payload: scales of " + entry + " end past the file");
  regions.push_back({offset, nbytes, "scales of " + entry});
  qp.scale = read_f32s(payload, offset, nbytes / 4);
  try {
    qp.validate();
  } catch (const ContractError& e) {
    throw FormatError("invalid quantization parameters for " + entry + ": " + e.what());
  }
  return qp;
}

Checkpoint decode(const std::string& bytes, const std::string& label) {
  constexpr std::size_t preamble = 16;
  if (bytes.size() < preamble) throw FormatError(label + ": truncated preamble");
  if (bytes.compare(0, 4, checkpoint_magic, 4) != 0) throw FormatError(label + ": bad magic, not a QLML checkpoint");
  const auto version = read_u32(bytes, 4);
  if (version != checkpoint_version)
    throw FormatError(label + ": unsupported format version " + std::to_string(version));
  const auto header_len = read_u64(bytes, 8);
  if (header_len > bytes.size() - preamble) throw FormatError(label + ": truncated header");
  const std::string payload = bytes.substr(preamble + header_len);

  ordered_json header;
  try {
    header = ordered_json::parse(bytes.substr(preamble, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(label + ": corrupt header: " + e.what());
  }

  try {
    Checkpoint ck;
    const auto kind = header.at("kind").get<std::string>();
    if (kind == "fp32") {
      ck.kind = CheckpointKind::fp32;
    } else if (kind == "quantized") {
      ck.kind = CheckpointKind::quantized;
    } else {
      throw FormatError("unknown checkpoint kind '" + kind + "'");
    }
    model::ModelConfig config = architecture_from(header.at("architecture"));
    try {
      config.validate();
    } catch (const ConfigurationError& e) {
      throw FormatError(std::string("invalid architecture: ") + e.what());
    }
    ck.params = model::zero_params<float>(config);
    ck.params.stage = parse_stage(header.at("stage").get<std::string>());

    const auto& dir = header.at("tensors");
    const auto specs = model::parameter_specs(config);
    if (dir.size() != specs.size())
      throw FormatError("directory lists " + std::to_string(dir.size()) + " tensors, the architecture has " +
                        std::to_string(specs.size()));

    std::vector<Region> regions;
    std::map<std::string, quant::QuantizedTensor> qweights;
    std::size_t index = 0;
    std::size_t last_offset = 0;
    model::for_each_named(ck.params.tensors, [&](const std::string& name, Tensor<float>& t) {
      const auto& e = dir.at(index);
      const auto& spec = specs[index];
      ++index;
      const auto entry_name = e.at("name").get<std::string>();
      if (entry_name != name) throw FormatError("directory entry '" + entry_name + "' where '" + name + "' was expected");
      const auto shape = e.at("shape").get<Shape>();
      if (shape != spec.shape)
        throw FormatError("entry " + name + " has shape " + numerics::shape_string(shape) + ", expected " +
                          numerics::shape_string(spec.shape));
      const auto dtype = e.at("dtype").get<std::string>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto nbytes = e.at("nbytes").get<std::size_t>();
      if (offset < last_offset) throw FormatError("entry " + name + " has a descending offset");
      last_offset = offset;
      std::size_t width = 0;
      if (dtype == "f32") {
        width = 4;
      } else if (dtype == "i8") {
        width = 1;
      } else {
        throw FormatError("unknown dtype '" + dtype + "' for entry " + name);
      }
      const std::size_t numel = t.numel();
      if (nbytes != width * numel)
        throw FormatError("entry " + name + " declares " + std::to_string(nbytes) + " bytes for " +
                          std::to_string(numel) + " " + dtype + " elements");
      if (offset > payload.size() || nbytes > payload.size() - offset)
        throw FormatError("truncated payload at entry " + name);
      regions.push_back({offset, nbytes, "entry " + name});

      if (width == 4) {
        auto values = read_f32s(payload, offset, numel);
        t = Tensor<float>(shape, std::move(values));
        if (e.contains("qparams")) throw FormatError("f32 entry " + name + " carries quantization parameters");
        return;
      }
      if (ck.kind != CheckpointKind::quantized) throw FormatError("i8 entry " + name + " in an fp32 checkpoint");
      const auto qi = e.at("qparams").get<std::size_t>();
      const auto& wq = header.at("weight_qparams");
      if (qi >= wq.size()) throw FormatError("entry " + name + " references missing quantization record " + std::to_string(qi));
      quant::QuantizedTensor q;
      q.shape = shape;
      q.params = read_qparams(wq.at(qi), payload, name, regions);
      q.codes.resize(numel);
      for (std::size_t i = 0; i < numel; ++i) {
        q.codes[i] = static_cast<std::int8_t>(payload[offset + i]);
        if (q.codes[i] < q.params.q_min()) throw FormatError("entry " + name + " holds code -128");
      }
      if (q.params.scheme != quant::Scheme::symmetric_per_channel || q.params.scale.size() != shape.back())
        throw FormatError("entry " + name + " needs one symmetric scale per output channel");
      t = quant::dequantize(q);
      qweights.emplace(name, std::move(q));
    });

    std::map<std::string, quant::QuantParams> activations;
    if (ck.kind == CheckpointKind::quantized) {
      if (header.at("weight_qparams").size() != qweights.size())
        throw FormatError("weight quantization records do not match the i8 entries");
      for (const auto& a : header.at("activation_qparams")) {
        const auto name = a.at("weight").get<std::string>();
        auto qp = read_qparams(a, payload, "activation of " + name, regions);
        if (qp.scheme != quant::Scheme::asymmetric_per_tensor || qp.scale.size() != 1)
          throw FormatError("activation of " + name + " needs one asymmetric per-tensor scale");
        if (!activations.emplace(name, std::move(qp)).second) throw FormatError("duplicate activation range for " + name);
      }
    }

    std::sort(regions.begin(), regions.end(), [](const Region& a, const Region& b) { return a.offset < b.offset; });
    std::size_t cursor = 0;
    for (const auto& r : regions) {
      if (r.offset != cursor)
        throw FormatError(r.owner + (r.offset < cursor ? " overlaps the preceding region" : " leaves a gap before it"));
      cursor += r.nbytes;
    }
    if (cursor != payload.size())
      throw FormatError("payload has " + std::to_string(payload.size() - cursor) + " bytes not covered by the directory");

    if (ck.kind == CheckpointKind::quantized)
      ck.quantized = quant::assemble_quantized(ck.params, std::move(qweights), std::move(activations));
    return ck;
  } catch (const FormatError& e) {
    throw FormatError(label + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(label + ": malformed header: " + e.what());
  } catch (const ConfigurationError& e) {
    throw FormatError(label + ": " + e.what());
  }
}

}  // namespace

std::string encode_checkpoint(const model::Parameters<float>& params) { return encode(params, nullptr); }

std::string encode_checkpoint(const quant::QuantizedModel& qmodel) { return encode(qmodel.params, &qmodel); }

Checkpoint decode_checkpoint(const std::string& bytes, const std::string& label) { return decode(bytes, label); }

void save_checkpoint(const std::filesystem::path& path, const model::Parameters<float>& params) {
  write_file(path, encode_checkpoint(params));
}

void save_checkpoint(const std::filesystem::path& path, const quant::QuantizedModel& qmodel) {
  write_file(path, encode_checkpoint(qmodel));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode(read_file(path), path.string()); }

model::TrainingStage parse_stage(const std::string& text) {
  for (auto s : {model::TrainingStage::initialized, model::TrainingStage::distilled, model::TrainingStage::finetuned,
                 model::TrainingStage::length_adaptive})
    if (model::stage_name(s) == text) return s;
  throw FormatError("unknown training stage '" + text + "'");
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot write " + path.string());
  f.write(bytes.data(), std::streamsize(bytes.size()));
  if (!f) throw InputError("write failed for " + path.string());
}

}  // namespace quala::workbench
