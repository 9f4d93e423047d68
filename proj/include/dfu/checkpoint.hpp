#pragma once

// Checkpoint file format:
//   "DFUN" (4 ASCII bytes)
//   version        u32 little-endian (currently 1)
//   header length  u64 little-endian
//   UTF-8 JSON header: network spec, ordered tensor index
//     (name/shape/byte_offset/byte_length), flags
//   concatenated raw little-endian 32-bit float payloads in index order,
//   no padding between payloads.

#include <dfu/network.hpp>
#include <dfu/optim.hpp>

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfu {

constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointErrorKind { kBadMagic, kBadVersion, kTruncated, kHeaderMismatch, kIo };

struct CheckpointError : std::runtime_error {
  CheckpointError(CheckpointErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  CheckpointErrorKind kind() const { return kind_; }

private:
  CheckpointErrorKind kind_;
};

// ---------------------------------------------------------------------------
// NetworkSpec <-> JSON

inline nlohmann::json spec_to_json(const NetworkSpec& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerSpec& layer : net.layers) {
    nlohmann::json j;
    if (const auto* conv = std::get_if<ConvLayer>(&layer)) {
      j = {{"kind", "conv"},          {"name", conv->name},
           {"in", conv->spec.in_channels}, {"out", conv->spec.out_channels},
           {"kernel", conv->spec.kernel},  {"stride", conv->spec.stride},
           {"pad", conv->spec.pad}};
    } else if (const auto* pool = std::get_if<PoolLayer>(&layer)) {
      j = {{"kind", "pool"},
           {"mode", pool->spec.mode == PoolMode::kMax ? "max" : "average"},
           {"kernel", pool->spec.kernel},
           {"stride", pool->spec.stride},
           {"rounding", pool->spec.rounding == PoolRounding::kCeil ? "ceil" : "floor"}};
    } else if (const auto* lrn = std::get_if<LrnLayer>(&layer)) {
      j = {{"kind", "lrn"},
           {"n", lrn->params.n},
           {"k", lrn->params.k},
           {"alpha", lrn->params.alpha},
           {"beta", lrn->params.beta}};
    } else if (std::holds_alternative<ReluLayer>(layer)) {
      j = {{"kind", "relu"}};
    } else if (const auto* par = std::get_if<ParallelConvLayer>(&layer)) {
      j = {{"kind", "parallel"},
           {"name", par->name},
           {"in", par->spec.branch1.in_channels},
           {"c1", par->spec.branch1.out_channels},
           {"c3", par->spec.branch3.out_channels},
           {"c5", par->spec.branch5.out_channels}};
    } else if (const auto* fc = std::get_if<FcLayer>(&layer)) {
      j = {{"kind", "fc"}, {"name", fc->name}, {"in", fc->in_units}, {"out", fc->out_units}};
    }
    layers.push_back(std::move(j));
  }
  return {{"input", {net.input_shape[0], net.input_shape[1], net.input_shape[2]}},
          {"classes", net.num_classes},
          {"layers", layers}};
}

inline NetworkSpec spec_from_json(const nlohmann::json& j) {
  NetworkSpec net;
  const auto& input = j.at("input");
  net.input_shape = {input.at(0).get<std::size_t>(), input.at(1).get<std::size_t>(),
                     input.at(2).get<std::size_t>()};
  net.num_classes = j.at("classes").get<std::size_t>();
  for (const auto& lj : j.at("layers")) {
    const std::string kind = lj.at("kind").get<std::string>();
    if (kind == "conv") {
      net.layers.push_back(ConvLayer{
          lj.at("name").get<std::string>(),
          ConvSpec{lj.at("in").get<std::size_t>(), lj.at("out").get<std::size_t>(),
                   lj.at("kernel").get<std::size_t>(), lj.at("stride").get<std::size_t>(),
                   lj.at("pad").get<std::size_t>()}});
    } else if (kind == "pool") {
      net.layers.push_back(PoolLayer{
          PoolSpec{lj.at("mode").get<std::string>() == "max" ? PoolMode::kMax : PoolMode::kAverage,
                   lj.at("kernel").get<std::size_t>(), lj.at("stride").get<std::size_t>(),
                   lj.at("rounding").get<std::string>() == "ceil" ? PoolRounding::kCeil
                                                                  : PoolRounding::kFloor}});
    } else if (kind == "lrn") {
      net.layers.push_back(LrnLayer{LrnParams{lj.at("n").get<std::size_t>(),
                                              lj.at("k").get<double>(),
                                              lj.at("alpha").get<double>(),
                                              lj.at("beta").get<double>()}});
    } else if (kind == "relu") {
      net.layers.push_back(ReluLayer{});
    } else if (kind == "parallel") {
      net.layers.push_back(ParallelConvLayer{
          lj.at("name").get<std::string>(),
          make_parallel_conv(lj.at("in").get<std::size_t>(), lj.at("c1").get<std::size_t>(),
                             lj.at("c3").get<std::size_t>(), lj.at("c5").get<std::size_t>())});
    } else if (kind == "fc") {
      net.layers.push_back(FcLayer{lj.at("name").get<std::string>(),
                                   lj.at("in").get<std::size_t>(),
                                   lj.at("out").get<std::size_t>()});
    } else {
      throw CheckpointError(CheckpointErrorKind::kHeaderMismatch, "unknown layer kind: " + kind);
    }
  }
  return net;
}

// ---------------------------------------------------------------------------

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  NetworkSpec spec;
  nlohmann::json flags = nlohmann::json::object();
  std::vector<std::string> tensor_order;
  std::map<std::string, Tensor> tensors;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
  std::uint32_t bits = 0;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

inline std::uint32_t get_u32(const std::string& data, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data[at + i])) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(const std::string& data, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[at + i])) << (8 * i);
  return v;
}

inline float get_f32(const std::string& data, std::size_t at) {
  const std::uint32_t bits = get_u32(data, at);
  float v = 0.0f;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json index = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const std::string& name : ckpt.tensor_order) {
    const Tensor& t = ckpt.tensors.at(name);
    const std::uint64_t bytes = static_cast<std::uint64_t>(t.size()) * 4;
    index.push_back({{"name", name},
                     {"shape", t.shape()},
                     {"byte_offset", offset},
                     {"byte_length", bytes}});
    offset += bytes;
  }
  const nlohmann::json header = {
      {"flags", ckpt.flags}, {"spec", spec_to_json(ckpt.spec)}, {"tensors", index}};
  const std::string header_text = header.dump();

  std::string out = "DFUN";
  detail::put_u32(out, ckpt.version);
  detail::put_u64(out, header_text.size());
  out += header_text;
  for (const std::string& name : ckpt.tensor_order) {
    const Tensor& t = ckpt.tensors.at(name);
    for (std::size_t i = 0; i < t.size(); ++i)
      detail::put_f32(out, static_cast<float>(t[i]));
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& data) {
  if (data.size() < 16)
    throw CheckpointError(CheckpointErrorKind::kTruncated, "checkpoint shorter than its header");
  if (data.compare(0, 4, "DFUN") != 0)
    throw CheckpointError(CheckpointErrorKind::kBadMagic, "bad magic bytes");
  Checkpoint ckpt;
  ckpt.version = detail::get_u32(data, 4);
  if (ckpt.version != kCheckpointVersion)
    throw CheckpointError(CheckpointErrorKind::kBadVersion,
                          "unsupported checkpoint version " + std::to_string(ckpt.version));
  const std::uint64_t header_len = detail::get_u64(data, 8);
  if (16 + header_len > data.size())
    throw CheckpointError(CheckpointErrorKind::kTruncated, "header extends past end of file");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(data.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointErrorKind::kHeaderMismatch,
                          std::string("header is not valid JSON: ") + e.what());
  }
  try {
    ckpt.spec = spec_from_json(header.at("spec"));
    ckpt.flags = header.value("flags", nlohmann::json::object());
    const std::size_t payload_start = 16 + header_len;
    std::uint64_t expected_offset = 0;
    for (const auto& entry : header.at("tensors")) {
      const std::string name = entry.at("name").get<std::string>();
      if (ckpt.tensors.count(name))
        throw CheckpointError(CheckpointErrorKind::kHeaderMismatch,
                              "duplicate tensor name: " + name);
      std::vector<std::size_t> shape = entry.at("shape").get<std::vector<std::size_t>>();
      const std::uint64_t byte_offset = entry.at("byte_offset").get<std::uint64_t>();
      const std::uint64_t byte_length = entry.at("byte_length").get<std::uint64_t>();
      std::size_t count = 1;
      for (std::size_t e : shape) count *= e;
      if (byte_length != static_cast<std::uint64_t>(count) * 4 || byte_offset != expected_offset)
        throw CheckpointError(CheckpointErrorKind::kHeaderMismatch,
                              "tensor index inconsistent for " + name);
      if (payload_start + byte_offset + byte_length > data.size())
        throw CheckpointError(CheckpointErrorKind::kTruncated,
                              "payload truncated at tensor " + name);
      Tensor t(shape);
      for (std::size_t i = 0; i < count; ++i)
        t[i] = static_cast<double>(
            detail::get_f32(data, payload_start + byte_offset + i * 4));
      ckpt.tensor_order.push_back(name);
      ckpt.tensors.emplace(name, std::move(t));
      expected_offset += byte_length;
    }
    if (payload_start + expected_offset != data.size())
      throw CheckpointError(CheckpointErrorKind::kHeaderMismatch,
                            "payload length does not match tensor index");
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointErrorKind::kHeaderMismatch,
                          std::string("malformed header fields: ") + e.what());
  }
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError(CheckpointErrorKind::kIo, "cannot open for writing: " + path);
  const std::string data = encode_checkpoint(ckpt);
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw CheckpointError(CheckpointErrorKind::kIo, "write failed: " + path);
}

// Assemble a checkpoint from trained parameters, optionally with optimizer
// state and extra named tensors (for example a fitted input normalizer).
inline Checkpoint make_checkpoint(const NetworkSpec& spec, const Params& params,
                                  const AdamState* adam = nullptr,
                                  const std::vector<std::pair<std::string, Tensor>>& extras = {},
                                  nlohmann::json flags = nlohmann::json::object()) {
  Checkpoint ckpt;
  ckpt.spec = spec;
  ckpt.flags = std::move(flags);
  for (const std::string& name : param_names(spec)) {
    auto it = params.find(name);
    if (it == params.end())
      throw std::invalid_argument("checkpoint: missing parameter tensor " + name);
    ckpt.tensor_order.push_back(name);
    ckpt.tensors.emplace(name, it->second);
  }
  if (adam) {
    ckpt.flags["adam"] = {{"t", adam->t},
                          {"beta1", adam->beta1},
                          {"beta2", adam->beta2},
                          {"epsilon", adam->epsilon}};
    for (const std::string& name : param_names(spec)) {
      ckpt.tensor_order.push_back("adam.m." + name);
      ckpt.tensors.emplace("adam.m." + name, adam->m.at(name));
      ckpt.tensor_order.push_back("adam.v." + name);
      ckpt.tensors.emplace("adam.v." + name, adam->v.at(name));
    }
  }
  for (const auto& [name, tensor] : extras) {
    ckpt.tensor_order.push_back(name);
    ckpt.tensors.emplace(name, tensor);
  }
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const NetworkSpec& spec, const Params& params,
                            const AdamState* adam = nullptr,
                            const std::vector<std::pair<std::string, Tensor>>& extras = {},
                            nlohmann::json flags = nlohmann::json::object()) {
  save_checkpoint(path, make_checkpoint(spec, params, adam, extras, std::move(flags)));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrorKind::kIo, "cannot open for reading: " + path);
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(data);
}

// Extract the network parameters (validated against the network spec's shapes).
inline Params params_from_checkpoint(const Checkpoint& ckpt) {
  Params params;
  const auto shapes = detail::param_shapes(ckpt.spec);
  for (const auto& [name, shape] : shapes) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end())
      throw CheckpointError(CheckpointErrorKind::kHeaderMismatch,
                            "checkpoint lacks parameter " + name);
    if (it->second.shape() != shape)
      throw CheckpointError(CheckpointErrorKind::kHeaderMismatch,
                            "parameter shape mismatch for " + name);
    params.emplace(name, it->second);
  }
  return params;
}

inline std::optional<AdamState> adam_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.flags.contains("adam")) return std::nullopt;
  AdamState state;
  const auto& j = ckpt.flags.at("adam");
  state.t = j.at("t").get<long>();
  state.beta1 = j.at("beta1").get<double>();
  state.beta2 = j.at("beta2").get<double>();
  state.epsilon = j.at("epsilon").get<double>();
  for (const std::string& name : param_names(ckpt.spec)) {
    state.m.emplace(name, ckpt.tensors.at("adam.m." + name));
    state.v.emplace(name, ckpt.tensors.at("adam.v." + name));
  }
  return state;
}

}  // namespace dfu
