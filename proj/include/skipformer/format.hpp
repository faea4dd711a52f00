#pragma once

// Binary containers.
//
// MLLW (weights and masks):
//   "MLLW" | version u32 LE = 1 | header length u64 LE | header JSON (UTF-8)
//   | payload
// The header carries the model config and an ordered tensor table of
// {name, shape, byte_offset}; offsets are relative to the payload start and
// tensors are contiguous in table order. Weights are f32 LE row-major; mask
// files set "dtype": "mask-u8" and store one byte (0 or 1) per element.
//
// PEMB (perceptual embeddings):
//   "PEMB" | version u32 LE = 1 | rows u32 LE | dim u32 LE | rows*dim f32 LE

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "skipformer/error.hpp"
#include "skipformer/model.hpp"
#include "skipformer/numerics.hpp"

namespace skipformer {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::uint32_t kFormatVersion = 1;

namespace io {

inline void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(Bytes& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f32(Bytes& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

inline std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline float get_f32(const std::uint8_t* p) { return std::bit_cast<float>(get_u32(p)); }

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const Bytes& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to '" + path.string() + "'");
}

struct TensorSpec {
  std::string name;
  std::vector<std::size_t> shape;

  std::size_t elements() const {
    std::size_t n = 1;
    for (std::size_t s : shape) n *= s;
    return n;
  }
};

// Tensor table of a model with this config, in storage order.
inline std::vector<TensorSpec> model_tensor_specs(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model;
  std::vector<TensorSpec> specs;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    specs.push_back({p + "ln1_gamma", {d}});
    specs.push_back({p + "ln1_beta", {d}});
    specs.push_back({p + "wq", {d, d}});
    specs.push_back({p + "wk", {d, d}});
    specs.push_back({p + "wv", {d, d}});
    specs.push_back({p + "wo", {d, d}});
    specs.push_back({p + "ln2_gamma", {d}});
    specs.push_back({p + "ln2_beta", {d}});
    specs.push_back({p + "fc1", {d, cfg.d_ff}});
    specs.push_back({p + "fc1_bias", {cfg.d_ff}});
    specs.push_back({p + "fc2", {cfg.d_ff, d}});
    specs.push_back({p + "fc2_bias", {d}});
  }
  specs.push_back({"token_embedding", {cfg.vocab_size, d}});
  specs.push_back({"position_embedding", {cfg.max_positions, d}});
  specs.push_back({"final_ln_gamma", {d}});
  specs.push_back({"final_ln_beta", {d}});
  specs.push_back({"unembedding", {d, cfg.vocab_size}});
  return specs;
}

// Views onto the model's tensors in model_tensor_specs order.
template <typename M>
  requires std::is_same_v<std::remove_const_t<M>, Model>
auto model_tensor_data(M& m) {
  using Data = std::conditional_t<std::is_const_v<M>, const std::vector<float>, std::vector<float>>;
  std::vector<Data*> out;
  for (auto& b : m.blocks) {
    out.insert(out.end(), {&b.ln1_gamma, &b.ln1_beta, &b.wq.data, &b.wk.data, &b.wv.data, &b.wo.data,
                           &b.ln2_gamma, &b.ln2_beta, &b.fc1.data, &b.fc1_bias, &b.fc2.data, &b.fc2_bias});
  }
  out.insert(out.end(), {&m.token_embedding.data, &m.position_embedding.data, &m.final_ln_gamma,
                         &m.final_ln_beta, &m.unembedding.data});
  return out;
}

inline nlohmann::ordered_json config_to_json(const ModelConfig& cfg) {
  nlohmann::ordered_json j;
  j["n_layers"] = cfg.n_layers;
  j["d_model"] = cfg.d_model;
  j["n_heads"] = cfg.n_heads;
  j["d_ff"] = cfg.d_ff;
  j["vocab_size"] = cfg.vocab_size;
  j["max_positions"] = cfg.max_positions;
  j["activation"] = to_string(cfg.activation);
  j["ln_eps"] = cfg.ln_eps;
  return j;
}

// Throws ShapeError for invalid values; callers rewrap as needed.
inline ModelConfig config_from_json(const nlohmann::json& j) {
  auto count = [&](const char* key) -> std::size_t {
    if (!j.contains(key)) throw ShapeError(std::string("config field '") + key + "' missing");
    const auto& v = j.at(key);
    if (!v.is_number_unsigned()) throw ShapeError(std::string("config field '") + key + "' must be a non-negative integer");
    return v.get<std::size_t>();
  };
  ModelConfig cfg;
  cfg.n_layers = count("n_layers");
  cfg.d_model = count("d_model");
  cfg.n_heads = count("n_heads");
  cfg.d_ff = count("d_ff");
  cfg.vocab_size = count("vocab_size");
  cfg.max_positions = count("max_positions");
  if (j.contains("activation")) {
    const auto& a = j.at("activation");
    if (a == "relu") cfg.activation = ActivationKind::ReLU;
    else if (a == "gelu") cfg.activation = ActivationKind::GELU;
    else throw ShapeError("config field 'activation' must be \"relu\" or \"gelu\"");
  }
  if (j.contains("ln_eps")) {
    if (!j.at("ln_eps").is_number()) throw ShapeError("config field 'ln_eps' must be a number");
    cfg.ln_eps = j.at("ln_eps").get<float>();
  }
  cfg.validate();
  return cfg;
}

inline Bytes encode_container(nlohmann::ordered_json header, const std::vector<TensorSpec>& specs,
                              std::size_t element_size, const Bytes& payload) {
  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (const TensorSpec& s : specs) {
    table.push_back({{"name", s.name}, {"shape", s.shape}, {"byte_offset", offset}});
    offset += s.elements() * element_size;
  }
  header["tensors"] = std::move(table);
  const std::string text = header.dump();
  Bytes out{'M', 'L', 'L', 'W'};
  put_u32(out, kFormatVersion);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

struct DecodedContainer {
  nlohmann::json header;
  ModelConfig config;
  const std::uint8_t* payload = nullptr;
  std::size_t payload_size = 0;
};

// Checks framing, dtype, config and that the tensor table matches `expected`
// exactly (names, shapes, contiguous offsets, payload length).
inline DecodedContainer decode_container(const Bytes& bytes, std::string_view dtype, std::size_t element_size,
                                         std::vector<TensorSpec> (*expected_for)(const ModelConfig&)) {
  if (bytes.size() < 16) throw FormatError("truncated file: " + std::to_string(bytes.size()) + " bytes");
  if (std::memcmp(bytes.data(), "MLLW", 4) != 0) throw FormatError("bad magic: expected \"MLLW\"");
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kFormatVersion) throw FormatError("unsupported format version " + std::to_string(version));
  const std::uint64_t header_len = get_u64(bytes.data() + 8);
  if (header_len > bytes.size() - 16) throw FormatError("truncated header");

  DecodedContainer out;
  try {
    out.header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("header is not valid JSON: ") + e.what());
  }
  if (!out.header.is_object()) throw FormatError("header must be a JSON object");
  const std::string found_dtype = out.header.value("dtype", std::string("f32"));
  if (found_dtype != dtype) throw FormatError("dtype '" + found_dtype + "', expected '" + std::string(dtype) + "'");
  if (!out.header.contains("config")) throw FormatError("header has no config");
  try {
    out.config = config_from_json(out.header.at("config"));
  } catch (const Error& e) {
    throw FormatError(std::string("header config: ") + e.what());
  }
  out.payload = bytes.data() + 16 + header_len;
  out.payload_size = bytes.size() - 16 - header_len;

  if (!out.header.contains("tensors") || !out.header.at("tensors").is_array()) {
    throw FormatError("header has no tensor table");
  }
  const auto& table = out.header.at("tensors");
  const std::vector<TensorSpec> expected = expected_for(out.config);
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& t = table[i];
    if (!t.is_object() || !t.contains("name") || !t.at("name").is_string()) {
      throw FormatError("tensor table entry " + std::to_string(i) + " has no name");
    }
    const std::string name = t.at("name").get<std::string>();
    if (i >= expected.size()) {
      throw FormatError("tensor '" + name + "': not expected for config (n_layers " +
                        std::to_string(out.config.n_layers) + ")");
    }
    if (name != expected[i].name) {
      throw FormatError("tensor '" + name + "': expected '" + expected[i].name + "' at index " + std::to_string(i));
    }
    std::vector<std::size_t> shape;
    try {
      shape = t.at("shape").get<std::vector<std::size_t>>();
    } catch (const nlohmann::json::exception&) {
      throw FormatError("tensor '" + name + "': bad shape");
    }
    if (shape != expected[i].shape) throw FormatError("tensor '" + name + "': shape does not match config");
    if (!t.contains("byte_offset") || !t.at("byte_offset").is_number_unsigned() ||
        t.at("byte_offset").get<std::uint64_t>() != offset) {
      throw FormatError("tensor '" + name + "': byte_offset inconsistent (expected " + std::to_string(offset) + ")");
    }
    offset += expected[i].elements() * element_size;
    if (offset > out.payload_size) throw FormatError("tensor '" + name + "': payload truncated");
  }
  if (table.size() < expected.size()) throw FormatError("tensor '" + expected[table.size()].name + "': missing");
  if (offset != out.payload_size) {
    throw FormatError("payload has " + std::to_string(out.payload_size - offset) + " trailing bytes");
  }
  return out;
}

}  // namespace io

inline Bytes serialize_model(const Model& model) {
  const auto specs = io::model_tensor_specs(model.config);
  const auto data = io::model_tensor_data(model);
  Bytes payload;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (data[i]->size() != specs[i].elements()) throw ShapeError("tensor '" + specs[i].name + "' has wrong size");
    for (float v : *data[i]) io::put_f32(payload, v);
  }
  nlohmann::ordered_json header;
  header["dtype"] = "f32";
  header["config"] = io::config_to_json(model.config);
  return io::encode_container(std::move(header), specs, 4, payload);
}

inline Model deserialize_model(const Bytes& bytes) {
  const io::DecodedContainer c = io::decode_container(bytes, "f32", 4, &io::model_tensor_specs);
  Model m;
  m.config = c.config;
  const std::size_t d = c.config.d_model;
  m.blocks.resize(c.config.n_layers);
  for (BlockWeights& b : m.blocks) {
    b.wq = b.wk = b.wv = b.wo = Matrix(d, d);
    b.fc1 = Matrix(d, c.config.d_ff);
    b.fc2 = Matrix(c.config.d_ff, d);
  }
  m.token_embedding = Matrix(c.config.vocab_size, d);
  m.position_embedding = Matrix(c.config.max_positions, d);
  m.unembedding = Matrix(d, c.config.vocab_size);

  const auto specs = io::model_tensor_specs(c.config);
  const auto data = io::model_tensor_data(m);
  const std::uint8_t* p = c.payload;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    data[i]->resize(specs[i].elements());
    for (float& v : *data[i]) {
      v = io::get_f32(p);
      p += 4;
      if (!std::isfinite(v)) throw FormatError("tensor '" + specs[i].name + "': non-finite value");
    }
  }
  return m;
}

inline void save_model(const Model& model, const std::filesystem::path& path) {
  io::write_file(path, serialize_model(model));
}

inline Model load_model(const std::filesystem::path& path) { return deserialize_model(io::read_file(path)); }

// Perceptual embeddings -------------------------------------------------------

inline Bytes serialize_perceptual(const Matrix& rows) {
  Bytes out{'P', 'E', 'M', 'B'};
  io::put_u32(out, kFormatVersion);
  io::put_u32(out, static_cast<std::uint32_t>(rows.rows));
  io::put_u32(out, static_cast<std::uint32_t>(rows.cols));
  for (float v : rows.data) io::put_f32(out, v);
  return out;
}

inline Matrix deserialize_perceptual(const Bytes& bytes) {
  if (bytes.size() < 16) throw FormatError("perceptual file truncated: " + std::to_string(bytes.size()) + " bytes");
  if (std::memcmp(bytes.data(), "PEMB", 4) != 0) throw FormatError("perceptual file: bad magic, expected \"PEMB\"");
  const std::uint32_t version = io::get_u32(bytes.data() + 4);
  if (version != kFormatVersion) throw FormatError("perceptual file: unsupported version " + std::to_string(version));
  const std::uint64_t rows = io::get_u32(bytes.data() + 8);
  const std::uint64_t dim = io::get_u32(bytes.data() + 12);
  const std::uint64_t expected = 16 + rows * dim * 4;
  if (bytes.size() != expected) {
    throw FormatError("perceptual file: expected " + std::to_string(expected) + " bytes for " + std::to_string(rows) +
                      "x" + std::to_string(dim) + ", found " + std::to_string(bytes.size()));
  }
  Matrix m(rows, dim);
  const std::uint8_t* p = bytes.data() + 16;
  for (float& v : m.data) {
    v = io::get_f32(p);
    p += 4;
    if (!std::isfinite(v)) throw FormatError("perceptual file: non-finite value");
  }
  return m;
}

inline void save_perceptual(const Matrix& rows, const std::filesystem::path& path) {
  io::write_file(path, serialize_perceptual(rows));
}

inline Matrix load_perceptual(const std::filesystem::path& path) {
  return deserialize_perceptual(io::read_file(path));
}

}  // namespace skipformer
