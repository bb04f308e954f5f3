// Copyright (c) 2026 stfmerge contributors
// SPDX-License-Identifier: Apache-2.0

#include "stfmerge/tensor_store.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cstring>
#include <fstream>
#include <regex>
#include <set>
#include <utility>

#include <json.hpp>

namespace stfmerge {

using json = nlohmann::json;

namespace {

constexpr std::uint64_t kMaxHeaderBytes = 256ull * 1024 * 1024;

std::uint64_t file_size_of(const std::filesystem::path& path) {
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  if (ec) throw IoError("[tensor_store] cannot stat '" + path.string() + "': " + ec.message());
  return size;
}

std::regex compile_pattern(const std::string& pattern) {
  try {
    if (pattern.rfind("re:", 0) == 0) return std::regex(pattern.substr(3));
    // Glob translation: * -> .*, ? -> ., everything else literal.
    std::string rx;
    rx.reserve(pattern.size() * 2);
    for (char c : pattern) {
      if (c == '*') {
        rx += ".*";
      } else if (c == '?') {
        rx += '.';
      } else if (std::strchr("\\^$.|+()[]{}", c) != nullptr) {
        rx += '\\';
        rx += c;
      } else {
        rx += c;
      }
    }
    return std::regex(rx);
  } catch (const std::regex_error& e) {
    throw ConfigError("[tensor_store] invalid role pattern '" + pattern + "': " + e.what());
  }
}

void promote_to_f32(Dtype dtype, const std::vector<std::uint8_t>& bytes, std::vector<float>& out) {
  const std::size_t count = bytes.size() / dtype_size(dtype);
  out.resize(count);
  if (dtype == Dtype::F32) {
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return;
  }
  for (std::size_t i = 0; i < count; ++i) {
    std::uint16_t bits;
    std::memcpy(&bits, bytes.data() + 2 * i, 2);
    out[i] = dtype == Dtype::F16 ? f16_to_f32(bits) : bf16_to_f32(bits);
  }
}

std::vector<std::uint8_t> encode_floats(const std::vector<float>& values, Dtype dtype) {
  std::vector<std::uint8_t> bytes(values.size() * dtype_size(dtype));
  if (dtype == Dtype::F32) {
    std::memcpy(bytes.data(), values.data(), bytes.size());
    return bytes;
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint16_t bits =
        dtype == Dtype::F16 ? f32_to_f16(values[i]) : f32_to_bf16(values[i]);
    std::memcpy(bytes.data() + 2 * i, &bits, 2);
  }
  return bytes;
}

}  // namespace

std::string role_name(ParamRole role) {
  switch (role) {
    case ParamRole::LinearMatrix:
      return "linear";
    case ParamRole::Bias:
      return "bias";
    case ParamRole::Embedding:
      return "embedding";
    case ParamRole::Normalization:
      return "normalization";
    case ParamRole::Ignore:
      return "ignore";
  }
  return "linear";
}

ParamRole role_from_name(const std::string& name) {
  if (name == "linear") return ParamRole::LinearMatrix;
  if (name == "bias") return ParamRole::Bias;
  if (name == "embedding") return ParamRole::Embedding;
  if (name == "normalization") return ParamRole::Normalization;
  if (name == "ignore") return ParamRole::Ignore;
  throw ConfigError("[tensor_store] unknown role '" + name + "'");
}

RoleRules RoleRules::defaults() {
  RoleRules rules;
  rules.rules = {
      {"*layer_norm*", ParamRole::Normalization},
      {"*layernorm*", ParamRole::Normalization},
      {"*ln_*", ParamRole::Normalization},
      {"*norm*", ParamRole::Normalization},
      {"*bias*", ParamRole::Bias},
      {"*embed*", ParamRole::Embedding},
      {"*wte*", ParamRole::Embedding},
      {"*wpe*", ParamRole::Embedding},
      {"shared*", ParamRole::Embedding},
  };
  rules.default_2d = ParamRole::LinearMatrix;
  rules.default_other = ParamRole::Bias;
  return rules;
}

CheckpointReader CheckpointReader::open(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IoError("[tensor_store] cannot open '" + path.string() + "' for reading");
  const std::uint64_t file_size = file_size_of(path);

  std::uint64_t header_len = 0;
  std::uint8_t len_bytes[8];
  in.read(reinterpret_cast<char*>(len_bytes), 8);
  if (!in || file_size < 8)
    throw FormatError("[tensor_store] '" + path.string() + "' is too short for a header");
  for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | len_bytes[i];
  if (header_len == 0 || header_len > kMaxHeaderBytes || header_len > file_size - 8)
    throw FormatError("[tensor_store] '" + path.string() + "' declares header of " +
                      std::to_string(header_len) + " bytes in a " + std::to_string(file_size) +
                      "-byte file");

  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw FormatError("[tensor_store] '" + path.string() + "' header is truncated");

  // nlohmann keeps only the last of duplicate keys, so duplicates are
  // detected while parsing.
  std::set<std::string> seen;
  bool duplicate = false;
  std::string duplicate_name;
  json::parser_callback_t cb = [&](int depth, json::parse_event_t event, json& parsed) {
    if (event == json::parse_event_t::key && depth == 1) {
      const auto key = parsed.get<std::string>();
      if (!seen.insert(key).second && !duplicate) {
        duplicate = true;
        duplicate_name = key;
      }
    }
    return true;
  };
  json meta = json::parse(header, cb, /*allow_exceptions=*/false);
  if (meta.is_discarded() || !meta.is_object())
    throw FormatError("[tensor_store] '" + path.string() + "' header is not a JSON object");
  if (duplicate)
    throw FormatError("[tensor_store] '" + path.string() + "' repeats tensor '" +
                      duplicate_name + "'");

  CheckpointReader reader;
  reader.path_ = path;
  reader.data_start_ = 8 + header_len;
  const std::uint64_t data_size = file_size - reader.data_start_;

  for (const auto& [name, entry] : meta.items()) {
    if (name == "__metadata__") continue;
    if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
        !entry.contains("data_offsets"))
      throw FormatError("[tensor_store] '" + path.string() + "' tensor '" + name +
                        "' has an incomplete header entry");
    TensorInfo info;
    try {
      info.dtype = dtype_from_name(entry.at("dtype").get<std::string>());
      for (const auto& dim : entry.at("shape")) {
        const auto value = dim.get<std::int64_t>();
        if (value < 0)
          throw FormatError("[tensor_store] '" + path.string() + "' tensor '" + name +
                            "' has a negative dimension");
        info.shape.push_back(value);
      }
      const auto& offsets = entry.at("data_offsets");
      if (!offsets.is_array() || offsets.size() != 2)
        throw FormatError("[tensor_store] '" + path.string() + "' tensor '" + name +
                          "' has malformed data offsets");
      info.begin = offsets[0].get<std::uint64_t>();
      info.end = offsets[1].get<std::uint64_t>();
    } catch (const json::exception& e) {
      throw FormatError("[tensor_store] '" + path.string() + "' tensor '" + name +
                        "' has a malformed header entry: " + e.what());
    }
    if (info.begin > info.end || info.end > data_size)
      throw FormatError("[tensor_store] '" + path.string() + "' tensor '" + name +
                        "' points past the end of the file");
    const auto expected = static_cast<std::uint64_t>(info.numel()) * dtype_size(info.dtype);
    if (info.end - info.begin != expected)
      throw FormatError("[tensor_store] '" + path.string() + "' tensor '" + name + "' stores " +
                        std::to_string(info.end - info.begin) + " bytes but its shape needs " +
                        std::to_string(expected));
    if (name.empty())
      throw FormatError("[tensor_store] '" + path.string() + "' contains an unnamed tensor");
    reader.infos_.emplace(name, std::move(info));
  }
  reader.names_.reserve(reader.infos_.size());
  for (const auto& [name, info] : reader.infos_) reader.names_.push_back(name);
  return reader;
}

const TensorInfo& CheckpointReader::info(const std::string& name) const {
  auto it = infos_.find(name);
  if (it == infos_.end())
    throw SchemaError("[tensor_store] '" + path_.string() + "' has no tensor '" + name + "'");
  return it->second;
}

RawTensor CheckpointReader::read_raw(const std::string& name) const {
  const TensorInfo& meta = info(name);
  // A fresh stream per read keeps handles safely shareable across threads.
  std::ifstream in(path_, std::ios::binary);
  if (!in)
    throw IoError("[tensor_store] cannot open '" + path_.string() + "' for reading");
  RawTensor raw;
  raw.name = name;
  raw.dtype = meta.dtype;
  raw.shape = meta.shape;
  raw.bytes.resize(meta.end - meta.begin);
  in.seekg(static_cast<std::streamoff>(data_start_ + meta.begin));
  in.read(reinterpret_cast<char*>(raw.bytes.data()), static_cast<std::streamsize>(raw.bytes.size()));
  if (!in)
    throw FormatError("[tensor_store] '" + path_.string() + "' tensor '" + name +
                      "' is truncated");
  return raw;
}

TensorRecord CheckpointReader::read(const std::string& name) const {
  RawTensor raw = read_raw(name);
  TensorRecord record;
  record.name = std::move(raw.name);
  record.shape = std::move(raw.shape);
  record.source_dtype = raw.dtype;
  promote_to_f32(raw.dtype, raw.bytes, record.data);
  return record;
}

CheckpointWriter::CheckpointWriter(std::filesystem::path path) : path_(std::move(path)) {}

void CheckpointWriter::add(TensorRecord record, Dtype store_as) {
  if (record.name.empty()) throw FormatError("[tensor_store] cannot write an unnamed tensor");
  if (record.numel() != static_cast<std::int64_t>(record.data.size()))
    throw ShapeError("[tensor_store] tensor '" + record.name + "' has " +
                     std::to_string(record.data.size()) + " elements but its shape needs " +
                     std::to_string(record.numel()));
  Pending pending;
  pending.name = std::move(record.name);
  pending.dtype = store_as;
  pending.shape = std::move(record.shape);
  pending.bytes = encode_floats(record.data, store_as);
  pending_.push_back(std::move(pending));
}

void CheckpointWriter::add_raw(RawTensor raw) {
  if (raw.name.empty()) throw FormatError("[tensor_store] cannot write an unnamed tensor");
  pending_.push_back(
      {std::move(raw.name), raw.dtype, std::move(raw.shape), std::move(raw.bytes)});
}

void CheckpointWriter::finalize() {
  if (finalized_) return;
  std::set<std::string> names;
  for (const auto& pending : pending_)
    if (!names.insert(pending.name).second)
      throw FormatError("[tensor_store] tensor name '" + pending.name +
                        "' would be written twice");

  json header = json::object();
  std::uint64_t offset = 0;
  for (const auto& pending : pending_) {
    header[pending.name] = {
        {"dtype", dtype_name(pending.dtype)},
        {"shape", pending.shape},
        {"data_offsets", {offset, offset + pending.bytes.size()}},
    };
    offset += pending.bytes.size();
  }
  std::string text = header.dump();
  while (text.size() % 8 != 0) text += ' ';

  std::ofstream out(path_, std::ios::binary | std::ios::trunc);
  if (!out)
    throw IoError("[tensor_store] cannot open '" + path_.string() + "' for writing");
  const std::uint64_t header_len = text.size();
  std::uint8_t len_bytes[8];
  for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<std::uint8_t>(header_len >> (8 * i));
  out.write(reinterpret_cast<const char*>(len_bytes), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& pending : pending_)
    out.write(reinterpret_cast<const char*>(pending.bytes.data()),
              static_cast<std::streamsize>(pending.bytes.size()));
  out.flush();
  if (!out) throw IoError("[tensor_store] failed writing '" + path_.string() + "'");
  finalized_ = true;
}

void write_checkpoint(const std::filesystem::path& path, const std::vector<TensorRecord>& records) {
  CheckpointWriter writer(path);
  for (const auto& record : records) writer.add(record);
  writer.finalize();
}

ParamRole classify_name(const std::string& name, std::size_t ndims, const RoleRules& rules) {
  for (const auto& rule : rules.rules) {
    if (std::regex_match(name, compile_pattern(rule.pattern))) {
      if (rule.role == ParamRole::LinearMatrix && ndims != 2) return rules.default_other;
      return rule.role;
    }
  }
  if (ndims == 2) return rules.default_2d;
  return rules.default_other;
}

std::map<std::string, ParamRole> classify(const CheckpointReader& store, const RoleRules& rules) {
  // Compile once; compile errors surface before any name is classified.
  std::vector<std::pair<std::regex, ParamRole>> compiled;
  compiled.reserve(rules.rules.size());
  for (const auto& rule : rules.rules) compiled.emplace_back(compile_pattern(rule.pattern), rule.role);

  std::map<std::string, ParamRole> roles;
  for (const auto& name : store.names()) {
    const std::size_t ndims = store.info(name).shape.size();
    ParamRole role = ndims == 2 ? rules.default_2d : rules.default_other;
    for (const auto& [regex, rule_role] : compiled) {
      if (std::regex_match(name, regex)) {
        role = rule_role == ParamRole::LinearMatrix && ndims != 2 ? rules.default_other
                                                                  : rule_role;
        break;
      }
    }
    roles.emplace(name, role);
  }
  return roles;
}

TensorRecord materialize_lora_delta(const TensorRecord& a_factor, const TensorRecord& b_factor,
                                    double lora_scale) {
  if (a_factor.shape.size() != 2 || b_factor.shape.size() != 2)
    throw ShapeError("[tensor_store] adapter factors must be 2-D, got '" + a_factor.name +
                     "' and '" + b_factor.name + "'");
  const auto k = b_factor.shape[1];
  if (a_factor.shape[0] != k)
    throw ShapeError("[tensor_store] adapter inner dimensions disagree: B is " +
                     std::to_string(b_factor.shape[0]) + "x" + std::to_string(k) + ", A is " +
                     std::to_string(a_factor.shape[0]) + "x" + std::to_string(a_factor.shape[1]));
  const auto m = b_factor.shape[0];
  const auto n = a_factor.shape[1];

  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  RowMajor a = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                   a_factor.data.data(), k, n)
                   .cast<double>();
  RowMajor b = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                   b_factor.data.data(), m, k)
                   .cast<double>();
  RowMajor delta = lora_scale * (b * a);

  TensorRecord record;
  record.shape = {m, n};
  record.data.resize(static_cast<std::size_t>(m * n));
  Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      record.data.data(), m, n) = delta.cast<float>();
  return record;
}

}  // namespace stfmerge
