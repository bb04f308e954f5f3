// Copyright (c) 2026 stfmerge contributors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <fstream>
#include <random>

#include "stfmerge/tensor_store.hpp"
#include "support.hpp"

using namespace stfmerge;
using testsup::make_record;
using testsup::random_record;
using testsup::TempDir;

namespace {

void write_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Handcrafted container bytes: 8-byte little-endian header length, JSON
// header, raw buffer.
std::string container_bytes(const std::string& header_json, const std::string& buffer) {
  std::string out;
  const std::uint64_t len = header_json.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xFF));
  out += header_json;
  out += buffer;
  return out;
}

std::string f32_bytes(std::initializer_list<float> values) {
  std::string out(values.size() * 4, '\0');
  std::size_t i = 0;
  for (float value : values) {
    std::memcpy(out.data() + 4 * i, &value, 4);
    ++i;
  }
  return out;
}

}  // namespace

TEST_CASE("names are listed in lexicographic order") {
  TempDir dir("names");
  write_checkpoint(dir.file("t.safetensors"),
                   {make_record("w", {2, 2}, {1, 2, 3, 4}), make_record("b", {2}, {5, 6})});
  const auto store = CheckpointReader::open(dir.file("t.safetensors"));
  REQUIRE(store.names().size() == 2);
  CHECK(store.names()[0] == "b");
  CHECK(store.names()[1] == "w");
  CHECK(store.info("w").shape == std::vector<std::int64_t>{2, 2});
}

TEST_CASE("write/read round trip is bitwise identical") {
  TempDir dir("roundtrip");
  std::mt19937_64 rng(5);
  std::vector<TensorRecord> records;
  records.push_back(random_record("a.weight", {7, 3}, rng));
  records.push_back(random_record("b.bias", {11}, rng));
  records.push_back(random_record("c", {2, 3, 4}, rng));
  records.push_back(make_record("scalar", {}, {42.0F}));
  write_checkpoint(dir.file("t.safetensors"), records);

  const auto store = CheckpointReader::open(dir.file("t.safetensors"));
  for (const auto& record : records) {
    const auto loaded = store.read(record.name);
    CHECK(loaded.shape == record.shape);
    REQUIRE(loaded.data.size() == record.data.size());
    CHECK(std::memcmp(loaded.data.data(), record.data.data(), 4 * record.data.size()) == 0);
  }
}

TEST_CASE("empty tensor list round-trips as a valid file") {
  TempDir dir("empty");
  write_checkpoint(dir.file("t.safetensors"), {});
  const auto store = CheckpointReader::open(dir.file("t.safetensors"));
  CHECK(store.names().empty());
}

TEST_CASE("16-bit floats are promoted exactly on read") {
  TempDir dir("f16");
  // 0x3E00 = 1.5, 0xC000 = -2.0, 0x3C00 = 1.0, 0x0000 = 0.0 in binary16.
  std::string buffer;
  buffer.push_back('\x00');
  buffer.push_back('\x3E');
  buffer.push_back('\x00');
  buffer.push_back('\xC0');
  buffer.push_back('\x00');
  buffer.push_back('\x3C');
  buffer.push_back('\x00');
  buffer.push_back('\x00');
  const std::string header = R"({"h":{"dtype":"F16","shape":[4],"data_offsets":[0,8]}})";
  write_bytes(dir.file("t.safetensors"), container_bytes(header, buffer));

  const auto store = CheckpointReader::open(dir.file("t.safetensors"));
  const auto record = store.read("h");
  CHECK(record.source_dtype == Dtype::F16);
  REQUIRE(record.data.size() == 4);
  CHECK(record.data[0] == 1.5F);
  CHECK(record.data[1] == -2.0F);
  CHECK(record.data[2] == 1.0F);
  CHECK(record.data[3] == 0.0F);
}

TEST_CASE("bfloat16 is promoted exactly on read") {
  TempDir dir("bf16");
  // 0x4020 = 2.5, 0xBF80 = -1.0 in bfloat16.
  std::string buffer;
  buffer.push_back('\x20');
  buffer.push_back('\x40');
  buffer.push_back('\x80');
  buffer.push_back('\xBF');
  const std::string header = R"({"h":{"dtype":"BF16","shape":[2],"data_offsets":[0,4]}})";
  write_bytes(dir.file("t.safetensors"), container_bytes(header, buffer));
  const auto record = CheckpointReader::open(dir.file("t.safetensors")).read("h");
  CHECK(record.data[0] == 2.5F);
  CHECK(record.data[1] == -1.0F);
}

TEST_CASE("re-narrowed f16 output can be read back") {
  TempDir dir("narrow");
  CheckpointWriter writer(dir.file("t.safetensors"));
  writer.add(make_record("x", {3}, {0.5F, 1.5F, -2.0F}), Dtype::F16);
  writer.finalize();
  const auto store = CheckpointReader::open(dir.file("t.safetensors"));
  CHECK(store.info("x").dtype == Dtype::F16);
  const auto record = store.read("x");
  CHECK(record.data[0] == 0.5F);
  CHECK(record.data[1] == 1.5F);
  CHECK(record.data[2] == -2.0F);
}

TEST_CASE("malformed files are rejected") {
  TempDir dir("bad");

  SUBCASE("truncated header length") {
    write_bytes(dir.file("t.safetensors"), std::string("\x10\x00", 2));
    CHECK_THROWS_AS(CheckpointReader::open(dir.file("t.safetensors")), FormatError);
  }
  SUBCASE("header length past end of file") {
    write_bytes(dir.file("t.safetensors"), container_bytes("{}", "").substr(0, 9));
    CHECK_THROWS_AS(CheckpointReader::open(dir.file("t.safetensors")), FormatError);
  }
  SUBCASE("header is not JSON") {
    write_bytes(dir.file("t.safetensors"), container_bytes("not json", ""));
    CHECK_THROWS_AS(CheckpointReader::open(dir.file("t.safetensors")), FormatError);
  }
  SUBCASE("truncated tensor data") {
    const std::string header = R"({"w":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}})";
    write_bytes(dir.file("t.safetensors"), container_bytes(header, f32_bytes({1, 2})));
    CHECK_THROWS_AS(CheckpointReader::open(dir.file("t.safetensors")), FormatError);
  }
  SUBCASE("offsets disagree with the shape") {
    const std::string header = R"({"w":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}})";
    write_bytes(dir.file("t.safetensors"), container_bytes(header, f32_bytes({1, 2})));
    CHECK_THROWS_AS(CheckpointReader::open(dir.file("t.safetensors")), FormatError);
  }
  SUBCASE("duplicate tensor names") {
    const std::string header =
        R"({"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},)"
        R"("w":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}})";
    write_bytes(dir.file("t.safetensors"), container_bytes(header, f32_bytes({1, 2})));
    CHECK_THROWS_AS(CheckpointReader::open(dir.file("t.safetensors")), FormatError);
  }
  SUBCASE("unsupported dtype") {
    const std::string header = R"({"w":{"dtype":"I64","shape":[1],"data_offsets":[0,8]}})";
    write_bytes(dir.file("t.safetensors"), container_bytes(header, std::string(8, '\0')));
    CHECK_THROWS_AS(CheckpointReader::open(dir.file("t.safetensors")), DtypeError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(CheckpointReader::open(dir.file("absent.safetensors")), IoError);
  }
}

TEST_CASE("reading an unknown tensor name fails") {
  TempDir dir("unknown");
  write_checkpoint(dir.file("t.safetensors"), {make_record("w", {1}, {1.0F})});
  const auto store = CheckpointReader::open(dir.file("t.safetensors"));
  CHECK_THROWS_AS(store.read("nope"), SchemaError);
}

TEST_CASE("name collisions fail before any bytes are written") {
  TempDir dir("collision");
  CheckpointWriter writer(dir.file("t.safetensors"));
  writer.add(make_record("w", {1}, {1.0F}));
  writer.add(make_record("w", {1}, {2.0F}));
  CHECK_THROWS_AS(writer.finalize(), FormatError);
  CHECK(!std::filesystem::exists(dir.file("t.safetensors")));
}

TEST_CASE("classification follows the documented precedence") {
  TempDir dir("classify");
  std::mt19937_64 rng(7);
  write_checkpoint(dir.file("t.safetensors"),
                   {
                       random_record("encoder.block.0.ffn.wi.weight", {32, 16}, rng),
                       random_record("encoder.block.0.layer_norm.weight", {16}, rng),
                       random_record("shared.weight", {64, 16}, rng),
                       random_record("decoder.stats", {4, 4, 4}, rng),
                   });
  const auto store = CheckpointReader::open(dir.file("t.safetensors"));

  const auto roles = classify(store, RoleRules::defaults());
  CHECK(roles.at("encoder.block.0.ffn.wi.weight") == ParamRole::LinearMatrix);  // 2-D default
  CHECK(roles.at("encoder.block.0.layer_norm.weight") == ParamRole::Normalization);
  CHECK(roles.at("shared.weight") == ParamRole::Embedding);  // first-match precedence
  CHECK(roles.at("decoder.stats") == ParamRole::Bias);       // non-2-D default

  // Every tensor gets exactly one role, deterministically.
  CHECK(roles.size() == store.names().size());
  CHECK(classify(store, RoleRules::defaults()) == roles);

  RoleRules custom;
  custom.rules = {{"re:.*\\.stats", ParamRole::Ignore}};
  const auto custom_roles = classify(store, custom);
  CHECK(custom_roles.at("decoder.stats") == ParamRole::Ignore);
  CHECK(custom_roles.at("shared.weight") == ParamRole::LinearMatrix);  // 2-D default, no match
}

TEST_CASE("linear rules on non-2-D tensors fall back to the other default") {
  TempDir dir("demote");
  std::mt19937_64 rng(9);
  write_checkpoint(dir.file("t.safetensors"), {random_record("odd.vector", {8}, rng)});
  const auto store = CheckpointReader::open(dir.file("t.safetensors"));
  RoleRules rules;
  rules.rules = {{"odd*", ParamRole::LinearMatrix}};
  rules.default_other = ParamRole::Normalization;
  CHECK(classify(store, rules).at("odd.vector") == ParamRole::Normalization);
}

TEST_CASE("invalid role patterns raise a config error") {
  TempDir dir("badpattern");
  write_checkpoint(dir.file("t.safetensors"), {make_record("w", {1}, {1.0F})});
  const auto store = CheckpointReader::open(dir.file("t.safetensors"));
  RoleRules rules;
  rules.rules = {{"re:[", ParamRole::Ignore}};
  CHECK_THROWS_AS(classify(store, rules), ConfigError);
}

TEST_CASE("lora delta materialization") {
  SUBCASE("rank-1 product") {
    const auto delta = materialize_lora_delta(make_record("a", {1, 2}, {2, 3}),
                                              make_record("b", {2, 1}, {1, 0}), 1.0);
    CHECK(delta.shape == std::vector<std::int64_t>{2, 2});
    CHECK(delta.data == std::vector<float>{2, 3, 0, 0});
  }
  SUBCASE("zero scale annihilates") {
    const auto delta = materialize_lora_delta(make_record("a", {1, 2}, {2, 3}),
                                              make_record("b", {2, 1}, {1, 5}), 0.0);
    CHECK(delta.data == std::vector<float>{0, 0, 0, 0});
  }
  SUBCASE("identity times identity, halved") {
    const auto delta = materialize_lora_delta(make_record("a", {2, 2}, {1, 0, 0, 1}),
                                              make_record("b", {2, 2}, {1, 0, 0, 1}), 0.5);
    CHECK(delta.data == std::vector<float>{0.5F, 0, 0, 0.5F});
  }
  SUBCASE("inner dimension mismatch") {
    CHECK_THROWS_AS(materialize_lora_delta(make_record("a", {3, 2}, {1, 2, 3, 4, 5, 6}),
                                           make_record("b", {2, 2}, {1, 2, 3, 4}), 1.0),
                    ShapeError);
  }
}

TEST_CASE("random stores round-trip through write and read, raw reads included") {
  std::mt19937_64 rng(13);
  TempDir dir("property");
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<TensorRecord> records;
    const int count = 1 + static_cast<int>(rng() % 6);
    for (int i = 0; i < count; ++i) {
      std::vector<std::int64_t> shape;
      const int ndims = 1 + static_cast<int>(rng() % 3);
      for (int d = 0; d < ndims; ++d) shape.push_back(1 + static_cast<std::int64_t>(rng() % 5));
      records.push_back(random_record("tensor." + std::to_string(i), shape, rng));
    }
    const auto path = dir.file("t" + std::to_string(trial) + ".safetensors");
    write_checkpoint(path, records);
    const auto store = CheckpointReader::open(path);
    REQUIRE(store.names().size() == records.size());
    for (const auto& record : records) {
      const auto loaded = store.read(record.name);
      CHECK(loaded.shape == record.shape);
      CHECK(std::memcmp(loaded.data.data(), record.data.data(), 4 * record.data.size()) == 0);
      const auto raw = store.read_raw(record.name);
      CHECK(raw.bytes.size() == 4 * record.data.size());
    }
  }
}
