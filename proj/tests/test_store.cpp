// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <zlib.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "mlora/attach.hpp"
#include "mlora/store.hpp"
#include "oracles.hpp"
#include "toy.hpp"

using namespace mlora;
namespace fs = std::filesystem;

namespace {

// Byte-level writer for the documented layout, independent of the codec.
struct Bytes {
  std::vector<std::uint8_t> b;
  void u8(std::uint8_t v) { b.push_back(v); }
  void u16(std::uint16_t v) { for (int i = 0; i < 2; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i))); }
  void u32(std::uint32_t v) { for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i))); }
  void u64(std::uint64_t v) { for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i))); }
  void str(const std::string& s) { b.insert(b.end(), s.begin(), s.end()); }
  void seal() { u32(static_cast<std::uint32_t>(crc32(0L, b.data(), static_cast<uInt>(b.size())))); }
};

Checkpoint sample_checkpoint() {
  Checkpoint c;
  c.add(Tensor::from_matrix("w", oracle::random_matrix(3, 4, 1)));
  MatrixF f(2, 2);
  f(0, 0) = 1.5f;
  f(1, 1) = -std::numeric_limits<float>::denorm_min();
  c.add(Tensor::from_matrix("layers.0.q_proj", f));
  Tensor v;
  v.name = "vec";
  v.dims = {3};
  v.f64 = {0.1, -0.0, 1e300};
  c.add(v);
  c.metadata["kind"] = "test";
  return c;
}

fs::path temp_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("mlora_store_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_SUITE("store") {

TEST_CASE("encoding matches the byte layout") {
  Checkpoint c;
  Tensor a;
  a.name = "ab";
  a.dtype = DType::f32;
  a.dims = {1, 2};
  a.f32 = {1.0f, -2.0f};
  c.add(a);
  Tensor d;
  d.name = "d";
  d.dims = {1};
  d.f64 = {0.5};
  c.add(d);
  c.metadata["k"] = "v";

  Bytes e;
  e.str("MLRA");
  e.u32(1);
  e.u32(3);
  e.u16(9), e.str("@meta:k=v"), e.u8(1), e.u8(1), e.u32(0);
  e.u16(2), e.str("ab"), e.u8(0), e.u8(2), e.u32(1), e.u32(2);
  e.u32(std::bit_cast<std::uint32_t>(1.0f)), e.u32(std::bit_cast<std::uint32_t>(-2.0f));
  e.u16(1), e.str("d"), e.u8(1), e.u8(1), e.u32(1), e.u64(std::bit_cast<std::uint64_t>(0.5));
  e.seal();
  CHECK(encode_checkpoint(c) == e.b);
  CHECK(decode_checkpoint(e.b) == c);
}

TEST_CASE("round trip is bit identical") {
  const Checkpoint c = sample_checkpoint();
  const auto bytes = encode_checkpoint(c);
  const Checkpoint back = decode_checkpoint(bytes);
  CHECK(back == c);
  CHECK(std::signbit(back.find("vec")->f64[1]));
  CHECK(encode_checkpoint(back) == bytes);

  const Checkpoint empty;
  CHECK(decode_checkpoint(encode_checkpoint(empty)) == empty);
  CHECK(encode_checkpoint(empty).size() == 16);
}

TEST_CASE("corrupt inputs are rejected") {
  const auto bytes = encode_checkpoint(sample_checkpoint());
  for (std::size_t n : {std::size_t{0}, std::size_t{7}, bytes.size() / 2, bytes.size() - 1}) {
    CHECK_THROWS_AS(decode_checkpoint(std::span(bytes).first(n)), FormatError);
  }
  std::mt19937_64 gen(3);
  int caught = 0;
  for (int k = 0; k < 1000; ++k) {
    auto flipped = bytes;
    const std::size_t bit = gen() % (flipped.size() * 8);
    flipped[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
    try {
      decode_checkpoint(flipped);
    } catch (const FormatError&) {
      ++caught;
    }
  }
  CHECK(caught == 1000);

  Bytes magic;
  magic.str("MLRB"), magic.u32(1), magic.u32(0), magic.seal();
  CHECK_THROWS_WITH_AS(decode_checkpoint(magic.b), doctest::Contains("magic"), FormatError);
  Bytes version;
  version.str("MLRA"), version.u32(2), version.u32(0), version.seal();
  CHECK_THROWS_WITH_AS(decode_checkpoint(version.b), doctest::Contains("version"), FormatError);
  Bytes dup;
  dup.str("MLRA"), dup.u32(1), dup.u32(2);
  for (int i = 0; i < 2; ++i) dup.u16(1), dup.str("x"), dup.u8(1), dup.u8(1), dup.u32(0);
  dup.seal();
  CHECK_THROWS_WITH_AS(decode_checkpoint(dup.b), doctest::Contains("duplicate"), FormatError);
  Bytes trailing;
  trailing.str("MLRA"), trailing.u32(1), trailing.u32(0), trailing.u8(0), trailing.seal();
  CHECK_THROWS_AS(decode_checkpoint(trailing.b), FormatError);
  Bytes dtype;
  dtype.str("MLRA"), dtype.u32(1), dtype.u32(1), dtype.u16(1), dtype.str("x"), dtype.u8(7), dtype.u8(0);
  dtype.seal();
  CHECK_THROWS_AS(decode_checkpoint(dtype.b), FormatError);
}

TEST_CASE("checkpoint construction errors") {
  Checkpoint c = sample_checkpoint();
  CHECK_THROWS_AS(c.add(Tensor::from_matrix("w", MatrixD(1, 1))), ArgumentError);
  CHECK_THROWS_AS(c.add(Tensor::from_matrix("@meta:x=y", MatrixD(1, 1))), ArgumentError);
  CHECK_THROWS_AS(c.meta("missing"), FormatError);
  CHECK(c.meta("kind") == "test");
  CHECK(c.find("nope") == nullptr);
}

TEST_CASE("files") {
  const fs::path dir = temp_dir("files");
  const Checkpoint c = sample_checkpoint();
  save_checkpoint(dir / "a.mlra", c);
  CHECK(load_checkpoint(dir / "a.mlra") == c);
  save_checkpoint(dir / "a.mlra", Checkpoint{});
  CHECK(load_checkpoint(dir / "a.mlra") == Checkpoint{});
  std::size_t entries = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir)) ++entries;
  CHECK(entries == 1);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.mlra"), FormatError);
  CHECK_THROWS_AS(save_checkpoint(dir / "no" / "dir.mlra", c), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("weight deltas") {
  Checkpoint base, tuned;
  base.add(Tensor::from_matrix("layers.0.q_proj", MatrixD{{1.0, 2.0}, {3.0, 4.0}}));
  tuned.add(Tensor::from_matrix("layers.0.q_proj", MatrixD{{1.5, 2.0}, {2.0, 4.25}}));
  const MatrixD d = delta_from_checkpoints(base, tuned, "layers.0.q_proj");
  CHECK(d == MatrixD{{0.5, 0.0}, {-1.0, 0.25}});
  CHECK_THROWS_AS(delta_from_checkpoints(base, tuned, "layers.1.q_proj"), ArgumentError);
  Checkpoint other;
  other.add(Tensor::from_matrix("layers.0.q_proj", MatrixD(2, 3)));
  CHECK_THROWS_AS(delta_from_checkpoints(base, other, "layers.0.q_proj"), ArgumentError);

  const MatrixD b = oracle::random_matrix(5, 4, 2), t = oracle::random_matrix(5, 4, 3);
  Checkpoint cb, ct;
  cb.add(Tensor::from_matrix("s", b));
  ct.add(Tensor::from_matrix("s", t));
  const MatrixD dd = delta_from_checkpoints(cb, ct, "s");
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 4; ++c) CHECK(dd(r, c) == t(r, c) - b(r, c));
}

TEST_CASE("model checkpoints") {
  Rng rng(4);
  SUBCASE("plain") {
    const Model<float> m(toy::small_config(), rng);
    const Checkpoint c = to_checkpoint(m, {{"run.seed", "4"}});
    CHECK(c.meta("kind") == "model");
    CHECK(c.meta("adapter.state") == "none");
    CHECK(c.meta("run.seed") == "4");
    const Model<float> back = model_from_checkpoint<float>(decode_checkpoint(encode_checkpoint(c)));
    const auto pa = m.parameters(), pb = back.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);
  }
  SUBCASE("multilora") {
    Model<float> m(toy::small_config(), rng);
    attach_multilora(m, parse_targets("q_proj,up_proj"), 3, 2, rng);
    toy::perturb_adapters(m, rng);
    const Checkpoint c = to_checkpoint(m);
    CHECK(c.meta("adapter.method") == "multilora");
    CHECK(c.meta("adapter.n") == "3");
    Model<float> back = model_from_checkpoint<float>(c);
    CHECK(back.method() == Method::multilora);
    const TokenBatch b = toy::sample_batch(1, 2, 20);
    CHECK(back.logits(b) == m.logits(b));
    CHECK(to_checkpoint(back) == c);

    Checkpoint missing = c;
    missing.tensors.pop_back();
    CHECK_THROWS_AS(model_from_checkpoint<float>(missing), FormatError);
    Checkpoint extra = c;
    extra.add(Tensor::from_matrix("stray", MatrixF(1, 1)));
    CHECK_THROWS_AS(model_from_checkpoint<float>(extra), FormatError);
  }
  SUBCASE("lora merged") {
    Model<double> m(toy::small_config(), rng);
    attach_lora(m, parse_targets("all"), 2, 4.0, rng);
    toy::perturb_adapters(m, rng);
    merge(m);
    Model<double> back = model_from_checkpoint<double>(to_checkpoint(m));
    CHECK(back.adapter_state() == AdapterState::merged);
    const TokenBatch b = toy::sample_batch(1, 3, 20);
    CHECK(back.logits(b) == m.logits(b));
  }
}

TEST_CASE("key-value files") {
  std::istringstream in("# comment\nlr = 0.001\n\n  method=lora  \nseed = 3 # trailing\n");
  const auto kv = parse_kv(in);
  CHECK(kv.size() == 3);
  CHECK(kv.at("lr") == "0.001");
  CHECK(kv.at("method") == "lora");
  CHECK(kv.at("seed") == "3");
  std::istringstream bad("lr 0.1\n");
  CHECK_THROWS_AS(parse_kv(bad), FormatError);
  std::istringstream repeated("a = 1\na = 2\n");
  CHECK_THROWS_AS(parse_kv(repeated), FormatError);
  CHECK_THROWS_AS(load_kv("/nonexistent/cfg.txt"), FormatError);
}

TEST_CASE("exact reals round trip") {
  for (double v : {0.1, 1.0 / 3.0, 5e-6, -2.5e300, 0.0}) CHECK(std::stod(exact_real(v)) == v);
  CHECK(exact_real(0.5) == "0.5");
}

}
