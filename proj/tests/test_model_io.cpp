#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cpli/model_io.hpp"
#include "oracles.hpp"

#include <cstring>
#include <filesystem>
#include <random>
#include <sstream>
#include <unistd.h>

using namespace cpli;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("cpli_io_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  fs::path operator/(const std::string& name) const { return path / name; }
};

std::vector<std::uint8_t> be32(std::uint32_t v) {
  return {static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16),
          static_cast<std::uint8_t>(v >> 8), static_cast<std::uint8_t>(v)};
}

std::vector<std::uint8_t> idx_bytes(std::uint8_t rank, const std::vector<std::uint32_t>& dims,
                                    const std::vector<std::uint8_t>& payload) {
  std::vector<std::uint8_t> b{0, 0, 8, rank};
  for (auto d : dims) {
    const auto e = be32(d);
    b.insert(b.end(), e.begin(), e.end());
  }
  b.insert(b.end(), payload.begin(), payload.end());
  return b;
}

Checkpoint sample_checkpoint() {
  const NetworkSpec spec = make_conv_net({3, 8, 8}, {4, 6}, 5, {1});
  Checkpoint c{spec, init_weights(spec, 42), {}};
  c.meta.seed = 42;
  c.meta.epochs = 3;
  c.meta.dataset = "synth";
  c.meta.accuracy = 0.8125;
  // awkward values must survive bit-exactly
  c.weights[0].weight[0] = 0.1;
  c.weights[0].weight[1] = -0.0;
  c.weights[0].weight[2] = 5e-324;
  c.weights[0].weight[3] = 1.7976931348623157e308;
  return c;
}

}  // namespace

TEST_CASE("IDX: zero images load as an empty handle") {
  TempDir tmp;
  write_file_bytes(tmp / "img", idx_bytes(3, {0, 28, 28}, {}));
  write_file_bytes(tmp / "lab", idx_bytes(1, {0}, {}));
  const DatasetHandle d = load_idx(tmp / "img", tmp / "lab");
  CHECK(d.count() == 0);
  CHECK(d.images.dims() == Dims{0, 1, 28, 28});
}

TEST_CASE("IDX: hand-crafted 2-image 2x2 fixture") {
  TempDir tmp;
  write_file_bytes(tmp / "img", idx_bytes(3, {2, 2, 2}, {0, 255, 51, 102, 204, 1, 2, 3}));
  write_file_bytes(tmp / "lab", idx_bytes(1, {2}, {7, 3}));
  const DatasetHandle d = load_idx(tmp / "img", tmp / "lab", 10, "test");
  REQUIRE(d.count() == 2);
  CHECK(d.images.dims() == Dims{2, 1, 2, 2});
  CHECK(d.labels == std::vector<std::size_t>{7, 3});
  CHECK(d.split == "test");
  const std::vector<double> want{0.0, 1.0, 0.2, 0.4, 0.8, 1 / 255.0, 2 / 255.0, 3 / 255.0};
  for (std::size_t k = 0; k < 8; ++k) CHECK(d.images[k] == want[k]);
  CHECK(d.image(1).dims() == Dims{1, 2, 2});
  CHECK(d.image(1)[0] == 0.8);
}

TEST_CASE("IDX: errors") {
  TempDir tmp;
  write_file_bytes(tmp / "img", idx_bytes(3, {2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7}));
  SUBCASE("label count mismatch") {
    write_file_bytes(tmp / "lab", idx_bytes(1, {3}, {0, 1, 2}));
    CHECK_THROWS_AS(load_idx(tmp / "img", tmp / "lab"), std::invalid_argument);
  }
  SUBCASE("label out of range") {
    write_file_bytes(tmp / "lab", idx_bytes(1, {2}, {0, 10}));
    CHECK_THROWS_AS(load_idx(tmp / "img", tmp / "lab", 10), std::invalid_argument);
  }
  SUBCASE("bad magic") {
    auto b = idx_bytes(3, {1, 1, 1}, {9});
    b[0] = 1;
    write_file_bytes(tmp / "bad", b);
    try {
      load_idx_images(tmp / "bad");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.offset() == 0);
    }
    b[0] = 0;
    b[2] = 0x0D;  // float payloads are not supported
    write_file_bytes(tmp / "bad", b);
    CHECK_THROWS_AS(load_idx_images(tmp / "bad"), ParseError);
  }
  SUBCASE("truncated payload reports the file length as offset") {
    auto b = idx_bytes(3, {1000000, 28, 28}, {1, 2, 3});
    write_file_bytes(tmp / "bad", b);
    try {
      load_idx_images(tmp / "bad");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.offset() == b.size());
    }
  }
  SUBCASE("truncated header") {
    write_file_bytes(tmp / "bad", {0, 0, 8, 3, 0, 0});
    CHECK_THROWS_AS(load_idx_images(tmp / "bad"), ParseError);
  }
  SUBCASE("wrong rank") {
    write_file_bytes(tmp / "bad", idx_bytes(2, {1, 1}, {0}));
    CHECK_THROWS_AS(load_idx_images(tmp / "bad"), ParseError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_idx_images(tmp / "nope"), std::runtime_error); }
}

TEST_CASE("CIFAR-10 binary batches") {
  std::vector<std::uint8_t> rec(3073);
  rec[0] = 6;
  for (std::size_t p = 0; p < 3072; ++p) rec[1 + p] = static_cast<std::uint8_t>((p * 7) % 256);
  SUBCASE("one-record fixture") {
    const DatasetHandle d = parse_cifar_binary(rec);
    REQUIRE(d.count() == 1);
    CHECK(d.labels[0] == 6);
    CHECK(d.images.dims() == Dims{1, 3, 32, 32});
    // channel 1, row 2, col 5 is byte 1 + 1024 + 64 + 5
    const std::size_t p = 1024 + 2 * 32 + 5;
    CHECK(d.images(0, 1, 2, 5) == static_cast<double>((p * 7) % 256) / 255.0);
  }
  SUBCASE("file round trip and empty file") {
    TempDir tmp;
    write_file_bytes(tmp / "b.bin", rec);
    CHECK(load_cifar_binary(tmp / "b.bin").images == parse_cifar_binary(rec).images);
    write_file_bytes(tmp / "e.bin", {});
    CHECK(load_cifar_binary(tmp / "e.bin").count() == 0);
  }
  SUBCASE("length not a multiple of 3073") {
    std::vector<std::uint8_t> two = rec;
    two.insert(two.end(), rec.begin(), rec.begin() + 100);
    try {
      parse_cifar_binary(two);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.offset() == 3073);
    }
  }
  SUBCASE("label byte above 9") {
    std::vector<std::uint8_t> two = rec;
    two.insert(two.end(), rec.begin(), rec.end());
    two[3073] = 10;
    try {
      parse_cifar_binary(two);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.offset() == 3073);
    }
  }
}

TEST_CASE("synth_dataset") {
  const DatasetHandle a = synth_dataset(3, 50, 4, {3, 10, 10});
  const DatasetHandle b = synth_dataset(3, 50, 4, {3, 10, 10});
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  CHECK(a.images != synth_dataset(4, 50, 4, {3, 10, 10}).images);
  for (double v : a.images.values()) CHECK((v >= 0.0 && v <= 1.0));
  for (std::size_t l : a.labels) CHECK(l < 4);
  CHECK_NOTHROW(a.validate());
  const DatasetHandle e = synth_dataset(3, 0, 4, {3, 10, 10});
  CHECK(e.count() == 0);
  CHECK(e.images.dims() == Dims{0, 3, 10, 10});
  CHECK_THROWS_AS(synth_dataset(3, 5, 0, {3, 10, 10}), std::invalid_argument);
}

TEST_CASE("dataset subset") {
  const DatasetHandle a = synth_dataset(3, 10, 4, {1, 4, 4});
  const DatasetHandle s = a.subset({7, 2});
  REQUIRE(s.count() == 2);
  CHECK(s.labels[0] == a.labels[7]);
  CHECK(s.image(1) == a.image(2));
}

TEST_CASE("checkpoint: round trip is bit-identical") {
  const Checkpoint c = sample_checkpoint();
  const auto bytes = serialize_checkpoint(c);
  const Checkpoint back = deserialize_checkpoint(bytes);
  CHECK(back == c);
  CHECK(std::signbit(back.weights[0].weight[1]));
  CHECK(serialize_checkpoint(back) == bytes);

  TempDir tmp;
  save_checkpoint(c, tmp / "m.ckpt");
  CHECK(load_checkpoint(tmp / "m.ckpt") == c);
  CHECK(read_file_bytes(tmp / "m.ckpt") == bytes);
}

TEST_CASE("checkpoint: size audit against the documented layout") {
  const Checkpoint c = sample_checkpoint();
  const auto bytes = serialize_checkpoint(c);
  REQUIRE(std::memcmp(bytes.data(), "CPLI1", 5) == 0);
  const std::size_t hlen = bytes[5] | (bytes[6] << 8) | (bytes[7] << 16) | (static_cast<std::size_t>(bytes[8]) << 24);
  std::size_t payload = 0;
  for (const LayerSpec& l : c.spec.layers) {
    if (!l.has_params()) continue;
    payload += dims_product(l.weight_dims()) * 8 + 4;
    payload += dims_product(l.bias_dims()) * 8 + 4;
  }
  // hand count for this net: conv 4x3x3x3 + 4, conv 6x4x3x3 + 6, linear 5x96 + 5
  CHECK(payload == (108 + 4 + 216 + 6 + 480 + 5) * 8 + 6 * 4);
  CHECK(bytes.size() == 5 + 4 + hlen + 4 + payload);
}

TEST_CASE("checkpoint: corruption is detected") {
  const auto bytes = serialize_checkpoint(sample_checkpoint());
  SUBCASE("payload byte") {
    auto bad = bytes;
    bad[bad.size() - 20] ^= 0x01;
    CHECK_THROWS_AS(deserialize_checkpoint(bad), ChecksumError);
  }
  SUBCASE("header byte") {
    auto bad = bytes;
    bad[12] ^= 0x20;
    CHECK_THROWS_AS(deserialize_checkpoint(bad), ChecksumError);
  }
  SUBCASE("every tensor block is covered") {
    std::mt19937_64 rng(1);
    const std::size_t hlen = bytes[5] | (bytes[6] << 8) | (bytes[7] << 16);
    for (int trial = 0; trial < 50; ++trial) {
      auto bad = bytes;
      const std::size_t pos = 13 + hlen + rng() % (bytes.size() - 13 - hlen);
      bad[pos] ^= static_cast<std::uint8_t>(1u << (rng() % 8));
      CHECK_THROWS_AS(deserialize_checkpoint(bad), ChecksumError);
    }
  }
  SUBCASE("version") {
    auto bad = bytes;
    bad[4] = '2';
    CHECK_THROWS_AS(deserialize_checkpoint(bad), VersionError);
  }
  SUBCASE("magic and truncation") {
    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(deserialize_checkpoint(bad), ParseError);
    bad = bytes;
    bad.resize(bytes.size() - 3);
    CHECK_THROWS_AS(deserialize_checkpoint(bad), ParseError);
    bad = bytes;
    bad.push_back(0);
    CHECK_THROWS_AS(deserialize_checkpoint(bad), ParseError);
  }
}

TEST_CASE("network spec json round trip") {
  const NetworkSpec s = make_conv_net({1, 28, 28}, {8, 16, 16}, 10, {1, 2});
  CHECK(network_spec_from_json(network_spec_to_json(s)) == s);
}

TEST_CASE("trace round trip") {
  PruneTrace t(2);
  t[0] = {2, "cpli", 0.00123456789012345678, 16, 8, {0, 3, 5, 6, 9, 11, 12, 15}, 1, 2560, false,
          12.5, 3.25, 0.0, 1e-12, 2e-9, true};
  t[1] = {5, "cp_baseline", 1.0 / 3.0, 32, 1, {17}, 0, 640, true, 1e300, 5e-324, 1e-8, 0, 0, false};
  std::stringstream ss;
  write_trace(ss, t);
  const std::string text = ss.str();
  CHECK(read_trace(ss) == t);
  std::stringstream again;
  write_trace(again, read_trace(*std::make_unique<std::stringstream>(text)));
  CHECK(again.str() == text);

  std::stringstream bad(text.substr(0, text.rfind('\t')) + "\n");
  CHECK_THROWS_AS(read_trace(bad), ParseError);
}
