#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "test_support.hpp"

using namespace lowbit;
using namespace testsupport;
namespace fs = std::filesystem;

TEST_CASE("digits per byte and memory reduction reproduce the packing table") {
  // (n_values, weights/byte, reduction); the 2-value row stores 8 per byte
  // since 2^8 = 256, giving the 32x reduction
  const std::vector<std::array<int, 3>> table = {
      {2, 8, 32}, {3, 5, 20}, {4, 4, 16}, {5, 3, 12},
      {8, 2, 8},  {9, 2, 8},  {16, 2, 8}, {17, 1, 4}};
  for (auto [n, k, r] : table) {
    CHECK(weights_per_byte(n) == k);
    CHECK(memory_reduction(n) == r);
  }
  CHECK(weights_per_byte(256) == 1);
  CHECK_THROWS_AS(weights_per_byte(257), std::invalid_argument);
  CHECK_THROWS_AS(weights_per_byte(1), std::invalid_argument);
}

TEST_CASE("pack worked examples") {
  auto g3 = grid_values(3);
  std::vector<float> w{-1.0f, 0.0f, 1.0f, 1.0f, -1.0f};
  auto bytes = pack_layer(w, g3);
  REQUIRE(bytes.size() == 1);
  CHECK(bytes[0] == 75);  // 0 + 1*3 + 2*9 + 2*27 + 0*81

  auto back = unpack_layer(bytes, g3, 5);
  CHECK(back == w);

  auto g2 = grid_values(2);
  std::vector<float> ones(8, 1.0f);
  auto b2 = pack_layer(ones, g2);
  REQUIRE(b2.size() == 1);
  CHECK(b2[0] == 255);

  CHECK(pack_layer(std::vector<float>{}, g3).empty());
  CHECK(unpack_layer(std::vector<uint8_t>{}, g3, 0).empty());
}

TEST_CASE("payload size formula") {
  for (int n : {2, 3, 4, 5, 8, 9, 16, 17})
    for (int64_t count : {0, 1, 4, 5, 7, 8, 100, 1001}) {
      const int k = weights_per_byte(n);
      CHECK(packed_size(count, n) == (count + k - 1) / k);
    }
}

TEST_CASE("pack rejects off-grid values with position and value") {
  auto g = grid_values(3);
  std::vector<float> w{-1.0f, 0.25f, 1.0f};
  CHECK_THROWS_WITH(pack_layer(w, g),
                    Catch::Matchers::ContainsSubstring("index 1"));
}

TEST_CASE("unpack validates payload length and digit range") {
  auto g3 = grid_values(3);
  CHECK_THROWS_WITH(unpack_layer(std::vector<uint8_t>{1, 2}, g3, 5),
                    Catch::Matchers::ContainsSubstring("does not match"));
  // 243 encodes a sixth nonzero digit (3^5) in a 5-digit byte
  CHECK_THROWS_WITH(unpack_layer(std::vector<uint8_t>{243}, g3, 5),
                    Catch::Matchers::ContainsSubstring("corrupt"));
  // final partial byte: 2 digits used, padding must be zero
  CHECK_NOTHROW(unpack_layer(std::vector<uint8_t>{75, 8}, g3, 7));
  CHECK_THROWS_WITH(unpack_layer(std::vector<uint8_t>{75, 9}, g3, 7),
                    Catch::Matchers::ContainsSubstring("corrupt"));
}

TEST_CASE("pack/unpack round trip across all supported value counts") {
  Prng rng(91);
  for (int n : {2, 3, 4, 5, 8, 9, 16, 17}) {
    auto g = grid_values(n);
    for (int rep = 0; rep < 50; ++rep) {
      const int64_t count = 1 + int64_t(rng.uniform_index(300));
      std::vector<float> w(static_cast<size_t>(count), 0.0f);
      for (float& v : w) v = g.values[rng.uniform_index(uint64_t(n))];
      auto bytes = pack_layer(w, g);
      CHECK(int64_t(bytes.size()) == packed_size(count, n));
      auto back = unpack_layer(bytes, g, count);
      CHECK(back == w);
    }
  }
}

TEST_CASE("container round trip reproduces forwards bit for bit") {
  Prng rng(92);
  const fs::path dir = fs::temp_directory_path() / "lowbit_pack_test";
  fs::create_directories(dir);
  const std::string path = (dir / "m.lbq").string();

  for (auto [kind, n] : std::vector<std::pair<ModelKind, int>>{
           {ModelKind::FCNN1, 3}, {ModelKind::CVNN1, 5}, {ModelKind::VIT1, 17},
           {ModelKind::FCNN1, kFullPrecision}}) {
    auto model = build_model({kind, n, 1.4f, MeanMode::Abs, 3, 55});
    save_model(*model, path);
    auto loaded = load_model(path);
    CHECK(loaded->inference_only);
    CHECK(loaded->config.kind == kind);
    CHECK(loaded->config.n_values == n);
    Tensor x = random_tensor({4, 32, 32, 3}, rng, 0.0f, 1.0f);
    Tensor a = model->forward(x, false, nullptr);
    Tensor b = loaded->forward(x, false, nullptr);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
  }
  fs::remove_all(dir);
}

TEST_CASE("packed payload is about one twelfth of 32-bit for five values") {
  const fs::path dir = fs::temp_directory_path() / "lowbit_pack_size";
  fs::create_directories(dir);
  const std::string path = (dir / "m.lbq").string();
  auto model = build_model({ModelKind::FCNN1, 5, 1.4f, MeanMode::Abs, 3, 5});
  save_model(*model, path);
  LbqFile file = read_lbq(path);
  int64_t payload = 0, weights = 0;
  for (const auto& r : file.records) {
    payload += int64_t(r.payload.size());
    weights += shape_numel(r.dims);
  }
  // each layer may pad its final byte
  const int64_t layers = int64_t(file.records.size());
  CHECK(payload >= weights * 4 / 12 - layers);
  CHECK(payload <= weights * 4 / 12 + layers);
  fs::remove_all(dir);
}

TEST_CASE("container detects corruption") {
  const fs::path dir = fs::temp_directory_path() / "lowbit_pack_corrupt";
  fs::create_directories(dir);
  const std::string path = (dir / "m.lbq").string();
  auto model = build_model({ModelKind::FCNN1, 5, 1.4f, MeanMode::Abs, 3, 5});
  save_model(*model, path);

  auto mutate = [&](size_t offset, uint8_t value, const std::string& out) {
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    bytes[offset] = char(value);
    std::ofstream o(out, std::ios::binary | std::ios::trunc);
    o.write(bytes.data(), std::streamsize(bytes.size()));
  };

  const std::string bad_magic = (dir / "bad_magic.lbq").string();
  mutate(0, 'X', bad_magic);
  CHECK_THROWS_WITH(load_model(bad_magic),
                    Catch::Matchers::ContainsSubstring("magic"));

  const std::string bad_version = (dir / "bad_version.lbq").string();
  mutate(4, 9, bad_version);
  CHECK_THROWS_WITH(load_model(bad_version),
                    Catch::Matchers::ContainsSubstring("version"));

  // truncation
  {
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    std::ofstream o((dir / "trunc.lbq").string(), std::ios::binary | std::ios::trunc);
    o.write(bytes.data(), std::streamsize(bytes.size() / 2));
  }
  CHECK_THROWS_WITH(load_model((dir / "trunc.lbq").string()),
                    Catch::Matchers::ContainsSubstring("truncated"));
  fs::remove_all(dir);
}

TEST_CASE("resaving a loaded model reproduces the container byte for byte") {
  const fs::path dir = fs::temp_directory_path() / "lowbit_pack_resave";
  fs::create_directories(dir);
  const std::string p1 = (dir / "a.lbq").string();
  const std::string p2 = (dir / "b.lbq").string();
  auto model = build_model({ModelKind::FCNN1, 3, 1.4f, MeanMode::Abs, 3, 8});
  save_model(*model, p1);
  auto loaded = load_model(p1);
  save_model(*loaded, p2);
  std::ifstream a(p1, std::ios::binary), b(p2, std::ios::binary);
  std::vector<char> ba((std::istreambuf_iterator<char>(a)),
                       std::istreambuf_iterator<char>());
  std::vector<char> bb((std::istreambuf_iterator<char>(b)),
                       std::istreambuf_iterator<char>());
  CHECK(ba == bb);
  fs::remove_all(dir);
}

TEST_CASE("full-precision containers store raw floats") {
  const fs::path dir = fs::temp_directory_path() / "lowbit_pack_full";
  fs::create_directories(dir);
  const std::string path = (dir / "m.lbq").string();
  auto model = build_model({ModelKind::FCNN1, kFullPrecision, 1.4f,
                            MeanMode::Abs, 3, 5});
  save_model(*model, path);
  LbqFile file = read_lbq(path);
  CHECK(file.n_values == kFullPrecision);
  for (const auto& r : file.records)
    CHECK(int64_t(r.payload.size()) == shape_numel(r.dims) * 4);
  fs::remove_all(dir);
}
