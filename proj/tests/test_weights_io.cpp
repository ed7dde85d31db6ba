#include <unistd.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "test_util.hpp"

using dk::LayerSpec;
using dk::Tensor;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("dkwt_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

dk::Network<float> sample_net(std::uint64_t seed) {
  auto net = dk::Network<float>::make(
      {LayerSpec::conv2d(3, 4, 3, 2, 1), LayerSpec::relu(), LayerSpec::maxpool(2, 2),
       LayerSpec::conv2d(4, 6, 3, 1, 1), LayerSpec::relu(), LayerSpec::avgpool_global(),
       LayerSpec::dropout(0.5f), LayerSpec::dense(6, 8), LayerSpec::relu(),
       LayerSpec::dense(8, 2)},
      {3, 16, 16});
  dk::Mt64Stream rng(seed);
  net.init_params(rng);
  return net;
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  return std::vector<char>(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream os(path, std::ios::binary);
  os.write(bytes.data(), std::streamsize(bytes.size()));
}

}  // namespace

TEST_CASE("weights round-trip preserves architecture and exact forward values") {
  TempDir tmp;
  auto net = sample_net(17);
  net.set_mode(dk::NetMode::eval);
  dk::save_weights(net, tmp.file("a.dkwt"));
  auto loaded = dk::load_weights(tmp.file("a.dkwt"), {3, 16, 16});
  CHECK(loaded.provenance.empty());
  CHECK(loaded.net.layer_count() == net.layer_count());
  CHECK(loaded.net.param_total() == net.param_total());

  Tensor<float> x({3, 16, 16});
  dk::Mt64Stream rng(18);
  for (auto& v : x.data) v = float(rng.uniform(-1, 1));
  loaded.net.set_mode(dk::NetMode::eval);
  auto a = net.infer(x);
  auto b = loaded.net.infer(x);
  REQUIRE(a.shape == b.shape);
  CHECK(std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0);
}

TEST_CASE("save is byte-stable for identical networks") {
  TempDir tmp;
  dk::save_weights(sample_net(4), tmp.file("a.dkwt"), "run=1");
  dk::save_weights(sample_net(4), tmp.file("b.dkwt"), "run=1");
  CHECK(slurp(tmp.file("a.dkwt")) == slurp(tmp.file("b.dkwt")));
}

TEST_CASE("provenance trailer survives the round trip") {
  TempDir tmp;
  std::string tag = "config_hash=0123456789abcdef0123456789abcdef";
  dk::save_weights(sample_net(5), tmp.file("p.dkwt"), tag);
  auto loaded = dk::load_weights(tmp.file("p.dkwt"), {3, 16, 16});
  CHECK(loaded.provenance == tag);
}

TEST_CASE("corrupt or mismatched files are rejected with clear errors") {
  TempDir tmp;
  auto net = sample_net(6);
  dk::save_weights(net, tmp.file("good.dkwt"));
  auto bytes = slurp(tmp.file("good.dkwt"));

  SUBCASE("missing file") {
    CHECK_THROWS_AS(dk::load_weights(tmp.file("absent.dkwt"), {3, 16, 16}), dk::Error);
  }
  SUBCASE("bad magic") {
    auto bad = bytes;
    bad[0] = 'X';
    spit(tmp.file("bad.dkwt"), bad);
    CHECK_THROWS_AS(dk::load_weights(tmp.file("bad.dkwt"), {3, 16, 16}), dk::FormatError);
  }
  SUBCASE("unsupported version") {
    auto bad = bytes;
    bad[4] = 9;  // version u16 LE follows the 4-byte magic
    spit(tmp.file("ver.dkwt"), bad);
    CHECK_THROWS_AS(dk::load_weights(tmp.file("ver.dkwt"), {3, 16, 16}), dk::FormatError);
  }
  SUBCASE("truncated tensor payload") {
    auto bad = bytes;
    bad.resize(bad.size() / 2);
    spit(tmp.file("trunc.dkwt"), bad);
    try {
      dk::load_weights(tmp.file("trunc.dkwt"), {3, 16, 16});
      FAIL("expected a format error");
    } catch (const dk::FormatError& e) {
      CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    }
  }
  SUBCASE("trailing garbage after the last record") {
    auto bad = bytes;
    bad.push_back('\0');
    spit(tmp.file("tail.dkwt"), bad);
    CHECK_THROWS_AS(dk::load_weights(tmp.file("tail.dkwt"), {3, 16, 16}), dk::FormatError);
  }
  SUBCASE("input shape that contradicts the stored stack") {
    CHECK_THROWS_AS(dk::load_weights(tmp.file("good.dkwt"), {4, 16, 16}), dk::Error);
  }
  SUBCASE("non-finite stored values") {
    auto poisoned = sample_net(6);
    poisoned.params_mut(0)[0][0] = std::numeric_limits<float>::quiet_NaN();
    // save_weights itself must refuse to write garbage
    CHECK_THROWS_AS(dk::save_weights(poisoned, tmp.file("nan.dkwt")), dk::NumericError);
  }
  SUBCASE("non-finite bytes on disk") {
    // First tensor float sits at a fixed offset: 8-byte header, conv tag +
    // five u32 hyperparameters (21), tensor count (4), rank + two extents (9).
    auto bad = bytes;
    const std::size_t off = 8 + 21 + 4 + 9;
    const unsigned char nan_le[4] = {0x00, 0x00, 0xC0, 0x7F};
    std::memcpy(bad.data() + off, nan_le, 4);
    spit(tmp.file("nanbytes.dkwt"), bad);
    CHECK_THROWS_AS(dk::load_weights(tmp.file("nanbytes.dkwt"), {3, 16, 16}), dk::Error);
  }
}
