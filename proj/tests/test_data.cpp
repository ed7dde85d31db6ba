#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <unordered_set>

#include "doctest.h"
#include "test_util.hpp"

using dk::Dataset;
using dk::LabeledPatch;
using dk::RgbPatch;
using dk::Split;
using dk::Tensor;

namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const char* tag) {
    path = fs::temp_directory_path() / (std::string(tag) + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("toy generation is deterministic and correctly bookkept") {
  auto a = dk::generate_toy(100, 300, 32, 0.1, 7, Split::train);
  auto b = dk::generate_toy(100, 300, 32, 0.1, 7, Split::train);
  REQUIRE(a.patches.size() == 400);
  REQUIRE(b.patches.size() == 400);
  CHECK(a.num_images == 40);

  int positives = 0;
  for (std::size_t i = 0; i < a.patches.size(); ++i) {
    const auto& pa = a.patches[i];
    const auto& pb = b.patches[i];
    CHECK(pa.label == pb.label);
    CHECK(pa.rgb.pixels == pb.rgb.pixels);
    CHECK(pa.patch_id == int(i));
    CHECK(pa.image_id == int(i) / 10);
    positives += pa.label;
  }
  CHECK(positives == 100);

  auto c = dk::generate_toy(100, 300, 32, 0.1, 8, Split::train);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.patches.size() && !any_diff; ++i)
    any_diff = a.patches[i].rgb.pixels != c.patches[i].rgb.pixels;
  CHECK(any_diff);

  CHECK_THROWS_AS(dk::generate_toy(0, 10, 32, 0.1, 1), dk::ConfigError);
  CHECK_THROWS_AS(dk::generate_toy(10, 10, 30, 0.1, 1), dk::ConfigError);  // 30 % 4 != 0
  CHECK_THROWS_AS(dk::generate_toy(10, 10, 4, 0.1, 1), dk::ConfigError);   // below minimum
  CHECK_THROWS_AS(dk::generate_toy(10, 10, 32, -0.1, 1), dk::ConfigError);
}

TEST_CASE("noise-free positives keep strong silhouette contrast") {
  auto ds = dk::generate_toy(40, 1, 24, 0.0, 11);
  int checked = 0;
  for (const auto& p : ds.patches) {
    if (p.label != 1) continue;
    ++checked;
    std::uint8_t lo = 255, hi = 0;
    for (std::uint8_t v : p.rgb.pixels) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    CHECK(double(hi - lo) / 255.0 >= 0.3);
  }
  CHECK(checked == 40);
}

TEST_CASE("splits generated from distinct seeds share no patch content") {
  auto train = dk::generate_toy(50, 150, 24, 0.15, 101, Split::train);
  auto val = dk::generate_toy(20, 60, 24, 0.15, 102, Split::val);
  auto test = dk::generate_toy(20, 60, 24, 0.15, 103, Split::test);
  std::set<std::string> seen;
  for (const auto* ds : {&train, &val, &test})
    for (const auto& p : ds->patches) CHECK(seen.insert(dk::patch_hash(p.rgb).hex()).second);
}

TEST_CASE("batch sampling honors the class ratio without reuse") {
  auto ds = dk::generate_toy(12, 36, 8, 0.1, 21);
  dk::Mt64Stream rng(5);
  dk::BatchSampler sampler(ds, 16, 1, 3, rng);
  CHECK(sampler.positives_per_batch() == 4);
  CHECK(sampler.negatives_per_batch() == 12);

  std::unordered_set<int> seen_pos, seen_neg;
  int batches = 0;
  for (auto batch = sampler.next(); !batch.empty(); batch = sampler.next()) {
    ++batches;
    REQUIRE(batch.size() == 16);
    for (int k = 0; k < 16; ++k) {
      const auto& p = ds.patches[std::size_t(batch[std::size_t(k)])];
      CHECK(p.label == (k < 4 ? 1 : 0));
      auto& seen = p.label == 1 ? seen_pos : seen_neg;
      CHECK(seen.insert(batch[std::size_t(k)]).second);  // no index repeats in an epoch
    }
  }
  CHECK(batches == 3);  // 12 positives / 4 per batch
  CHECK(seen_pos.size() == 12);
  CHECK(seen_neg.size() == 36);
  CHECK(sampler.next().empty());  // stays exhausted

  dk::Mt64Stream rng2(5);
  dk::BatchSampler pairs(ds, 2, 1, 1, rng2);
  CHECK(pairs.positives_per_batch() == 1);
  CHECK(pairs.negatives_per_batch() == 1);

  dk::Mt64Stream rng3(5);
  CHECK_THROWS_AS(dk::BatchSampler(ds, 10, 1, 2, rng3), dk::ConfigError);
}

TEST_CASE("flip augmentation consumes one draw and preserves identity fields") {
  auto ds = dk::generate_toy(2, 2, 16, 0.15, 31);
  const auto& p = ds.patches[0];

  dk::ScriptedStream always({0.0});  // u < flip_prob: mirrored
  auto flipped = dk::augment_flip(p, always, 0.5);
  CHECK(flipped.image_id == p.image_id);
  CHECK(flipped.patch_id == p.patch_id);
  CHECK(flipped.label == p.label);
  CHECK(flipped.rgb.pixels == dk::flip_horizontal(p.rgb).pixels);
  CHECK_FALSE(flipped.acf.has_value());

  dk::ScriptedStream never({0.99});  // u >= flip_prob: untouched copy
  auto same = dk::augment_flip(p, never, 0.5);
  CHECK(same.rgb.pixels == p.rgb.pixels);
  CHECK_THROWS_AS(dk::augment_flip(p, never, 0.5), dk::Error);  // stream exhausted: one draw each

  dk::Mt64Stream rng(4);
  auto twice = dk::augment_flip(dk::augment_flip(p, rng, 1.0), rng, 1.0);
  CHECK(twice.rgb.pixels == p.rgb.pixels);

  // cached channels never leak through a pixel change
  LabeledPatch with_cache = p;
  with_cache.acf = dk::extract_acf(p.rgb);
  dk::Mt64Stream rng2(9);
  auto flipped2 = dk::augment_flip(with_cache, rng2, 1.0);
  CHECK_FALSE(flipped2.acf.has_value());

  CHECK_THROWS_AS(dk::augment_flip(p, rng2, 1.5), dk::ConfigError);
}

TEST_CASE("channel extraction of a mirrored patch matches the equivariant transform") {
  auto ds = dk::generate_toy(3, 3, 16, 0.15, 41);
  for (const auto& p : ds.patches) {
    auto direct = dk::extract_acf(dk::flip_horizontal(p.rgb));
    auto mapped = dk::acf_flip(dk::extract_acf(p.rgb));
    for (int k = 0; k < dk::kAcfPlanes; ++k)
      CHECK((direct.planes[std::size_t(k)] - mapped.planes[std::size_t(k)]).abs().maxCoeff() <
            1e-5f);
  }
}

TEST_CASE("nearest-neighbor warp follows the index formula") {
  dk::Mt64Stream rng(51);
  RgbPatch src(48, 48);
  for (auto& v : src.pixels) v = std::uint8_t(rng.below(256));
  auto out = dk::warp_nearest(src, 32, 32);
  REQUIRE(out.rows == 32);
  REQUIRE(out.cols == 32);
  for (int i = 0; i < 32; ++i)
    for (int j = 0; j < 32; ++j)
      for (int c = 0; c < 3; ++c) CHECK(out.at(i, j, c) == src.at(i * 48 / 32, j * 48 / 32, c));
}

TEST_CASE("input encodings") {
  SUBCASE("rgb bytes map onto [-1, 1] channel-major") {
    RgbPatch p(4, 4);
    p.at(0, 0, 0) = 0;
    p.at(0, 0, 1) = 255;
    p.at(0, 0, 2) = 128;
    p.at(2, 3, 0) = 51;  // 20% gray: (0.2 - 0.5) / 0.5
    auto t = dk::encode_rgb_input(p);
    REQUIRE(t.shape == std::vector<int>{3, 4, 4});
    CHECK(t[0] == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK(t[16] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(t[32] == doctest::Approx(128.0 / 255.0 * 2 - 1).epsilon(1e-6));
    CHECK(t[2 * 4 + 3] == doctest::Approx(-0.6).epsilon(1e-6));
  }
  SUBCASE("channel features are scale-normalized per plane family") {
    auto ds = dk::generate_toy(1, 1, 16, 0.1, 61);
    auto acf = dk::extract_acf(ds.patches[0].rgb);
    auto t = dk::encode_acf_input(acf);
    REQUIRE(t.shape == std::vector<int>{10, 4, 4});
    CHECK(t[0] == acf.planes[0](0, 0) / 16.0f);
    long plane = 16;
    CHECK(t[3 * plane + 5] ==
          acf.planes[3](1, 1) / (16.0f * 100.0f * 1.41421356f));
    // color block sums can reach 16; inputs stay within unit scale
    for (long i = 0; i < t.numel(); ++i) CHECK(std::abs(t[i]) <= 1.0f);
  }
  SUBCASE("lazy channel cache fills on first use") {
    auto ds = dk::generate_toy(1, 1, 16, 0.1, 62);
    auto& p = ds.patches[0];
    CHECK_FALSE(p.acf.has_value());
    auto t1 = dk::encode_input(p, dk::InputKind::acf);
    CHECK(p.acf.has_value());
    auto t2 = dk::encode_input(p, dk::InputKind::acf);
    CHECK(t1.data == t2.data);
    auto r = dk::encode_input(p, dk::InputKind::rgb);
    CHECK(r.shape == std::vector<int>{3, 16, 16});
  }
}

TEST_CASE("dataset save and manifest load round-trip") {
  TempDir tmp("dkdata_roundtrip");
  auto train = dk::generate_toy(3, 5, 16, 0.1, 71, Split::train);
  auto val = dk::generate_toy(2, 2, 16, 0.1, 72, Split::val);
  dk::save_dataset({&train, &val}, tmp.path.string(), "cafef00d");

  std::ifstream mf(tmp.file("manifest.txt"));
  std::string first;
  std::getline(mf, first);
  CHECK(first == "# config_hash=cafef00d");

  auto loaded = dk::load_manifest(tmp.file("manifest.txt"), 16);
  CHECK(loaded.warnings.empty());
  REQUIRE(loaded.splits.at(Split::train).patches.size() == 8);
  REQUIRE(loaded.splits.at(Split::val).patches.size() == 4);
  CHECK(loaded.splits.at(Split::test).patches.empty());
  for (std::size_t i = 0; i < 8; ++i) {
    const auto& orig = train.patches[i];
    const auto& got = loaded.splits.at(Split::train).patches[i];
    CHECK(got.label == orig.label);
    CHECK(got.image_id == orig.image_id);
    CHECK(got.patch_id == orig.patch_id);
    CHECK(got.rgb.pixels == orig.rgb.pixels);
  }
  CHECK(loaded.splits.at(Split::train).num_images == train.num_images);
}

TEST_CASE("manifest loader: warping, warnings, and malformed lines") {
  TempDir tmp("dkdata_manifest");
  fs::create_directories(tmp.path / "ppm");

  SUBCASE("empty manifest warns instead of failing") {
    std::ofstream(tmp.file("manifest.txt")) << "# config_hash=00\n";
    auto loaded = dk::load_manifest(tmp.file("manifest.txt"), 16);
    REQUIRE(loaded.warnings.size() == 1);
    CHECK(loaded.warnings[0].find("no patches") != std::string::npos);
  }
  SUBCASE("oversized images are warped down to the patch size") {
    dk::Mt64Stream rng(81);
    RgbPatch big(48, 48);
    for (auto& v : big.pixels) v = std::uint8_t(rng.below(256));
    dk::write_ppm(tmp.file("ppm/big.ppm"), big);
    std::ofstream(tmp.file("manifest.txt")) << "train 0 1 ppm/big.ppm\n";
    auto loaded = dk::load_manifest(tmp.file("manifest.txt"), 32);
    REQUIRE(loaded.splits.at(Split::train).patches.size() == 1);
    const auto& got = loaded.splits.at(Split::train).patches[0].rgb;
    auto want = dk::warp_nearest(big, 32, 32);
    CHECK(got.pixels == want.pixels);
  }
  auto expect_line_error = [&](const std::string& body, const char* needle, int line_no) {
    std::ofstream(tmp.file("manifest.txt")) << body;
    try {
      dk::load_manifest(tmp.file("manifest.txt"), 16);
      FAIL_CHECK("expected a format error for: ", body);
    } catch (const dk::FormatError& e) {
      std::string msg = e.what();
      CHECK(msg.find("line " + std::to_string(line_no)) != std::string::npos);
      CHECK(msg.find(needle) != std::string::npos);
    }
  };
  SUBCASE("missing fields") { expect_line_error("# ok\ntrain 0 1\n", "malformed", 2); }
  SUBCASE("trailing fields") {
    expect_line_error("train 0 1 ppm/x.ppm extra\n", "trailing", 1);
  }
  SUBCASE("bad label") { expect_line_error("train 0 2 ppm/x.ppm\n", "label", 1); }
  SUBCASE("unknown split") { expect_line_error("dev 0 1 ppm/x.ppm\n", "split", 1); }
  SUBCASE("negative image id") { expect_line_error("train -3 1 ppm/x.ppm\n", "image id", 1); }
  SUBCASE("missing image file") {
    expect_line_error("train 0 1 ppm/absent.ppm\n", "absent.ppm", 1);
  }
}
