#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "test_util.hpp"

using dk::ColVec;
using dk::LayerSpec;
using dk::SquareMat;
using dk::Tensor;

namespace {

dk::Network<float> tiny_head(std::uint64_t seed, float keep = 0.5f) {
  auto net = dk::Network<float>::make(
      {LayerSpec::dense(2, 3), LayerSpec::dropout(keep), LayerSpec::dense(3, 2)}, {2});
  dk::Mt64Stream rng(seed);
  net.init_params(rng);
  net.set_mode(dk::NetMode::eval);
  net.set_dropout_at_eval(true);
  return net;
}

}  // namespace

TEST_CASE("gaussian estimation on pinned samples") {
  SUBCASE("two scalar samples") {
    std::vector<ColVec<double>> s{ColVec<double>::Constant(1, 0.0),
                                  ColVec<double>::Constant(1, 2.0)};
    auto t = dk::estimate_gaussian(s);
    CHECK(t.mean(0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(t.cov(0, 0) == doctest::Approx(2.0).epsilon(1e-12));  // divisor N-1 = 1
    CHECK(t.sample_count == 2);
  }
  SUBCASE("identical samples collapse to the ridge") {
    std::vector<ColVec<double>> s(4, ColVec<double>::Constant(2, 3.0));
    auto t = dk::estimate_gaussian(s);
    CHECK(t.cov.cwiseAbs().maxCoeff() == 0.0);
    CHECK(t.epsilon == doctest::Approx(1e-6).epsilon(1e-12));
    for (int i = 0; i < 2; ++i)
      CHECK(t.chol(i, i) == doctest::Approx(std::sqrt(1e-6)).epsilon(1e-9));
    CHECK(t.chol(1, 0) == 0.0);
  }
  SUBCASE("too few samples") {
    std::vector<ColVec<double>> s(3, ColVec<double>::Zero(3));
    CHECK_THROWS_AS(dk::estimate_gaussian(s), dk::NumericError);
    s.clear();
    CHECK_THROWS_AS(dk::estimate_gaussian(s), dk::NumericError);
  }
}

TEST_CASE("gaussian estimation recovers a known covariance") {
  // x = mu + L z with z standard normal; the sample covariance must land
  // within 15% Frobenius relative error of L L^T at 1000 draws.
  SquareMat<double> L = SquareMat<double>::Zero(3, 3);
  L << 1.0, 0.0, 0.0, 0.4, 0.8, 0.0, -0.2, 0.3, 0.5;
  ColVec<double> mu(3);
  mu << 1.0, -2.0, 0.5;
  SquareMat<double> truth = L * L.transpose();

  dk::Mt64Stream rng(1001);
  std::vector<ColVec<double>> samples;
  for (int i = 0; i < 1000; ++i) {
    ColVec<double> z(3);
    for (int j = 0; j < 3; ++j) z[j] = rng.normal();
    samples.push_back(mu + L * z);
  }
  auto t = dk::estimate_gaussian(samples);
  CHECK((t.cov - truth).norm() / truth.norm() < 0.15);
  CHECK((t.mean - mu).norm() < 0.15);

  // the estimated mean scores a zero distance against its own target
  Tensor<double> mean_t({3});
  mean_t.vec() = t.mean;
  CHECK(dk::mahalanobis_loss(mean_t, t).loss < 1e-20);
}

TEST_CASE("gaussian estimation is permutation invariant") {
  dk::Mt64Stream rng(7);
  std::vector<ColVec<double>> samples;
  for (int i = 0; i < 50; ++i) {
    ColVec<double> s(4);
    for (int j = 0; j < 4; ++j) s[j] = rng.uniform(-3.0, 3.0);
    samples.push_back(s);
  }
  auto shuffled = samples;
  std::mt19937 gen(99);
  std::shuffle(shuffled.begin(), shuffled.end(), gen);

  auto a = dk::estimate_gaussian(samples);
  auto b = dk::estimate_gaussian(shuffled);
  CHECK((a.mean - b.mean).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((a.cov - b.cov).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("ridge escalation repairs a slightly indefinite matrix") {
  SquareMat<double> sym = SquareMat<double>::Zero(2, 2);
  sym(1, 1) = -2e-6;  // first ridge 1e-6 still leaves a negative pivot
  auto rc = dk::regularized_cholesky(sym);
  CHECK(rc.epsilon == doctest::Approx(1e-5).epsilon(1e-12));
  for (int i = 0; i < 2; ++i) CHECK(rc.lower(i, i) > 0.0);

  SquareMat<double> hopeless = SquareMat<double>::Zero(2, 2);
  hopeless(0, 0) = -1.0;
  hopeless(1, 1) = -1.0;
  CHECK_THROWS_AS(dk::regularized_cholesky(hopeless), dk::NumericError);
}

TEST_CASE("stochastic sampling preconditions") {
  auto net = tiny_head(3);
  Tensor<float> x = Tensor<float>::from({2}, {0.5f, -0.25f});
  dk::Mt64Stream rng(11);

  CHECK_THROWS_AS(dk::mc_sample(net, x, 1, dk::TapKind::logits, rng), dk::NumericError);

  auto plain = dk::Network<float>::make({LayerSpec::dense(2, 2)}, {2});
  plain.set_mode(dk::NetMode::eval);
  plain.set_dropout_at_eval(true);
  CHECK_THROWS_AS(dk::mc_sample(plain, x, 4, dk::TapKind::logits, rng), dk::ConfigError);

  auto wrong_mode = tiny_head(3);
  wrong_mode.set_dropout_at_eval(false);
  CHECK_THROWS_AS(dk::mc_sample(wrong_mode, x, 4, dk::TapKind::logits, rng), dk::Error);
}

TEST_CASE("degenerate dropout yields identical samples and a ridge-only target") {
  auto net = tiny_head(5, 1.0f);  // keep = 1: dropout never fires
  Tensor<float> x = Tensor<float>::from({2}, {0.3f, 0.9f});
  dk::Mt64Stream rng(13);
  auto samples = dk::mc_sample(net, x, 8, dk::TapKind::logits, rng);
  auto det = net.infer(x);
  REQUIRE(samples.size() == 8);
  for (const auto& s : samples) {
    CHECK(s[0] == det[0]);
    CHECK(s[1] == det[1]);
  }

  auto t = dk::estimate_gaussian(samples);
  CHECK(t.cov.cwiseAbs().maxCoeff() < 1e-10);
  // with zero spread the distance degenerates to (1/eps)·squared distance
  Tensor<float> y = Tensor<float>::from({2}, {det[0] + 0.5f, det[1] - 0.25f});
  auto maha = dk::mahalanobis_loss(y, t);
  double expect = (0.25 + 0.0625) / double(t.epsilon);
  CHECK(std::abs(maha.loss - expect) / expect < 1e-6);
}

TEST_CASE("sample mean and covariance match exhaustive mask enumeration") {
  auto net = tiny_head(21);
  Tensor<float> x = Tensor<float>::from({2}, {0.7f, -0.4f});

  // exact distribution over all 2^3 equiprobable masks, in double
  Eigen::Matrix<double, 3, 2> W1;
  Eigen::Matrix<double, 2, 3> W2;
  Eigen::Vector3d b1;
  Eigen::Vector2d b2;
  W1 = net.params(0)[0].mat(3, 2).cast<double>();
  b1 = net.params(0)[1].vec().cast<double>();
  W2 = net.params(2)[0].mat(2, 3).cast<double>();
  b2 = net.params(2)[1].vec().cast<double>();
  Eigen::Vector3d h = W1 * x.vec().cast<double>() + b1;

  Eigen::Vector2d exact_mean = Eigen::Vector2d::Zero();
  Eigen::Matrix2d exact_cov = Eigen::Matrix2d::Zero();
  std::vector<Eigen::Vector2d> outs;
  for (int mask = 0; mask < 8; ++mask) {
    Eigen::Vector3d hm = Eigen::Vector3d::Zero();
    for (int bit = 0; bit < 3; ++bit)
      if (mask & (1 << bit)) hm[bit] = h[bit] / 0.5;
    outs.push_back(W2 * hm + b2);
    exact_mean += outs.back() / 8.0;
  }
  for (const auto& o : outs) {
    Eigen::Vector2d r = o - exact_mean;
    exact_cov += r * r.transpose() / 8.0;
  }

  const int n = 100000;
  dk::Mt64Stream rng(31);
  auto t = dk::mc_estimate(net, x, n, dk::TapKind::logits, rng);
  CHECK(t.sample_count == n);
  for (int i = 0; i < 2; ++i) CHECK(std::abs(double(t.mean(i)) - exact_mean[i]) < 1e-2);
  double frob = (t.cov.cast<double>() - exact_cov).norm() / exact_cov.norm();
  CHECK(frob < 0.05);
}

TEST_CASE("a tap in the deterministic region sees one value") {
  auto net = tiny_head(33);
  Tensor<float> x = Tensor<float>::from({2}, {0.2f, 0.1f});
  dk::Mt64Stream rng(17);
  // guidance layer (first dense) sits below the dropout split here
  auto samples = dk::mc_sample(net, x, 5, dk::TapKind::hint, rng);
  Tensor<float> tapped;
  net.forward_range(x, 0, 1, nullptr, 0, &tapped);  // prefix only: no dropout yet
  for (const auto& s : samples)
    for (int i = 0; i < 3; ++i) CHECK(s[i] == tapped[i]);
}

TEST_CASE("prefix cache: at-most-once compute, content addressing, LRU") {
  auto net = tiny_head(41);
  dk::RgbPatch patch;
  patch.rows = 2;
  patch.cols = 2;
  patch.pixels = {10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120};
  auto key_a = dk::patch_hash(patch);
  auto patch_b = patch;
  patch_b.pixels[5] ^= 1;  // one-pixel difference: distinct identity
  auto key_b = dk::patch_hash(patch_b);
  REQUIRE(key_a != key_b);

  Tensor<float> x = Tensor<float>::from({2}, {0.6f, -0.1f});
  dk::TeacherCache cache;
  dk::Mt64Stream rng(19);
  dk::mc_sample(net, x, 4, dk::TapKind::logits, rng, &cache, &key_a);
  CHECK(cache.computed() == 1);
  dk::mc_sample(net, x, 4, dk::TapKind::logits, rng, &cache, &key_a);
  CHECK(cache.computed() == 1);
  CHECK(cache.hits() == 1);
  dk::mc_sample(net, x, 4, dk::TapKind::logits, rng, &cache, &key_b);
  CHECK(cache.computed() == 2);
  CHECK(cache.size() == 2);

  dk::TeacherCache small(1);
  dk::mc_sample(net, x, 4, dk::TapKind::logits, rng, &small, &key_a);
  dk::mc_sample(net, x, 4, dk::TapKind::logits, rng, &small, &key_b);  // evicts a
  dk::mc_sample(net, x, 4, dk::TapKind::logits, rng, &small, &key_a);  // recompute
  CHECK(small.computed() == 3);
  CHECK(small.size() == 1);
}

TEST_CASE("cached and uncached sampling agree bitwise under one head seed") {
  auto net = tiny_head(43);
  Tensor<float> x = Tensor<float>::from({2}, {-0.8f, 0.35f});
  dk::Hash128 key = dk::hash128("patch", 5);
  dk::TeacherCache cache;

  dk::Mt64Stream warm(3);  // populate the cache first
  dk::mc_sample(net, x, 3, dk::TapKind::logits, warm, &cache, &key);

  dk::Mt64Stream r1(777), r2(777);
  auto with_cache = dk::mc_sample(net, x, 6, dk::TapKind::logits, r1, &cache, &key);
  auto without = dk::mc_sample(net, x, 6, dk::TapKind::logits, r2);
  REQUIRE(with_cache.size() == without.size());
  for (std::size_t i = 0; i < with_cache.size(); ++i)
    for (int j = 0; j < 2; ++j) CHECK(with_cache[i][j] == without[i][j]);
}

TEST_CASE("deterministic teacher signals expose logits and the guidance tap") {
  auto net = dk::Network<float>::make(
      {LayerSpec::dense(3, 5), LayerSpec::relu(), LayerSpec::dropout(0.5f),
       LayerSpec::dense(5, 4), LayerSpec::relu(), LayerSpec::dense(4, 2)},
      {3});
  dk::Mt64Stream rng(51);
  net.init_params(rng);
  net.set_mode(dk::NetMode::eval);

  Tensor<float> x = Tensor<float>::from({3}, {0.1f, -0.6f, 0.4f});
  dk::TeacherCache cache;
  dk::Hash128 key = dk::hash128("sig", 3);
  auto sig = dk::teacher_signals(net, x, true, &cache, &key);
  auto sig_plain = dk::teacher_signals(net, x, true);

  auto logits = net.infer(x);
  Tensor<float> hint;
  net.forward_range(x, 0, net.layer_count(), nullptr, 3, &hint);  // pre-relu dense
  for (int i = 0; i < 2; ++i) {
    CHECK(sig.logits[i] == logits[i]);
    CHECK(sig_plain.logits[i] == logits[i]);
  }
  REQUIRE(sig.hint.numel() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(sig.hint[i] == hint[i]);
    CHECK(sig_plain.hint[i] == hint[i]);
  }

  auto active = tiny_head(52);  // dropout-at-eval enabled: signals must refuse
  CHECK_THROWS_AS(dk::teacher_signals(active, Tensor<float>::from({2}, {0.f, 0.f}), false),
                  dk::Error);
}

TEST_CASE("target store round-trips bitwise with canonical ordering") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / ("dkgt_test_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  auto file = [&](const char* n) { return (dir / n).string(); };

  dk::Mt64Stream rng(61);
  auto make_target = [&rng](int d, int n) {
    std::vector<ColVec<float>> samples;
    for (int i = 0; i < n; ++i) {
      ColVec<float> s(d);
      for (int j = 0; j < d; ++j) s[j] = float(rng.normal());
      samples.push_back(s);
    }
    return dk::estimate_gaussian(samples);
  };

  dk::TargetStore store;
  store.targets.emplace(dk::hash128("a", 1), make_target(3, 16));
  store.targets.emplace(dk::hash128("b", 1), make_target(2, 8));
  store.targets.emplace(dk::hash128("c", 1), make_target(4, 32));

  dk::save_targets(store, file("t.dkgt"), "config_hash=deadbeef");
  auto loaded = dk::load_targets(file("t.dkgt"));
  CHECK(loaded.provenance == "config_hash=deadbeef");
  CHECK(loaded.store.targets.size() == 3);
  for (const auto& kv : store.targets) {
    const auto* got = loaded.store.targets.count(kv.first) ? &loaded.store.targets.at(kv.first)
                                                           : nullptr;
    REQUIRE(got != nullptr);
    CHECK(got->sample_count == kv.second.sample_count);
    CHECK(got->epsilon == kv.second.epsilon);
    CHECK((got->mean - kv.second.mean).cwiseAbs().maxCoeff() == 0.0f);
    for (int i = 0; i < got->dim(); ++i)
      for (int j = 0; j <= i; ++j) CHECK(got->chol(i, j) == kv.second.chol(i, j));
  }

  // identical content saved again (post round-trip) gives identical bytes:
  // records are sorted by hash, not by map iteration order
  dk::save_targets(loaded.store, file("t2.dkgt"), "config_hash=deadbeef");
  std::ifstream f1(file("t.dkgt"), std::ios::binary), f2(file("t2.dkgt"), std::ios::binary);
  std::vector<char> b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::vector<char> b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);

  // structural validation on the way in
  {
    std::ofstream bad(file("bad.dkgt"), std::ios::binary);
    bad.write("XKGT", 4);
  }
  CHECK_THROWS_AS(dk::load_targets(file("bad.dkgt")), dk::FormatError);
  {
    std::vector<char> cut(b1.begin(), b1.begin() + std::ptrdiff_t(b1.size() / 2));
    std::ofstream h(file("half.dkgt"), std::ios::binary);
    h.write(cut.data(), std::streamsize(cut.size()));
  }
  CHECK_THROWS_AS(dk::load_targets(file("half.dkgt")), dk::FormatError);
  {
    std::vector<char> tail = b1;
    tail.push_back('x');
    std::ofstream t(file("tail.dkgt"), std::ios::binary);
    t.write(tail.data(), std::streamsize(tail.size()));
  }
  CHECK_THROWS_AS(dk::load_targets(file("tail.dkgt")), dk::FormatError);

  fs::remove_all(dir);
}
