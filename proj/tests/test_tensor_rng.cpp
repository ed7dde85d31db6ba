#include <set>

#include "doctest.h"
#include "test_util.hpp"

TEST_CASE("tensor shape bookkeeping") {
  dk::Tensor<float> t({2, 3, 4});
  CHECK(t.rank() == 3);
  CHECK(t.numel() == 24);
  CHECK(t.data.size() == 24);
  for (float v : t.data) CHECK(v == 0.0f);

  CHECK_THROWS_AS(dk::Tensor<float>({2, 0, 4}), dk::ShapeError);
  CHECK_THROWS_AS(dk::Tensor<float>::from({2, 2}, {1.f, 2.f, 3.f}), dk::ShapeError);

  auto u = dk::Tensor<float>::from({2, 2}, {1.f, 2.f, 3.f, 4.f});
  CHECK(u.mat(2, 2)(1, 0) == 3.0f);  // row-major layout
  CHECK_THROWS_AS(u.mat(3, 2), dk::ShapeError);
}

TEST_CASE("finite checks") {
  auto t = dk::Tensor<double>::from({2}, {1.0, 2.0});
  CHECK_NOTHROW(dk::require_finite(t, "ok"));
  t[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK(!t.all_finite());
  CHECK_THROWS_AS(dk::require_finite(t, "bad"), dk::NumericError);
  t[1] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(dk::require_finite(t, "bad"), dk::NumericError);
}

TEST_CASE("seeded streams replay exactly") {
  dk::Mt64Stream a(42), b(42), c(43);
  bool all_equal = true, any_diff = false;
  for (int i = 0; i < 1000; ++i) {
    double va = a.uniform();
    double vb = b.uniform();
    double vc = c.uniform();
    all_equal = all_equal && va == vb;
    any_diff = any_diff || va != vc;
    CHECK(va >= 0.0);
    CHECK(va < 1.0);
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("derived seeds decorrelate") {
  std::set<std::uint64_t> seen;
  for (std::uint64_t base = 0; base < 50; ++base)
    for (std::uint64_t salt = 0; salt < 50; ++salt)
      seen.insert(dk::derive_seed(base, salt));
  CHECK(seen.size() == 2500);
  CHECK(dk::derive_seed(1, 2, 3) != dk::derive_seed(1, 3, 2));
}

TEST_CASE("normal draws have sane moments") {
  dk::Mt64Stream rng(7);
  const int n = 200000;
  double sum = 0, sq = 0;
  for (int i = 0; i < n; ++i) {
    double x = rng.normal();
    sum += x;
    sq += x * x;
  }
  double mean = sum / n;
  double var = sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.03);
}

TEST_CASE("scripted stream replays and exhausts") {
  dk::ScriptedStream s({0.1, 0.9});
  CHECK(s.uniform() == 0.1);
  CHECK(s.uniform() == 0.9);
  CHECK_THROWS_AS(s.uniform(), dk::Error);
}

TEST_CASE("content hash separates near-identical buffers") {
  std::vector<unsigned char> a(100, 0x55), b = a;
  b[57] ^= 1;
  CHECK(dk::hash128(a.data(), a.size()) == dk::hash128(a.data(), a.size()));
  CHECK(dk::hash128(a.data(), a.size()) != dk::hash128(b.data(), b.size()));
  CHECK(dk::hash128(a.data(), a.size()).hex().size() == 32);
}

TEST_CASE("parallel placement is thread-count independent") {
  std::vector<int> a(257), b(257);
  dk::parallel_for(257, [&](int i) { a[std::size_t(i)] = i * i; }, 1);
  dk::parallel_for(257, [&](int i) { b[std::size_t(i)] = i * i; }, 4);
  CHECK(a == b);
}
