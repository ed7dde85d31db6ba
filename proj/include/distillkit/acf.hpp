#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "distillkit/binio.hpp"
#include "distillkit/ppm.hpp"

namespace dk {

using PlaneF = Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Channel layout: 0..2 scaled L*u*v*, 3 gradient magnitude, 4..9 unsigned
// orientation bins, all block-summed 4x4.
inline constexpr int kAcfPlanes = 10;
inline constexpr int kAcfShrink = 4;
inline constexpr int kOrientationBins = 6;

namespace luv {

// sRGB -> XYZ (D65) row-major coefficients and CIELUV constants.
inline constexpr double kXyz[9] = {0.4124564, 0.3575761, 0.1804375,
                                   0.2126729, 0.7151522, 0.0721750,
                                   0.0193339, 0.1191920, 0.9503041};
inline constexpr double kEps = 216.0 / 24389.0;
inline constexpr double kKappa = 24389.0 / 27.0;
inline constexpr double kUn = 0.1978398;  // 4 Xn / (Xn + 15 + 3 Zn)
inline constexpr double kVn = 0.4683363;  // 9 / (Xn + 15 + 3 Zn)

// Fixed scaling bounds mapping L*, u*, v* into [0,1].
inline constexpr float kLMax = 100.0f;
inline constexpr float kUMin = -134.0f, kUMax = 220.0f;
inline constexpr float kVMin = -140.0f, kVMax = 122.0f;

/// Gamma linearization of one sRGB byte, tabulated.
inline float linearize(std::uint8_t byte) {
  static const std::array<float, 256> table = [] {
    std::array<float, 256> t{};
    for (int i = 0; i < 256; ++i) {
      double c = i / 255.0;
      t[std::size_t(i)] =
          float(c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4));
    }
    return t;
  }();
  return table[byte];
}

}  // namespace luv

struct LuvPlanes {
  PlaneF l_scaled, u_scaled, v_scaled;
  PlaneF l_star;  // unscaled L* in [0,100]; gradients are taken on this
};

inline LuvPlanes rgb_to_luv_full(const RgbPatch& p) {
  LuvPlanes out;
  out.l_scaled.resize(p.rows, p.cols);
  out.u_scaled.resize(p.rows, p.cols);
  out.v_scaled.resize(p.rows, p.cols);
  out.l_star.resize(p.rows, p.cols);
  for (int i = 0; i < p.rows; ++i) {
    for (int j = 0; j < p.cols; ++j) {
      float r = luv::linearize(p.at(i, j, 0));
      float g = luv::linearize(p.at(i, j, 1));
      float b = luv::linearize(p.at(i, j, 2));
      float X = float(luv::kXyz[0]) * r + float(luv::kXyz[1]) * g + float(luv::kXyz[2]) * b;
      float Y = float(luv::kXyz[3]) * r + float(luv::kXyz[4]) * g + float(luv::kXyz[5]) * b;
      float Z = float(luv::kXyz[6]) * r + float(luv::kXyz[7]) * g + float(luv::kXyz[8]) * b;
      float L = Y > float(luv::kEps) ? 116.0f * std::cbrt(Y) - 16.0f : float(luv::kKappa) * Y;
      float den = X + 15.0f * Y + 3.0f * Z;
      float u_star = 0.0f, v_star = 0.0f;
      if (den > 0.0f) {
        float inv = 1.0f / den;
        u_star = 13.0f * L * (4.0f * X * inv - float(luv::kUn));
        v_star = 13.0f * L * (9.0f * Y * inv - float(luv::kVn));
      }
      out.l_star(i, j) = L;
      auto clamp01 = [](float v) { return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v); };
      out.l_scaled(i, j) = clamp01(L / luv::kLMax);
      out.u_scaled(i, j) = clamp01((u_star - luv::kUMin) / (luv::kUMax - luv::kUMin));
      out.v_scaled(i, j) = clamp01((v_star - luv::kVMin) / (luv::kVMax - luv::kVMin));
    }
  }
  return out;
}

inline std::array<PlaneF, 3> rgb_to_luv(const RgbPatch& p) {
  LuvPlanes full = rgb_to_luv_full(p);
  return {std::move(full.l_scaled), std::move(full.u_scaled), std::move(full.v_scaled)};
}

struct GradientChannels {
  PlaneF magnitude;
  std::array<PlaneF, kOrientationBins> bins;  // hard-assigned magnitude per bin
};

/// Centered [-1,0,1] differences with replicated borders (no 1/2 factor).
/// Orientation theta = atan2(gy, gx) folded into [0, pi); bin k covers
/// [k pi/6, (k+1) pi/6) and theta == pi folds to bin 0.
inline GradientChannels gradient_channels(const PlaneF& lum) {
  const int h = int(lum.rows()), w = int(lum.cols());
  if (h < 1 || w < 1) throw ShapeError("gradient input is empty");
  GradientChannels out;
  out.magnitude.setZero(h, w);
  for (auto& b : out.bins) b.setZero(h, w);
  const float pi = 3.14159265358979323846f;
  const float inv_bin = float(kOrientationBins) / pi;
  for (int i = 0; i < h; ++i) {
    int up = i > 0 ? i - 1 : 0;
    int down = i < h - 1 ? i + 1 : h - 1;
    for (int j = 0; j < w; ++j) {
      int left = j > 0 ? j - 1 : 0;
      int right = j < w - 1 ? j + 1 : w - 1;
      float gx = lum(i, right) - lum(i, left);
      float gy = lum(down, j) - lum(up, j);
      float mag = std::sqrt(gx * gx + gy * gy);
      out.magnitude(i, j) = mag;
      if (mag <= 0.0f) continue;
      float theta = std::atan2(gy, gx);
      if (theta < 0.0f) theta += pi;
      if (theta >= pi) theta -= pi;
      int bin = int(theta * inv_bin);
      if (bin >= kOrientationBins) bin = kOrientationBins - 1;
      if (bin < 0) bin = 0;
      out.bins[std::size_t(bin)](i, j) = mag;
    }
  }
  return out;
}

/// 4x4 block sums (not means), accumulated in double. Extents must divide by 4.
inline PlaneF block_sum4(const PlaneF& plane) {
  const int h = int(plane.rows()), w = int(plane.cols());
  if (h % kAcfShrink != 0 || w % kAcfShrink != 0 || h == 0 || w == 0)
    throw ShapeError("plane extents " + std::to_string(h) + "x" + std::to_string(w) +
                     " are not divisible by " + std::to_string(kAcfShrink));
  PlaneF out(h / kAcfShrink, w / kAcfShrink);
  for (int bi = 0; bi < h / kAcfShrink; ++bi)
    for (int bj = 0; bj < w / kAcfShrink; ++bj) {
      double sum = 0;
      for (int di = 0; di < kAcfShrink; ++di)
        for (int dj = 0; dj < kAcfShrink; ++dj)
          sum += double(plane(bi * kAcfShrink + di, bj * kAcfShrink + dj));
      out(bi, bj) = float(sum);
    }
  return out;
}

/// Aggregated channel stack for one patch.
struct AcfPatch {
  int rows = 0, cols = 0;  // aggregated extents (input / 4)
  std::array<PlaneF, kAcfPlanes> planes;
};

inline AcfPatch extract_acf(const RgbPatch& p) {
  if (p.rows % kAcfShrink != 0 || p.cols % kAcfShrink != 0)
    throw ShapeError("channel extraction needs extents divisible by 4, got " +
                     std::to_string(p.rows) + "x" + std::to_string(p.cols));
  LuvPlanes luv_planes = rgb_to_luv_full(p);
  GradientChannels grad = gradient_channels(luv_planes.l_star);
  AcfPatch out;
  out.rows = p.rows / kAcfShrink;
  out.cols = p.cols / kAcfShrink;
  out.planes[0] = block_sum4(luv_planes.l_scaled);
  out.planes[1] = block_sum4(luv_planes.u_scaled);
  out.planes[2] = block_sum4(luv_planes.v_scaled);
  out.planes[3] = block_sum4(grad.magnitude);
  for (int k = 0; k < kOrientationBins; ++k)
    out.planes[std::size_t(4 + k)] = block_sum4(grad.bins[std::size_t(k)]);
  return out;
}

/// The channel stack a horizontally mirrored image would produce: mirror all
/// planes and swap orientation bins k <-> 5-k (theta -> pi - theta).
inline AcfPatch acf_flip(const AcfPatch& a) {
  AcfPatch out;
  out.rows = a.rows;
  out.cols = a.cols;
  for (int k = 0; k < kAcfPlanes; ++k) {
    int src = k < 4 ? k : 4 + (kOrientationBins - 1 - (k - 4));
    out.planes[std::size_t(k)] = a.planes[std::size_t(src)].rowwise().reverse();
  }
  return out;
}

// Channel files: "DKAC", u16 version, u16 plane count (10), u16 rows, u16
// cols, then f32 planes in layout order, each row-major.

inline constexpr char kAcfMagic[4] = {'D', 'K', 'A', 'C'};
inline constexpr std::uint16_t kAcfVersion = 1;

inline void save_acf(const AcfPatch& a, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  write_bytes(os, kAcfMagic, 4);
  write_u16(os, kAcfVersion);
  write_u16(os, kAcfPlanes);
  write_u16(os, std::uint16_t(a.rows));
  write_u16(os, std::uint16_t(a.cols));
  for (const auto& plane : a.planes)
    for (int i = 0; i < a.rows; ++i)
      for (int j = 0; j < a.cols; ++j) write_f32(os, plane(i, j));
  os.flush();
  if (!os) throw FormatError("write failed for '" + path + "'");
}

inline AcfPatch load_acf(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open '" + path + "'");
  expect_magic(is, kAcfMagic, "channels");
  std::uint16_t version = read_u16(is, "version");
  if (version != kAcfVersion)
    throw FormatError("unsupported channels version " + std::to_string(version));
  std::uint16_t planes = read_u16(is, "plane count");
  if (planes != kAcfPlanes)
    throw FormatError("expected " + std::to_string(kAcfPlanes) + " planes, got " +
                      std::to_string(planes));
  AcfPatch a;
  a.rows = read_u16(is, "rows");
  a.cols = read_u16(is, "cols");
  if (a.rows < 1 || a.cols < 1) throw FormatError("implausible channel extents");
  for (auto& plane : a.planes) {
    plane.resize(a.rows, a.cols);
    for (int i = 0; i < a.rows; ++i)
      for (int j = 0; j < a.cols; ++j) plane(i, j) = read_f32(is, "plane value");
    if (!plane.isFinite().all()) throw NumericError("non-finite channel values");
  }
  char extra;
  if (is.read(&extra, 1) && is.gcount() == 1)
    throw FormatError("trailing bytes after last plane");
  return a;
}

}  // namespace dk
