#pragma once

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "distillkit/common.hpp"
#include "distillkit/hash.hpp"

namespace dk {

/// 8-bit RGB image patch, row-major, interleaved channels.
struct RgbPatch {
  int rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;

  RgbPatch() = default;
  RgbPatch(int rows_in, int cols_in) : rows(rows_in), cols(cols_in) {
    if (rows <= 0 || cols <= 0) throw ShapeError("patch extents must be positive");
    pixels.assign(std::size_t(rows) * cols * 3, 0);
  }

  std::uint8_t& at(int i, int j, int c) { return pixels[(std::size_t(i) * cols + j) * 3 + c]; }
  std::uint8_t at(int i, int j, int c) const { return pixels[(std::size_t(i) * cols + j) * 3 + c]; }
};

inline RgbPatch flip_horizontal(const RgbPatch& p) {
  RgbPatch out(p.rows, p.cols);
  for (int i = 0; i < p.rows; ++i)
    for (int j = 0; j < p.cols; ++j)
      for (int c = 0; c < 3; ++c) out.at(i, j, c) = p.at(i, p.cols - 1 - j, c);
  return out;
}

/// Content fingerprint covering extents and pixel bytes.
inline Hash128 patch_hash(const RgbPatch& p) {
  std::vector<unsigned char> buf;
  buf.reserve(8 + p.pixels.size());
  for (int shift = 0; shift < 32; shift += 8) buf.push_back((std::uint32_t(p.rows) >> shift) & 0xff);
  for (int shift = 0; shift < 32; shift += 8) buf.push_back((std::uint32_t(p.cols) >> shift) & 0xff);
  buf.insert(buf.end(), p.pixels.begin(), p.pixels.end());
  return hash128(buf.data(), buf.size());
}

namespace detail {

/// Reads one whitespace-delimited PPM header token, skipping '#' comments.
inline std::string ppm_token(std::istream& is) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(char(c));
  }
  if (tok.empty()) throw FormatError("truncated image header");
  return tok;
}

inline int ppm_int(std::istream& is, const char* what) {
  std::string tok = ppm_token(is);
  try {
    std::size_t used = 0;
    int v = std::stoi(tok, &used);
    if (used != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw FormatError(std::string("bad ") + what + " in image header: '" + tok + "'");
  }
}

}  // namespace detail

inline RgbPatch read_ppm(std::istream& is, const std::string& name = "<stream>") {
  std::string magic = detail::ppm_token(is);
  if (magic != "P6")
    throw FormatError("'" + name + "': only binary P6 images are supported, got '" + magic + "'");
  int cols = detail::ppm_int(is, "width");
  int rows = detail::ppm_int(is, "height");
  int maxval = detail::ppm_int(is, "maxval");
  if (cols < 1 || rows < 1 || cols > 32768 || rows > 32768)
    throw FormatError("'" + name + "': implausible image extents");
  if (maxval != 255) throw FormatError("'" + name + "': only maxval 255 is supported");
  // Header ends with exactly one whitespace byte (already consumed by token).
  RgbPatch p(rows, cols);
  is.read(reinterpret_cast<char*>(p.pixels.data()), std::streamsize(p.pixels.size()));
  if (std::size_t(is.gcount()) != p.pixels.size())
    throw FormatError("'" + name + "': truncated pixel data");
  return p;
}

inline RgbPatch read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open image '" + path + "'");
  return read_ppm(is, path);
}

inline void write_ppm(std::ostream& os, const RgbPatch& p,
                      const std::vector<std::string>& comments = {}) {
  os << "P6\n";
  for (const auto& c : comments) os << "# " << c << "\n";
  os << p.cols << " " << p.rows << "\n255\n";
  os.write(reinterpret_cast<const char*>(p.pixels.data()), std::streamsize(p.pixels.size()));
  if (!os) throw FormatError("image write failed");
}

inline void write_ppm(const std::string& path, const RgbPatch& p,
                      const std::vector<std::string>& comments = {}) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open image '" + path + "' for writing");
  write_ppm(os, p, comments);
}

}  // namespace dk
