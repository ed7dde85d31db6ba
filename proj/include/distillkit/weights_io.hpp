#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "distillkit/binio.hpp"
#include "distillkit/network.hpp"

namespace dk {

// Weight files: "DKWT", u16 version, u16 layer count, then per layer a kind
// tag (u8), its hyperparameters, a u32 tensor count and the tensors (u8 rank,
// u32 extents, f32 little-endian values). An optional "PROV" + u16 length +
// bytes trailer carries the producing configuration's fingerprint.

inline constexpr char kWeightsMagic[4] = {'D', 'K', 'W', 'T'};
inline constexpr std::uint16_t kWeightsVersion = 1;

struct LoadedNet {
  Network<float> net;
  std::string provenance;
};

inline void write_tensor_f32(std::ostream& os, const Tensor<float>& t) {
  write_u8(os, static_cast<std::uint8_t>(t.rank()));
  for (int e : t.shape) write_u32(os, static_cast<std::uint32_t>(e));
  for (float v : t.data) write_f32(os, v);
}

inline Tensor<float> read_tensor_f32(std::istream& is) {
  int rank = read_u8(is, "tensor rank");
  if (rank < 1 || rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank));
  std::vector<int> shape(static_cast<std::size_t>(rank));
  for (int& e : shape) {
    std::uint32_t v = read_u32(is, "tensor extent");
    if (v == 0 || v > (1u << 28)) throw FormatError("implausible tensor extent");
    e = static_cast<int>(v);
  }
  Tensor<float> t(shape);
  for (float& v : t.data) v = read_f32(is, "tensor value");
  return t;
}

inline void save_weights(const Network<float>& net, const std::string& path,
                         const std::string& provenance = "") {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  write_bytes(os, kWeightsMagic, 4);
  write_u16(os, kWeightsVersion);
  write_u16(os, static_cast<std::uint16_t>(net.layer_count()));
  for (int i = 0; i < net.layer_count(); ++i) {
    const LayerSpec& s = net.layer(i);
    write_u8(os, static_cast<std::uint8_t>(s.kind));
    switch (s.kind) {
      case LayerKind::dense:
        write_u32(os, std::uint32_t(s.in));
        write_u32(os, std::uint32_t(s.out));
        break;
      case LayerKind::conv2d:
        write_u32(os, std::uint32_t(s.in_ch));
        write_u32(os, std::uint32_t(s.out_ch));
        write_u32(os, std::uint32_t(s.kernel));
        write_u32(os, std::uint32_t(s.stride));
        write_u32(os, std::uint32_t(s.pad));
        break;
      case LayerKind::maxpool:
        write_u32(os, std::uint32_t(s.window));
        write_u32(os, std::uint32_t(s.pool_stride));
        break;
      case LayerKind::dropout:
        write_f32(os, s.keep);
        break;
      default:
        break;
    }
    const auto& tensors = net.params(i);
    write_u32(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
      require_finite(t, "layer " + std::to_string(i) + " parameters");
      write_tensor_f32(os, t);
    }
  }
  if (!provenance.empty()) {
    write_bytes(os, "PROV", 4);
    write_u16(os, static_cast<std::uint16_t>(provenance.size()));
    write_bytes(os, provenance.data(), provenance.size());
  }
  os.flush();
  if (!os) throw FormatError("write failed for '" + path + "'");
}

/// Rebuilds the network. The file carries no spatial extents for the input,
/// so the caller supplies the input shape it intends to feed.
inline LoadedNet load_weights(const std::string& path, const std::vector<int>& input_shape) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open '" + path + "'");
  expect_magic(is, kWeightsMagic, "weights");
  std::uint16_t version = read_u16(is, "version");
  if (version != kWeightsVersion)
    throw FormatError("unsupported weights version " + std::to_string(version));
  int layer_count = read_u16(is, "layer count");
  if (layer_count < 1) throw FormatError("weights file declares no layers");

  std::vector<LayerSpec> specs;
  std::vector<std::vector<Tensor<float>>> tensors(static_cast<std::size_t>(layer_count));
  for (int i = 0; i < layer_count; ++i) {
    int tag = read_u8(is, "layer kind");
    LayerSpec s;
    switch (static_cast<LayerKind>(tag)) {
      case LayerKind::dense: {
        int in = int(read_u32(is, "dense in"));
        int out = int(read_u32(is, "dense out"));
        s = LayerSpec::dense(in, out);
        break;
      }
      case LayerKind::conv2d: {
        int in_ch = int(read_u32(is, "conv in_ch"));
        int out_ch = int(read_u32(is, "conv out_ch"));
        int kernel = int(read_u32(is, "conv kernel"));
        int stride = int(read_u32(is, "conv stride"));
        int pad = int(read_u32(is, "conv pad"));
        s = LayerSpec::conv2d(in_ch, out_ch, kernel, stride, pad);
        break;
      }
      case LayerKind::relu: s = LayerSpec::relu(); break;
      case LayerKind::maxpool: {
        int window = int(read_u32(is, "pool window"));
        int stride = int(read_u32(is, "pool stride"));
        s = LayerSpec::maxpool(window, stride);
        break;
      }
      case LayerKind::avgpool_global: s = LayerSpec::avgpool_global(); break;
      case LayerKind::dropout: s = LayerSpec::dropout(read_f32(is, "dropout keep")); break;
      case LayerKind::flatten: s = LayerSpec::flatten(); break;
      default:
        throw FormatError("unknown layer tag " + std::to_string(tag) + " at layer " +
                          std::to_string(i));
    }
    specs.push_back(s);
    auto expected = param_shapes(s);
    std::uint32_t count = read_u32(is, "tensor count");
    if (count != expected.size())
      throw FormatError("layer " + std::to_string(i) + " declares " + std::to_string(count) +
                        " tensors, kind needs " + std::to_string(expected.size()));
    for (std::uint32_t j = 0; j < count; ++j) {
      Tensor<float> t = read_tensor_f32(is);
      if (t.shape != expected[j])
        throw FormatError("layer " + std::to_string(i) + " tensor " + std::to_string(j) +
                          " has shape " + shape_string(t.shape) + ", expected " +
                          shape_string(expected[j]));
      if (!t.all_finite())
        throw NumericError("non-finite weights in layer " + std::to_string(i));
      tensors[std::size_t(i)].push_back(std::move(t));
    }
  }

  LoadedNet out;
  out.net = Network<float>::make(specs, input_shape);
  for (int i = 0; i < layer_count; ++i) out.net.params_mut(i) = std::move(tensors[std::size_t(i)]);

  char tail[4];
  is.read(tail, 4);
  std::streamsize got = is.gcount();
  if (got == 0) return out;
  if (got == 4 && std::memcmp(tail, "PROV", 4) == 0) {
    std::uint16_t len = read_u16(is, "provenance length");
    out.provenance.resize(len);
    if (len) read_bytes(is, out.provenance.data(), len, "provenance bytes");
    char extra;
    if (is.read(&extra, 1) && is.gcount() == 1)
      throw FormatError("trailing bytes after provenance block");
    return out;
  }
  throw FormatError("trailing bytes after last layer");
}

}  // namespace dk
