#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "distillkit/common.hpp"
#include "distillkit/tensor.hpp"

namespace dk {

enum class LayerKind : std::uint8_t {
  dense = 1,
  conv2d = 2,
  relu = 3,
  maxpool = 4,
  avgpool_global = 5,
  dropout = 6,
  flatten = 7,
};

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::avgpool_global: return "avgpool";
    case LayerKind::dropout: return "dropout";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

/// Immutable layer description; parameters live in the network.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  int in = 0, out = 0;                                    // dense
  int in_ch = 0, out_ch = 0, kernel = 0, stride = 1, pad = 0;  // conv2d
  int window = 0, pool_stride = 0;                        // maxpool
  float keep = 1.0f;                                      // dropout

  static LayerSpec dense(int in, int out) {
    if (in <= 0 || out <= 0) throw ConfigError("dense extents must be positive");
    LayerSpec s;
    s.kind = LayerKind::dense;
    s.in = in;
    s.out = out;
    return s;
  }
  static LayerSpec conv2d(int in_ch, int out_ch, int kernel, int stride, int pad) {
    if (in_ch <= 0 || out_ch <= 0 || kernel <= 0 || stride <= 0 || pad < 0)
      throw ConfigError("conv hyperparameters out of range");
    LayerSpec s;
    s.kind = LayerKind::conv2d;
    s.in_ch = in_ch;
    s.out_ch = out_ch;
    s.kernel = kernel;
    s.stride = stride;
    s.pad = pad;
    return s;
  }
  static LayerSpec relu() {
    LayerSpec s;
    s.kind = LayerKind::relu;
    return s;
  }
  static LayerSpec maxpool(int window, int stride) {
    if (window <= 0 || stride <= 0) throw ConfigError("maxpool hyperparameters out of range");
    LayerSpec s;
    s.kind = LayerKind::maxpool;
    s.window = window;
    s.pool_stride = stride;
    return s;
  }
  static LayerSpec avgpool_global() {
    LayerSpec s;
    s.kind = LayerKind::avgpool_global;
    return s;
  }
  static LayerSpec dropout(float keep) {
    if (!(keep > 0.0f && keep <= 1.0f)) throw ConfigError("dropout keep probability must be in (0,1]");
    LayerSpec s;
    s.kind = LayerKind::dropout;
    s.keep = keep;
    return s;
  }
  static LayerSpec flatten() {
    LayerSpec s;
    s.kind = LayerKind::flatten;
    return s;
  }
};

/// Output shape of one layer given its input shape. Throws ShapeError when
/// the layer cannot consume the input.
inline std::vector<int> infer_shape(const LayerSpec& spec, const std::vector<int>& in) {
  auto fail = [&](const std::string& why) -> std::vector<int> {
    throw ShapeError(std::string(kind_name(spec.kind)) + " cannot take input " +
                     shape_string(in) + ": " + why);
  };
  switch (spec.kind) {
    case LayerKind::dense:
      if (in.size() != 1) return fail("dense expects a rank-1 input (flatten first)");
      if (in[0] != spec.in) return fail("expected width " + std::to_string(spec.in));
      return {spec.out};
    case LayerKind::conv2d: {
      if (in.size() != 3) return fail("conv expects [channels, rows, cols]");
      if (in[0] != spec.in_ch) return fail("expected " + std::to_string(spec.in_ch) + " channels");
      int h = (in[1] + 2 * spec.pad - spec.kernel) / spec.stride + 1;
      int w = (in[2] + 2 * spec.pad - spec.kernel) / spec.stride + 1;
      if (in[1] + 2 * spec.pad < spec.kernel || in[2] + 2 * spec.pad < spec.kernel || h < 1 || w < 1)
        return fail("kernel larger than padded input");
      return {spec.out_ch, h, w};
    }
    case LayerKind::relu:
    case LayerKind::dropout:
      if (in.empty()) return fail("empty shape");
      return in;
    case LayerKind::maxpool: {
      if (in.size() != 3) return fail("maxpool expects [channels, rows, cols]");
      if (in[1] < spec.window || in[2] < spec.window) return fail("window larger than input");
      int h = (in[1] - spec.window) / spec.pool_stride + 1;
      int w = (in[2] - spec.window) / spec.pool_stride + 1;
      return {in[0], h, w};
    }
    case LayerKind::avgpool_global:
      if (in.size() != 3) return fail("global average pool expects [channels, rows, cols]");
      return {in[0]};
    case LayerKind::flatten:
      if (in.empty()) return fail("empty shape");
      return {static_cast<int>(shape_numel(in))};
  }
  return fail("unknown layer kind");
}

/// Shapes of the trainable tensors: {weights, bias} or empty.
inline std::vector<std::vector<int>> param_shapes(const LayerSpec& spec) {
  switch (spec.kind) {
    case LayerKind::dense:
      return {{spec.out, spec.in}, {spec.out}};
    case LayerKind::conv2d:
      return {{spec.out_ch, spec.in_ch * spec.kernel * spec.kernel}, {spec.out_ch}};
    default:
      return {};
  }
}

inline long param_count(const LayerSpec& spec) {
  long n = 0;
  for (const auto& s : param_shapes(spec)) n += shape_numel(s);
  return n;
}

/// Textual architecture form, e.g.
///   "conv(3,14,3,2,1) relu avgpool dropout(0.5) dense(14,64) relu dense(64,2)"
inline std::vector<LayerSpec> arch_from_string(const std::string& text) {
  std::vector<LayerSpec> specs;
  std::istringstream is(text);
  std::string token;
  while (is >> token) {
    auto paren = token.find('(');
    std::string name = token.substr(0, paren);
    std::vector<double> args;
    if (paren != std::string::npos) {
      if (token.back() != ')') throw ConfigError("malformed layer token '" + token + "'");
      std::string body = token.substr(paren + 1, token.size() - paren - 2);
      std::istringstream as(body);
      std::string field;
      while (std::getline(as, field, ',')) {
        try {
          std::size_t used = 0;
          args.push_back(std::stod(field, &used));
          if (used != field.size()) throw std::invalid_argument(field);
        } catch (const std::exception&) {
          throw ConfigError("bad numeric argument in layer token '" + token + "'");
        }
      }
    }
    auto want = [&](std::size_t n) {
      if (args.size() != n)
        throw ConfigError("layer '" + name + "' expects " + std::to_string(n) +
                          " arguments, got " + std::to_string(args.size()));
    };
    if (name == "dense") {
      want(2);
      specs.push_back(LayerSpec::dense(int(args[0]), int(args[1])));
    } else if (name == "conv") {
      want(5);
      specs.push_back(LayerSpec::conv2d(int(args[0]), int(args[1]), int(args[2]), int(args[3]), int(args[4])));
    } else if (name == "relu") {
      want(0);
      specs.push_back(LayerSpec::relu());
    } else if (name == "maxpool") {
      want(2);
      specs.push_back(LayerSpec::maxpool(int(args[0]), int(args[1])));
    } else if (name == "avgpool") {
      want(0);
      specs.push_back(LayerSpec::avgpool_global());
    } else if (name == "dropout") {
      want(1);
      specs.push_back(LayerSpec::dropout(float(args[0])));
    } else if (name == "flatten") {
      want(0);
      specs.push_back(LayerSpec::flatten());
    } else {
      throw ConfigError("unknown layer '" + name + "'");
    }
  }
  if (specs.empty()) throw ConfigError("architecture string is empty");
  return specs;
}

inline std::string arch_to_string(const std::vector<LayerSpec>& specs) {
  std::ostringstream os;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (i) os << ' ';
    const LayerSpec& s = specs[i];
    switch (s.kind) {
      case LayerKind::dense: os << "dense(" << s.in << ',' << s.out << ')'; break;
      case LayerKind::conv2d:
        os << "conv(" << s.in_ch << ',' << s.out_ch << ',' << s.kernel << ',' << s.stride << ','
           << s.pad << ')';
        break;
      case LayerKind::relu: os << "relu"; break;
      case LayerKind::maxpool: os << "maxpool(" << s.window << ',' << s.pool_stride << ')'; break;
      case LayerKind::avgpool_global: os << "avgpool"; break;
      case LayerKind::dropout: {
        std::ostringstream keep;
        keep << s.keep;
        os << "dropout(" << keep.str() << ')';
        break;
      }
      case LayerKind::flatten: os << "flatten"; break;
    }
  }
  return os.str();
}

}  // namespace dk
