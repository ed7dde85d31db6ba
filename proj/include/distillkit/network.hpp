#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "distillkit/common.hpp"
#include "distillkit/layers.hpp"
#include "distillkit/rng.hpp"
#include "distillkit/tensor.hpp"

namespace dk {

enum class NetMode { train, eval };

/// Everything backward needs from one forward pass. A tape is valid only for
/// the parameter state it was recorded against (checked via version).
template <class S>
struct TapeState {
  std::uint64_t version = 0;
  Tensor<S> input;
  std::vector<Tensor<S>> outputs;            // per layer
  std::vector<Tensor<S>> dropout_scale;      // per layer; empty unless dropout fired
  std::vector<std::vector<int>> pool_argmax; // per layer; flat input index per output
  std::vector<Tensor<S>> conv_cols;          // per layer; unfolded [K x P] patches
};

template <class S>
struct Gradients {
  std::vector<std::vector<Tensor<S>>> params;  // mirrors network parameter shapes
  Tensor<S> input;
};

/// Extra gradient summed into the running signal at `layer`'s output during
/// backward; lets one pass combine losses taken at different depths.
template <class S>
struct GradInjection {
  int layer = -1;
  Tensor<S> grad;
};

inline int final_dense_index(const std::vector<LayerSpec>& specs) {
  for (int i = static_cast<int>(specs.size()) - 1; i >= 0; --i)
    if (specs[i].kind == LayerKind::dense) return i;
  return -1;
}

/// The guidance tap: the dense layer feeding the final dense stack, whose
/// pre-activation output is matched during hint training.
inline int hint_dense_index(const std::vector<LayerSpec>& specs) {
  int seen = 0;
  for (int i = static_cast<int>(specs.size()) - 1; i >= 0; --i)
    if (specs[i].kind == LayerKind::dense && ++seen == 2) return i;
  return -1;
}

inline int first_dropout_index(const std::vector<LayerSpec>& specs) {
  for (int i = 0; i < static_cast<int>(specs.size()); ++i)
    if (specs[i].kind == LayerKind::dropout) return i;
  return -1;
}

template <class S>
class Network {
 public:
  Network() = default;

  /// Validates the stack against the input shape and allocates zeroed
  /// parameters. Shape errors surface here, not at first forward.
  static Network make(std::vector<LayerSpec> specs, std::vector<int> input_shape) {
    Network net;
    net.specs_ = std::move(specs);
    net.input_shape_ = std::move(input_shape);
    if (net.specs_.empty()) throw ConfigError("network needs at least one layer");
    std::vector<int> shape = net.input_shape_;
    for (std::size_t i = 0; i < net.specs_.size(); ++i) {
      try {
        shape = infer_shape(net.specs_[i], shape);
      } catch (const ShapeError& e) {
        throw ShapeError("layer " + std::to_string(i) + ": " + e.what());
      }
      net.output_shapes_.push_back(shape);
      std::vector<Tensor<S>> tensors;
      for (const auto& ps : param_shapes(net.specs_[i])) tensors.emplace_back(ps);
      net.params_.push_back(std::move(tensors));
    }
    return net;
  }

  int layer_count() const { return static_cast<int>(specs_.size()); }
  const std::vector<LayerSpec>& layers() const { return specs_; }
  const LayerSpec& layer(int i) const { return specs_.at(static_cast<std::size_t>(i)); }
  const std::vector<int>& input_shape() const { return input_shape_; }
  const std::vector<int>& output_shape(int i) const {
    return output_shapes_.at(static_cast<std::size_t>(i));
  }
  const std::vector<int>& output_shape() const { return output_shapes_.back(); }

  const std::vector<Tensor<S>>& params(int i) const {
    return params_.at(static_cast<std::size_t>(i));
  }
  /// Mutable access assumes mutation: the version advances immediately so
  /// previously recorded tapes are rejected.
  std::vector<Tensor<S>>& params_mut(int i) {
    ++version_;
    return params_.at(static_cast<std::size_t>(i));
  }

  NetMode mode() const { return mode_; }
  void set_mode(NetMode m) { mode_ = m; }
  bool dropout_at_eval() const { return dropout_at_eval_; }
  void set_dropout_at_eval(bool v) { dropout_at_eval_ = v; }
  std::uint64_t version() const { return version_; }

  long param_total() const {
    long n = 0;
    for (const auto& spec : specs_) n += param_count(spec);
    return n;
  }

  bool dropout_active() const {
    if (mode_ == NetMode::train || dropout_at_eval_) {
      for (const auto& s : specs_)
        if (s.kind == LayerKind::dropout && s.keep < 1.0f) return true;
    }
    return false;
  }

  /// He-uniform weights, zero biases. Draw order is layer-major then
  /// row-major within each weight tensor, so a seed pins the full state.
  void init_params(RandomStream& rng) {
    for (int i = 0; i < layer_count(); ++i) {
      const LayerSpec& s = specs_[static_cast<std::size_t>(i)];
      if (s.kind != LayerKind::dense && s.kind != LayerKind::conv2d) continue;
      int fan_in = s.kind == LayerKind::dense ? s.in : s.in_ch * s.kernel * s.kernel;
      double limit = std::sqrt(6.0 / fan_in);
      auto& tensors = params_[static_cast<std::size_t>(i)];
      for (auto& v : tensors[0].data) v = static_cast<S>(rng.uniform(-limit, limit));
      for (auto& v : tensors[1].data) v = S(0);
    }
    ++version_;
  }

  struct ForwardResult {
    Tensor<S> output;
    TapeState<S> tape;
  };

  /// Full forward with tape. `rng` is required only when dropout is active.
  ForwardResult forward(const Tensor<S>& input, RandomStream* rng = nullptr) const {
    ForwardResult r;
    r.tape.version = version_;
    r.tape.input = input;
    r.tape.outputs.resize(specs_.size());
    r.tape.dropout_scale.resize(specs_.size());
    r.tape.pool_argmax.resize(specs_.size());
    r.tape.conv_cols.resize(specs_.size());
    r.output = walk(input, 0, layer_count(), rng, &r.tape, -1, nullptr);
    return r;
  }

  /// Tape-free forward over layers [lo, hi); `tap` (when in range) receives a
  /// copy of that layer's output. Used by inference and the sampling paths.
  Tensor<S> forward_range(const Tensor<S>& input, int lo, int hi, RandomStream* rng = nullptr,
                          int tap = -1, Tensor<S>* tap_out = nullptr) const {
    return walk(input, lo, hi, rng, nullptr, tap, tap_out);
  }

  Tensor<S> infer(const Tensor<S>& input, RandomStream* rng = nullptr) const {
    return walk(input, 0, layer_count(), rng, nullptr, -1, nullptr);
  }

  /// Backprop through the taped pass. `out_grad` seeds the final output;
  /// `injections` add gradient at intermediate layer outputs.
  Gradients<S> backward(const TapeState<S>& tape, const Tensor<S>& out_grad,
                        const std::vector<GradInjection<S>>& injections = {}) const {
    if (tape.version != version_)
      throw Error("tape is stale: parameters changed since forward");
    require_shape(out_grad, output_shapes_.back(), "output gradient");
    require_finite(out_grad, "output gradient");
    for (const auto& inj : injections) {
      if (inj.layer < 0 || inj.layer >= layer_count())
        throw ShapeError("gradient injection layer " + std::to_string(inj.layer) + " out of range");
      require_shape(inj.grad, output_shapes_[static_cast<std::size_t>(inj.layer)],
                    "gradient injection at layer " + std::to_string(inj.layer));
      require_finite(inj.grad, "gradient injection");
    }

    Gradients<S> g = zero_grads();
    Tensor<S> running = out_grad;
    for (int i = layer_count() - 1; i >= 0; --i) {
      for (const auto& inj : injections)
        if (inj.layer == i) running.vec() += inj.grad.vec();
      running = backward_layer(i, tape, running, g);
      require_finite(running, "gradient below layer " + std::to_string(i) + " (" +
                                  kind_name(specs_[static_cast<std::size_t>(i)].kind) + ")");
    }
    g.input = std::move(running);
    return g;
  }

  Gradients<S> zero_grads() const {
    Gradients<S> g;
    g.params.resize(specs_.size());
    for (std::size_t i = 0; i < specs_.size(); ++i)
      for (const auto& ps : param_shapes(specs_[i]))
        g.params[i].emplace_back(ps);
    g.input = Tensor<S>(input_shape_);
    return g;
  }

  /// Copies the final dense layer's weights and bias from `src`; both final
  /// dense layers must agree on width. Used to pin the shared output stage
  /// before hint training.
  void copy_final_dense(const Network& src) {
    int dst_i = final_dense_index(specs_);
    int src_i = final_dense_index(src.specs_);
    if (dst_i < 0 || src_i < 0) throw ConfigError("both networks need a dense output layer");
    const LayerSpec& a = specs_[static_cast<std::size_t>(dst_i)];
    const LayerSpec& b = src.specs_[static_cast<std::size_t>(src_i)];
    if (a.in != b.in || a.out != b.out)
      throw ShapeError("final dense layers differ: " + std::to_string(a.in) + "x" +
                       std::to_string(a.out) + " vs " + std::to_string(b.in) + "x" +
                       std::to_string(b.out));
    params_[static_cast<std::size_t>(dst_i)] = src.params_[static_cast<std::size_t>(src_i)];
    ++version_;
  }

 private:
  Tensor<S> walk(const Tensor<S>& input, int lo, int hi, RandomStream* rng, TapeState<S>* tape,
                 int tap, Tensor<S>* tap_out) const {
    if (lo < 0 || hi > layer_count() || lo > hi) throw Error("bad layer range");
    const std::vector<int>& expect = lo == 0 ? input_shape_ : output_shapes_[std::size_t(lo - 1)];
    require_shape(input, expect, "network input");
    require_finite(input, "network input");

    Tensor<S> x = input;
    for (int i = lo; i < hi; ++i) {
      x = forward_layer(i, x, rng, tape);
      require_finite(x, "layer " + std::to_string(i) + " (" +
                            kind_name(specs_[std::size_t(i)].kind) + ") output");
      if (tape) tape->outputs[std::size_t(i)] = x;
      if (i == tap && tap_out) *tap_out = x;
    }
    return x;
  }

  Tensor<S> forward_layer(int i, const Tensor<S>& x, RandomStream* rng,
                          TapeState<S>* tape) const {
    const LayerSpec& s = specs_[std::size_t(i)];
    const std::vector<int>& out_shape = output_shapes_[std::size_t(i)];
    switch (s.kind) {
      case LayerKind::dense: {
        const auto& t = params_[std::size_t(i)];
        Tensor<S> y(out_shape);
        y.vec().noalias() = t[0].mat(s.out, s.in) * x.vec();
        y.vec() += t[1].vec();
        return y;
      }
      case LayerKind::conv2d: {
        Tensor<S> cols = im2col(s, x, out_shape);
        const auto& t = params_[std::size_t(i)];
        Tensor<S> y(out_shape);
        long K = s.in_ch * s.kernel * s.kernel;
        long P = long(out_shape[1]) * out_shape[2];
        auto ym = y.mat(s.out_ch, P);
        ym.noalias() = t[0].mat(s.out_ch, K) * cols.mat(K, P);
        ym.colwise() += t[1].vec();
        if (tape) tape->conv_cols[std::size_t(i)] = std::move(cols);
        return y;
      }
      case LayerKind::relu: {
        Tensor<S> y = x;
        for (auto& v : y.data) v = v > S(0) ? v : S(0);
        return y;
      }
      case LayerKind::maxpool:
        return maxpool_forward(i, s, x, out_shape, tape);
      case LayerKind::avgpool_global: {
        int c = x.shape[0];
        long hw = long(x.shape[1]) * x.shape[2];
        Tensor<S> y(out_shape);
        auto xm = x.mat(c, hw);
        y.vec() = xm.rowwise().sum() / S(hw);
        return y;
      }
      case LayerKind::dropout: {
        bool active = (mode_ == NetMode::train || dropout_at_eval_) && s.keep < 1.0f;
        if (!active) return x;
        if (!rng)
          throw Error("layer " + std::to_string(i) +
                      ": dropout is active but no random stream was supplied");
        Tensor<S> scale(x.shape);
        S inv = S(1) / S(s.keep);
        for (long j = 0; j < x.numel(); ++j)
          scale[j] = rng->uniform() < double(s.keep) ? inv : S(0);
        Tensor<S> y = x;
        y.vec().array() *= scale.vec().array();
        if (tape) tape->dropout_scale[std::size_t(i)] = std::move(scale);
        return y;
      }
      case LayerKind::flatten: {
        Tensor<S> y = x;
        y.shape = out_shape;
        return y;
      }
    }
    throw Error("unknown layer kind");
  }

  Tensor<S> maxpool_forward(int i, const LayerSpec& s, const Tensor<S>& x,
                            const std::vector<int>& out_shape, TapeState<S>* tape) const {
    int C = x.shape[0], H = x.shape[1], W = x.shape[2];
    int OH = out_shape[1], OW = out_shape[2];
    Tensor<S> y(out_shape);
    std::vector<int> argmax(std::size_t(C) * OH * OW);
    long o = 0;
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox, ++o) {
          int iy0 = oy * s.pool_stride, ix0 = ox * s.pool_stride;
          S best{};
          int best_idx = -1;
          for (int dy = 0; dy < s.window; ++dy)
            for (int dx = 0; dx < s.window; ++dx) {
              int idx = (c * H + iy0 + dy) * W + ix0 + dx;
              S v = x[idx];
              if (best_idx < 0 || v > best) {
                best = v;
                best_idx = idx;
              }
            }
          y[o] = best;
          argmax[std::size_t(o)] = best_idx;
        }
    if (tape) tape->pool_argmax[std::size_t(i)] = std::move(argmax);
    return y;
  }

  Tensor<S> im2col(const LayerSpec& s, const Tensor<S>& x,
                   const std::vector<int>& out_shape) const {
    int H = x.shape[1], W = x.shape[2];
    int OH = out_shape[1], OW = out_shape[2];
    long K = long(s.in_ch) * s.kernel * s.kernel;
    long P = long(OH) * OW;
    Tensor<S> cols({int(K), int(P)});
    long r = 0;
    for (int c = 0; c < s.in_ch; ++c)
      for (int di = 0; di < s.kernel; ++di)
        for (int dj = 0; dj < s.kernel; ++dj, ++r) {
          S* row = cols.data.data() + r * P;
          long p = 0;
          for (int oy = 0; oy < OH; ++oy) {
            int iy = oy * s.stride - s.pad + di;
            for (int ox = 0; ox < OW; ++ox, ++p) {
              int ix = ox * s.stride - s.pad + dj;
              row[p] = (iy >= 0 && iy < H && ix >= 0 && ix < W)
                           ? x[(long(c) * H + iy) * W + ix]
                           : S(0);
            }
          }
        }
    return cols;
  }

  void col2im_add(const LayerSpec& s, const Tensor<S>& dcols, Tensor<S>& dx) const {
    int H = dx.shape[1], W = dx.shape[2];
    long P = dcols.shape[1];
    int OW_count = 0;  // derive output extents from P and strides
    {
      int padded = W + 2 * s.pad;
      OW_count = (padded - s.kernel) / s.stride + 1;
    }
    int OH_count = int(P / OW_count);
    long r = 0;
    for (int c = 0; c < s.in_ch; ++c)
      for (int di = 0; di < s.kernel; ++di)
        for (int dj = 0; dj < s.kernel; ++dj, ++r) {
          const S* row = dcols.data.data() + r * P;
          long p = 0;
          for (int oy = 0; oy < OH_count; ++oy) {
            int iy = oy * s.stride - s.pad + di;
            for (int ox = 0; ox < OW_count; ++ox, ++p) {
              int ix = ox * s.stride - s.pad + dj;
              if (iy >= 0 && iy < H && ix >= 0 && ix < W)
                dx[(long(c) * H + iy) * W + ix] += row[p];
            }
          }
        }
  }

  /// Returns the gradient w.r.t. layer i's input; accumulates parameter
  /// gradients into `g`.
  Tensor<S> backward_layer(int i, const TapeState<S>& tape, const Tensor<S>& gy,
                           Gradients<S>& g) const {
    const LayerSpec& s = specs_[std::size_t(i)];
    const Tensor<S>& x = i == 0 ? tape.input : tape.outputs[std::size_t(i - 1)];
    switch (s.kind) {
      case LayerKind::dense: {
        auto& gp = g.params[std::size_t(i)];
        gp[0].mat(s.out, s.in).noalias() += gy.vec() * x.vec().transpose();
        gp[1].vec() += gy.vec();
        Tensor<S> gx(x.shape);
        gx.vec().noalias() = params_[std::size_t(i)][0].mat(s.out, s.in).transpose() * gy.vec();
        return gx;
      }
      case LayerKind::conv2d: {
        const Tensor<S>& cols = tape.conv_cols[std::size_t(i)];
        if (cols.data.empty()) throw Error("tape lacks conv columns for layer " + std::to_string(i));
        long K = cols.shape[0], P = cols.shape[1];
        auto gym = gy.mat(s.out_ch, P);
        auto& gp = g.params[std::size_t(i)];
        gp[0].mat(s.out_ch, K).noalias() += gym * cols.mat(K, P).transpose();
        gp[1].vec() += gym.rowwise().sum();
        Tensor<S> dcols({int(K), int(P)});
        dcols.mat(K, P).noalias() =
            params_[std::size_t(i)][0].mat(s.out_ch, K).transpose() * gym;
        Tensor<S> gx(x.shape);
        col2im_add(s, dcols, gx);
        return gx;
      }
      case LayerKind::relu: {
        Tensor<S> gx = gy;
        for (long j = 0; j < gx.numel(); ++j)
          if (x[j] <= S(0)) gx[j] = S(0);
        return gx;
      }
      case LayerKind::maxpool: {
        Tensor<S> gx(x.shape);
        const auto& argmax = tape.pool_argmax[std::size_t(i)];
        if (argmax.size() != std::size_t(gy.numel()))
          throw Error("tape lacks pool indices for layer " + std::to_string(i));
        for (long j = 0; j < gy.numel(); ++j) gx[argmax[std::size_t(j)]] += gy[j];
        return gx;
      }
      case LayerKind::avgpool_global: {
        Tensor<S> gx(x.shape);
        long hw = long(x.shape[1]) * x.shape[2];
        S inv = S(1) / S(hw);
        auto gxm = gx.mat(x.shape[0], hw);
        gxm.colwise() += (gy.vec() * inv).eval();
        return gx;
      }
      case LayerKind::dropout: {
        const Tensor<S>& scale = tape.dropout_scale[std::size_t(i)];
        Tensor<S> gx = gy;
        if (!scale.data.empty()) gx.vec().array() *= scale.vec().array();
        return gx;
      }
      case LayerKind::flatten: {
        Tensor<S> gx = gy;
        gx.shape = x.shape;
        return gx;
      }
    }
    throw Error("unknown layer kind");
  }

  std::vector<LayerSpec> specs_;
  std::vector<int> input_shape_;
  std::vector<std::vector<int>> output_shapes_;
  std::vector<std::vector<Tensor<S>>> params_;
  NetMode mode_ = NetMode::train;
  bool dropout_at_eval_ = false;
  std::uint64_t version_ = 0;
};

template <class S>
void grad_axpy(Gradients<S>& dst, const Gradients<S>& src, S scale) {
  if (dst.params.size() != src.params.size()) throw ShapeError("gradient layouts differ");
  for (std::size_t i = 0; i < dst.params.size(); ++i)
    for (std::size_t j = 0; j < dst.params[i].size(); ++j)
      dst.params[i][j].vec() += scale * src.params[i][j].vec();
  dst.input.vec() += scale * src.input.vec();
}

template <class S>
void grad_scale(Gradients<S>& g, S scale) {
  for (auto& layer : g.params)
    for (auto& t : layer) t.vec() *= scale;
  g.input.vec() *= scale;
}

}  // namespace dk
