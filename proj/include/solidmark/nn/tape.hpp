#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "solidmark/nn/tensor.hpp"

namespace solidmark::nn {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

// Records a forward computation and replays it backwards. One tape per
// forward pass; parameters are read through `params` and gradients are
// accumulated into a caller-owned Gradients object.
class Tape {
 public:
  using Var = int;

  Tape(const std::vector<Parameter>& params, bool record) : params_(&params), record_(record) {}

  Var input(Tensor t) { return push(std::move(t), nullptr); }

  const Tensor& value(Var v) const { return nodes_[static_cast<std::size_t>(v)].value; }
  std::size_t size() const { return nodes_.size(); }

  // 3x3 convolution, stride 1, zero padding 1. Weight shape [out, in*9].
  Var conv3x3(Var x, int weight, int bias) {
    const Tensor& in = value(x);
    const Parameter& w = param(weight);
    const int cin = in.channels, h = in.height, wd = in.width;
    const int cout = static_cast<int>(w.size() / (static_cast<std::size_t>(cin) * 9));
    if (static_cast<std::size_t>(cout) * cin * 9 != w.size())
      throw DimensionError("conv weight " + w.name + " does not match input channels");
    const int hw = h * wd;
    std::vector<float> cols(static_cast<std::size_t>(cin) * 9 * hw);
    im2col(in, cols);
    Tensor out(cout, h, wd);
    MatrixMap y(out.data.data(), cout, hw);
    y.noalias() = ConstMatrixMap(w.value.data(), cout, cin * 9) *
                  ConstMatrixMap(cols.data(), cin * 9, hw);
    const Parameter& b = param(bias);
    for (int c = 0; c < cout; ++c) y.row(c).array() += b.value[static_cast<std::size_t>(c)];

    if (!record_) return push(std::move(out), nullptr);
    return push(std::move(out), [this, x, weight, bias, cin, cout, h, wd, hw,
                                 cols = std::move(cols)](Var self, Gradients& g) {
      const Tensor& gy = grad(self);
      ConstMatrixMap dy(gy.data.data(), cout, hw);
      ConstMatrixMap c(cols.data(), cin * 9, hw);
      MatrixMap dw(g.per_param[static_cast<std::size_t>(weight)].data(), cout, cin * 9);
      dw.noalias() += dy * c.transpose();
      auto& db = g.per_param[static_cast<std::size_t>(bias)];
      for (int o = 0; o < cout; ++o) {
        float acc = 0.0f;
        for (int i = 0; i < hw; ++i) acc += dy(o, i);
        db[static_cast<std::size_t>(o)] += acc;
      }
      // dx is the convolution of dy with the spatially flipped, transposed
      // kernel, which keeps both halves of the backward pass as GEMMs.
      const auto& wv = param(weight).value;
      std::vector<float> wt(wv.size());
      for (int o = 0; o < cout; ++o)
        for (int i = 0; i < cin; ++i)
          for (int k = 0; k < 9; ++k)
            wt[(static_cast<std::size_t>(i) * cout + o) * 9 + (8 - k)] =
                wv[(static_cast<std::size_t>(o) * cin + i) * 9 + k];
      std::vector<float> gcols(static_cast<std::size_t>(cout) * 9 * hw);
      im2col(gy, gcols);
      Tensor& dx = grad_for(x);
      MatrixMap(dx.data.data(), cin, hw).noalias() +=
          ConstMatrixMap(wt.data(), cin, cout * 9) * ConstMatrixMap(gcols.data(), cout * 9, hw);
    });
  }

  // y = W x + b over the flattened input. Weight shape [out, in].
  Var linear(Var x, int weight, int bias) {
    const Tensor& in = value(x);
    const Parameter& w = param(weight);
    const int n_in = static_cast<int>(in.size());
    const int n_out = static_cast<int>(param(bias).size());
    if (static_cast<std::size_t>(n_in) * n_out != w.size())
      throw DimensionError("linear weight " + w.name + " does not match input size");
    Tensor out(n_out, 1, 1);
    Eigen::Map<Eigen::VectorXf> y(out.data.data(), n_out);
    y.noalias() = ConstMatrixMap(w.value.data(), n_out, n_in) *
                  Eigen::Map<const Eigen::VectorXf>(in.data.data(), n_in);
    y += Eigen::Map<const Eigen::VectorXf>(param(bias).value.data(), n_out);
    if (!record_) return push(std::move(out), nullptr);
    return push(std::move(out), [this, x, weight, bias, n_in, n_out](Var self, Gradients& g) {
      Eigen::Map<const Eigen::VectorXf> dy(grad(self).data.data(), n_out);
      Eigen::Map<const Eigen::VectorXf> xin(value(x).data.data(), n_in);
      MatrixMap(g.per_param[static_cast<std::size_t>(weight)].data(), n_out, n_in).noalias() +=
          dy * xin.transpose();
      Eigen::Map<Eigen::VectorXf>(g.per_param[static_cast<std::size_t>(bias)].data(), n_out) += dy;
      Tensor& dx = grad_for(x);
      Eigen::Map<Eigen::VectorXf>(dx.data.data(), n_in).noalias() +=
          ConstMatrixMap(param(weight).value.data(), n_out, n_in).transpose() * dy;
    });
  }

  // Scalar loops on purpose: Eigen's vectorized exp peels on the buffer
  // address, which made results depend on where malloc put the tensor.
  Var silu(Var x) {
    const Tensor& in = value(x);
    std::vector<float> sig(in.size());
    Tensor out(in.channels, in.height, in.width);
    for (std::size_t i = 0; i < in.size(); ++i) {
      sig[i] = 1.0f / (1.0f + std::exp(-in.data[i]));
      out.data[i] = in.data[i] * sig[i];
    }
    if (!record_) return push(std::move(out), nullptr);
    return push(std::move(out), [this, x, sig = std::move(sig)](Var self, Gradients&) {
      const Tensor& xv = value(x);
      const Tensor& gy = grad(self);
      Tensor& dx = grad_for(x);
      for (std::size_t i = 0; i < sig.size(); ++i)
        dx.data[i] += gy.data[i] * sig[i] * (1.0f + xv.data[i] * (1.0f - sig[i]));
    });
  }

  Var add(Var a, Var b) {
    require_same_shape(value(a), value(b), "add");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += vb.data[i];
    if (!record_) return push(std::move(out), nullptr);
    return push(std::move(out), [this, a, b](Var self, Gradients&) {
      const Tensor& gy = grad(self);
      Tensor& da = grad_for(a);
      for (std::size_t i = 0; i < gy.size(); ++i) da.data[i] += gy.data[i];
      Tensor& db = grad_for(b);
      for (std::size_t i = 0; i < gy.size(); ++i) db.data[i] += gy.data[i];
    });
  }

  // Adds v[c] to every pixel of channel c.
  Var add_channel_bias(Var x, Var v) {
    const Tensor& in = value(x);
    const Tensor& bias = value(v);
    if (bias.size() != static_cast<std::size_t>(in.channels))
      throw DimensionError("channel bias size does not match channel count");
    Tensor out = in;
    const std::size_t pl = in.plane();
    for (int c = 0; c < in.channels; ++c)
      for (std::size_t i = 0; i < pl; ++i) out.data[c * pl + i] += bias.data[static_cast<std::size_t>(c)];
    if (!record_) return push(std::move(out), nullptr);
    return push(std::move(out), [this, x, v, pl](Var self, Gradients&) {
      const Tensor& gy = grad(self);
      Tensor& dx = grad_for(x);
      Tensor& dv = grad_for(v);
      for (int c = 0; c < gy.channels; ++c) {
        float s = 0.0f;
        for (std::size_t i = 0; i < pl; ++i) {
          dx.data[c * pl + i] += gy.data[c * pl + i];
          s += gy.data[c * pl + i];
        }
        dv.data[static_cast<std::size_t>(c)] += s;
      }
    });
  }

  Var avg_pool2(Var x) {
    const Tensor& in = value(x);
    if (in.height % 2 || in.width % 2) throw DimensionError("avg_pool2 needs even dims");
    Tensor out(in.channels, in.height / 2, in.width / 2);
    for (int c = 0; c < in.channels; ++c)
      for (int y = 0; y < out.height; ++y)
        for (int xx = 0; xx < out.width; ++xx)
          out.at(c, y, xx) = 0.25f * (in.at(c, 2 * y, 2 * xx) + in.at(c, 2 * y, 2 * xx + 1) +
                                      in.at(c, 2 * y + 1, 2 * xx) + in.at(c, 2 * y + 1, 2 * xx + 1));
    if (!record_) return push(std::move(out), nullptr);
    return push(std::move(out), [this, x](Var self, Gradients&) {
      const Tensor& gy = grad(self);
      Tensor& dx = grad_for(x);
      for (int c = 0; c < gy.channels; ++c)
        for (int y = 0; y < gy.height; ++y)
          for (int xx = 0; xx < gy.width; ++xx) {
            const float g = 0.25f * gy.at(c, y, xx);
            dx.at(c, 2 * y, 2 * xx) += g;
            dx.at(c, 2 * y, 2 * xx + 1) += g;
            dx.at(c, 2 * y + 1, 2 * xx) += g;
            dx.at(c, 2 * y + 1, 2 * xx + 1) += g;
          }
    });
  }

  // Nearest-neighbour 2x upsampling.
  Var upsample2(Var x) {
    const Tensor& in = value(x);
    Tensor out(in.channels, in.height * 2, in.width * 2);
    for (int c = 0; c < out.channels; ++c)
      for (int y = 0; y < out.height; ++y)
        for (int xx = 0; xx < out.width; ++xx) out.at(c, y, xx) = in.at(c, y / 2, xx / 2);
    if (!record_) return push(std::move(out), nullptr);
    return push(std::move(out), [this, x](Var self, Gradients&) {
      const Tensor& gy = grad(self);
      Tensor& dx = grad_for(x);
      for (int c = 0; c < gy.channels; ++c)
        for (int y = 0; y < gy.height; ++y)
          for (int xx = 0; xx < gy.width; ++xx) dx.at(c, y / 2, xx / 2) += gy.at(c, y, xx);
    });
  }

  // Channel concatenation.
  Var concat(Var a, Var b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (va.height != vb.height || va.width != vb.width)
      throw DimensionError("concat: spatial dims differ");
    Tensor out(va.channels + vb.channels, va.height, va.width);
    std::copy(va.data.begin(), va.data.end(), out.data.begin());
    std::copy(vb.data.begin(), vb.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(va.size()));
    if (!record_) return push(std::move(out), nullptr);
    return push(std::move(out), [this, a, b](Var self, Gradients&) {
      const Tensor& gy = grad(self);
      Tensor& da = grad_for(a);
      Tensor& db = grad_for(b);
      for (std::size_t i = 0; i < da.size(); ++i) da.data[i] += gy.data[i];
      for (std::size_t i = 0; i < db.size(); ++i) db.data[i] += gy.data[da.size() + i];
    });
  }

  // Runs the recorded backward closures from `out`, seeded with `seed`.
  void backward(Var out, const Tensor& seed, Gradients& g) {
    if (!record_) throw ModelError("backward on a tape recorded without gradients");
    grads_.assign(nodes_.size(), Tensor());
    require_same_shape(value(out), seed, "backward seed");
    grads_[static_cast<std::size_t>(out)] = seed;
    for (Var v = out; v >= 0; --v) {
      auto& node = nodes_[static_cast<std::size_t>(v)];
      if (!node.backward || grads_[static_cast<std::size_t>(v)].data.empty()) continue;
      node.backward(v, g);
    }
  }

 private:
  using Backward = std::function<void(Var, Gradients&)>;
  struct Node {
    Tensor value;
    Backward backward;
  };

  Var push(Tensor t, Backward bw) {
    nodes_.push_back({std::move(t), std::move(bw)});
    return static_cast<Var>(nodes_.size() - 1);
  }

  const Parameter& param(int i) const { return (*params_)[static_cast<std::size_t>(i)]; }

  const Tensor& grad(Var v) const { return grads_[static_cast<std::size_t>(v)]; }

  Tensor& grad_for(Var v) {
    Tensor& g = grads_[static_cast<std::size_t>(v)];
    if (g.data.empty()) {
      const Tensor& val = value(v);
      g = Tensor(val.channels, val.height, val.width);
    }
    return g;
  }

  static void im2col(const Tensor& in, std::vector<float>& cols) {
    const int h = in.height, w = in.width, hw = h * w;
    for (int c = 0; c < in.channels; ++c)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          float* row = cols.data() + static_cast<std::size_t>((c * 9 + ky * 3 + kx)) * hw;
          const int x_lo = std::max(0, 1 - kx), x_hi = std::min(w, w + 1 - kx);
          for (int y = 0; y < h; ++y) {
            float* dst = row + y * w;
            const int sy = y + ky - 1;
            if (sy < 0 || sy >= h) {
              std::fill(dst, dst + w, 0.0f);
              continue;
            }
            const float* src = &in.data[(static_cast<std::size_t>(c) * h + sy) * w] + (kx - 1);
            std::fill(dst, dst + x_lo, 0.0f);
            std::copy(src + x_lo, src + x_hi, dst + x_lo);
            std::fill(dst + x_hi, dst + w, 0.0f);
          }
        }
  }

  const std::vector<Parameter>* params_;
  bool record_;
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

}  // namespace solidmark::nn
