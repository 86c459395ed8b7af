#include "simprop/autograd.hpp"

#include <algorithm>
#include <cmath>

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

#include "simprop/rng.hpp"

namespace simprop {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ValidationError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
  }
}

Tensor scaled(const Tensor& t, float s) {
  Tensor out = t;
  for (float& v : out.data()) v *= s;
  return out;
}

struct ConvGeometry {
  int c_in, h, w, c_out, k, out_h, out_w;
  Conv2dOptions opts;

  int patch() const { return c_in * k * k; }
  int positions() const { return out_h * out_w; }
};

// cols is (C_in*k*k) x (out_h*out_w), row-major.
void im2col(const float* in, const ConvGeometry& g, float* cols) {
  const int n = g.positions();
  for (int ci = 0; ci < g.c_in; ++ci) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        float* row = cols + static_cast<std::size_t>((ci * g.k + ky) * g.k + kx) * n;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.opts.stride - g.opts.padding + ky * g.opts.dilation;
          float* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.out_w, 0.0f);
            continue;
          }
          const float* src = in + (static_cast<std::size_t>(ci) * g.h + iy) * g.w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.opts.stride - g.opts.padding + kx * g.opts.dilation;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im_add(const float* cols, const ConvGeometry& g, float* in_grad) {
  const int n = g.positions();
  for (int ci = 0; ci < g.c_in; ++ci) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const float* row = cols + static_cast<std::size_t>((ci * g.k + ky) * g.k + kx) * n;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.opts.stride - g.opts.padding + ky * g.opts.dilation;
          if (iy < 0 || iy >= g.h) continue;
          float* dst = in_grad + (static_cast<std::size_t>(ci) * g.h + iy) * g.w;
          const float* src = row + oy * g.out_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.opts.stride - g.opts.padding + kx * g.opts.dilation;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

// --- Var / Tape --------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(*this); }
const Tensor& Var::grad() const { return tape_->grad(*this); }
bool Var::requires_grad() const { return tape_->requires_grad(*this); }

Tape::Node& Tape::node(const Var& v) {
  if (v.tape_ != this || v.id_ < 0 || static_cast<std::size_t>(v.id_) >= nodes_.size()) {
    throw ValidationError("variable does not belong to this tape");
  }
  return nodes_[static_cast<std::size_t>(v.id_)];
}

const Tape::Node& Tape::node(const Var& v) const { return const_cast<Tape*>(this)->node(v); }

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, true, {}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Tensor value, std::vector<Var> parents, BackwardFn backward) {
  bool needs = false;
  for (const Var& p : parents) needs = needs || node(p).requires_grad;
  nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : BackwardFn{}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

const Tensor& Tape::value(const Var& v) const { return node(v).value; }

bool Tape::requires_grad(const Var& v) const { return node(v).requires_grad; }

Tensor& Tape::grad_buffer(const Var& v) {
  Node& n = node(v);
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0f);
  return n.grad;
}

const Tensor& Tape::grad(const Var& v) { return grad_buffer(v); }

void Tape::note_branches(std::uint64_t digest) { branch_digest_ = mix_seed(branch_digest_ ^ digest, nodes_.size()); }

void Tape::accumulate(const Var& v, const Tensor& g) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  Tensor& buf = grad_buffer(v);
  require_same_shape(buf, g, "gradient accumulation");
  float* dst = buf.ptr();
  const float* src = g.ptr();
  for (std::size_t i = 0; i < buf.size(); ++i) dst[i] += src[i];
}

void Tape::backward(Var root) {
  Node& r = node(root);
  if (r.value.size() != 1) {
    throw ValidationError("backward() needs a scalar root, got " + shape_str(r.value.shape()));
  }
  if (!r.requires_grad) return;
  grad_buffer(root)[0] += 1.0f;
  for (int id = root.id_; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, n.grad);
  }
}

// --- convolution -------------------------------------------------------------

Var conv2d(const Var& input, const Var& kernel, const std::optional<Var>& bias, Conv2dOptions opts) {
  const Tensor& x = input.value();
  const Tensor& w = kernel.value();
  require_rank(x, 3, "conv2d input");
  require_rank(w, 4, "conv2d kernel");
  if (w.dim(1) != x.dim(0)) {
    throw ValidationError("conv2d: kernel expects " + std::to_string(w.dim(1)) + " input channels, input has " +
                          std::to_string(x.dim(0)));
  }
  if (w.dim(2) != w.dim(3) || w.dim(2) % 2 == 0) {
    throw ValidationError("conv2d: kernel must be square with odd size, got " + shape_str(w.shape()));
  }
  if (opts.stride < 1 || opts.dilation < 1 || opts.padding < 0) {
    throw ValidationError("conv2d: stride and dilation must be >= 1 and padding >= 0");
  }
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), w.dim(0), w.dim(2), 0, 0, opts};
  const int span = opts.dilation * (g.k - 1) + 1;
  const int num_h = g.h + 2 * opts.padding - span;
  const int num_w = g.w + 2 * opts.padding - span;
  if (num_h < 0 || num_w < 0) {
    throw ValidationError("conv2d: non-positive output size for input " + shape_str(x.shape()));
  }
  g.out_h = num_h / opts.stride + 1;
  g.out_w = num_w / opts.stride + 1;
  if (bias) {
    const Tensor& b = bias->value();
    if (b.rank() != 1 || b.dim(0) != g.c_out) {
      throw ValidationError("conv2d: bias shape " + shape_str(b.shape()) + " does not match kernel");
    }
  }

  Tensor cols({g.patch(), g.positions()});
  im2col(x.ptr(), g, cols.ptr());
  Tensor out({g.c_out, g.out_h, g.out_w});
  MapMat(out.ptr(), g.c_out, g.positions()).noalias() =
      MapConstMat(w.ptr(), g.c_out, g.patch()) * MapConstMat(cols.ptr(), g.patch(), g.positions());
  if (bias) {
    const Tensor& b = bias->value();
    for (int co = 0; co < g.c_out; ++co) {
      float* row = out.ptr() + static_cast<std::size_t>(co) * g.positions();
      for (int i = 0; i < g.positions(); ++i) row[i] += b[static_cast<std::size_t>(co)];
    }
  }

  std::vector<Var> parents{input, kernel};
  if (bias) parents.push_back(*bias);
  Tape& tape = input.tape();
  return tape.record(std::move(out), parents,
                     [input, kernel, bias, g, cols = std::move(cols)](Tape& t, const Tensor& gout) {
                       MapConstMat go(gout.ptr(), g.c_out, g.positions());
                       if (t.requires_grad(kernel)) {
                         MapMat(t.grad_buffer(kernel).ptr(), g.c_out, g.patch()).noalias() +=
                             go * MapConstMat(cols.ptr(), g.patch(), g.positions()).transpose();
                       }
                       if (bias && t.requires_grad(*bias)) {
                         Tensor& gb = t.grad_buffer(*bias);
                         for (int co = 0; co < g.c_out; ++co) gb[static_cast<std::size_t>(co)] += go.row(co).sum();
                       }
                       if (t.requires_grad(input)) {
                         RowMat gcols = MapConstMat(t.value(kernel).ptr(), g.c_out, g.patch()).transpose() * go;
                         col2im_add(gcols.data(), g, t.grad_buffer(input).ptr());
                       }
                     });
}

// --- pointwise / pooling ---------------------------------------------------------

Var relu(const Var& x) {
  Tensor out = x.value();
  std::uint64_t digest = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] > 0.0f) {
      digest += mix_seed(0x5eed, i);
    } else {
      out[i] = 0.0f;
    }
  }
  x.tape().note_branches(digest);
  return x.tape().record(std::move(out), {x}, [x](Tape& t, const Tensor& gout) {
    const Tensor& in = t.value(x);
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (in[i] > 0.0f) gx[i] += gout[i];
    }
  });
}

Var avg_pool(const Var& x, int factor) {
  const Tensor& in = x.value();
  require_rank(in, 3, "avg_pool input");
  if (factor < 1 || in.dim(1) % factor != 0 || in.dim(2) % factor != 0) {
    throw ValidationError("avg_pool: spatial size " + shape_str(in.shape()) + " not divisible by " +
                          std::to_string(factor));
  }
  const int c = in.dim(0), oh = in.dim(1) / factor, ow = in.dim(2) / factor;
  const float inv = 1.0f / static_cast<float>(factor * factor);
  Tensor out({c, oh, ow});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < oh; ++y) {
      for (int xx = 0; xx < ow; ++xx) {
        float s = 0.0f;
        for (int dy = 0; dy < factor; ++dy) {
          for (int dx = 0; dx < factor; ++dx) s += in.at(ch, y * factor + dy, xx * factor + dx);
        }
        out.at(ch, y, xx) = s * inv;
      }
    }
  }
  return x.tape().record(std::move(out), {x}, [x, factor, inv](Tape& t, const Tensor& gout) {
    Tensor& gx = t.grad_buffer(x);
    for (int ch = 0; ch < gout.dim(0); ++ch) {
      for (int y = 0; y < gout.dim(1); ++y) {
        for (int xx = 0; xx < gout.dim(2); ++xx) {
          const float gv = gout.at(ch, y, xx) * inv;
          for (int dy = 0; dy < factor; ++dy) {
            for (int dx = 0; dx < factor; ++dx) gx.at(ch, y * factor + dy, xx * factor + dx) += gv;
          }
        }
      }
    }
  });
}

Var global_avg_pool(const Var& x) {
  const Tensor& in = x.value();
  require_rank(in, 3, "global_avg_pool input");
  const int c = in.dim(0);
  const std::size_t hw = static_cast<std::size_t>(in.dim(1)) * in.dim(2);
  Tensor out({c});
  for (int ch = 0; ch < c; ++ch) {
    double s = 0.0;
    const float* p = in.ptr() + ch * hw;
    for (std::size_t i = 0; i < hw; ++i) s += p[i];
    out[static_cast<std::size_t>(ch)] = static_cast<float>(s / static_cast<double>(hw));
  }
  return x.tape().record(std::move(out), {x}, [x, hw](Tape& t, const Tensor& gout) {
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t ch = 0; ch < gout.size(); ++ch) {
      const float gv = gout[ch] / static_cast<float>(hw);
      float* p = gx.ptr() + ch * hw;
      for (std::size_t i = 0; i < hw; ++i) p[i] += gv;
    }
  });
}

namespace {

struct Tap {
  int i0, i1;
  float t;
};

std::vector<Tap> bilinear_taps(int in, int out) {
  std::vector<Tap> taps(static_cast<std::size_t>(out));
  for (int o = 0; o < out; ++o) {
    const double src = out == 1 ? 0.5 * (in - 1) : static_cast<double>(o) * (in - 1) / (out - 1);
    int i0 = static_cast<int>(std::floor(src));
    i0 = std::clamp(i0, 0, in - 1);
    const int i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, static_cast<float>(src - i0)};
  }
  return taps;
}

}  // namespace

Var bilinear_resize(const Var& x, int out_h, int out_w) {
  const Tensor& in = x.value();
  require_rank(in, 3, "bilinear_resize input");
  if (out_h < 1 || out_w < 1) throw ValidationError("bilinear_resize: output size must be >= 1");
  const int c = in.dim(0), h = in.dim(1), w = in.dim(2);
  if (h == out_h && w == out_w) {
    Tensor out = in;
    return x.tape().record(std::move(out), {x}, [x](Tape& t, const Tensor& gout) { t.accumulate(x, gout); });
  }
  auto ty = bilinear_taps(h, out_h);
  auto tx = bilinear_taps(w, out_w);
  Tensor out({c, out_h, out_w});
  for (int ch = 0; ch < c; ++ch) {
    for (int oy = 0; oy < out_h; ++oy) {
      const Tap& a = ty[static_cast<std::size_t>(oy)];
      for (int ox = 0; ox < out_w; ++ox) {
        const Tap& b = tx[static_cast<std::size_t>(ox)];
        const float top = in.at(ch, a.i0, b.i0) * (1.0f - b.t) + in.at(ch, a.i0, b.i1) * b.t;
        const float bot = in.at(ch, a.i1, b.i0) * (1.0f - b.t) + in.at(ch, a.i1, b.i1) * b.t;
        out.at(ch, oy, ox) = top * (1.0f - a.t) + bot * a.t;
      }
    }
  }
  return x.tape().record(std::move(out), {x}, [x, ty, tx](Tape& t, const Tensor& gout) {
    Tensor& gx = t.grad_buffer(x);
    for (int ch = 0; ch < gout.dim(0); ++ch) {
      for (int oy = 0; oy < gout.dim(1); ++oy) {
        const Tap& a = ty[static_cast<std::size_t>(oy)];
        for (int ox = 0; ox < gout.dim(2); ++ox) {
          const Tap& b = tx[static_cast<std::size_t>(ox)];
          const float g = gout.at(ch, oy, ox);
          gx.at(ch, a.i0, b.i0) += g * (1.0f - a.t) * (1.0f - b.t);
          gx.at(ch, a.i0, b.i1) += g * (1.0f - a.t) * b.t;
          gx.at(ch, a.i1, b.i0) += g * a.t * (1.0f - b.t);
          gx.at(ch, a.i1, b.i1) += g * a.t * b.t;
        }
      }
    }
  });
}

Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw ValidationError("concat_channels: no operands");
  int h = -1, w = -1;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    if (v.rank() == 3) {
      if (h < 0) {
        h = v.dim(1);
        w = v.dim(2);
      } else if (v.dim(1) != h || v.dim(2) != w) {
        throw ValidationError("concat_channels: spatial mismatch " + shape_str(v.shape()));
      }
    } else if (v.rank() != 1) {
      throw ValidationError("concat_channels: operands must be C x H x W maps or length-C vectors");
    }
  }
  if (h < 0) throw ValidationError("concat_channels: at least one operand must be a spatial map");
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  int channels = 0;
  for (const Var& p : parts) channels += p.value().dim(0);

  Tensor out({channels, h, w});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    if (v.rank() == 3) {
      std::copy(v.ptr(), v.ptr() + v.size(), out.ptr() + offset);
      offset += v.size();
    } else {
      for (std::size_t ch = 0; ch < v.size(); ++ch, offset += hw) {
        std::fill(out.ptr() + offset, out.ptr() + offset + hw, v[ch]);
      }
    }
  }
  return parts.front().tape().record(std::move(out), parts, [parts, hw](Tape& t, const Tensor& gout) {
    std::size_t off = 0;
    for (const Var& p : parts) {
      const Tensor& v = t.value(p);
      const std::size_t span = v.rank() == 3 ? v.size() : v.size() * hw;
      if (t.requires_grad(p)) {
        Tensor& g = t.grad_buffer(p);
        if (v.rank() == 3) {
          for (std::size_t i = 0; i < span; ++i) g[i] += gout[off + i];
        } else {
          for (std::size_t ch = 0; ch < v.size(); ++ch) {
            double s = 0.0;
            const float* src = gout.ptr() + off + ch * hw;
            for (std::size_t i = 0; i < hw; ++i) s += src[i];
            g[ch] += static_cast<float>(s);
          }
        }
      }
      off += span;
    }
  });
}

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, float eps) {
  const Tensor& in = x.value();
  require_rank(in, 3, "instance_norm input");
  const int c = in.dim(0);
  if (gamma.value().size() != static_cast<std::size_t>(c) || beta.value().size() != static_cast<std::size_t>(c)) {
    throw ValidationError("instance_norm: gamma/beta length must equal channel count " + std::to_string(c));
  }
  const std::size_t hw = static_cast<std::size_t>(in.dim(1)) * in.dim(2);
  Tensor xhat(in.shape());
  std::vector<float> inv_std(static_cast<std::size_t>(c));
  Tensor out(in.shape());
  for (int ch = 0; ch < c; ++ch) {
    const float* p = in.ptr() + ch * hw;
    double mean = 0.0;
    for (std::size_t i = 0; i < hw; ++i) mean += p[i];
    mean /= static_cast<double>(hw);
    double var = 0.0;
    for (std::size_t i = 0; i < hw; ++i) var += (p[i] - mean) * (p[i] - mean);
    var /= static_cast<double>(hw);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(ch)] = static_cast<float>(is);
    const float gm = gamma.value()[static_cast<std::size_t>(ch)];
    const float bt = beta.value()[static_cast<std::size_t>(ch)];
    float* xh = xhat.ptr() + ch * hw;
    float* o = out.ptr() + ch * hw;
    for (std::size_t i = 0; i < hw; ++i) {
      xh[i] = static_cast<float>((p[i] - mean) * is);
      o[i] = xh[i] * gm + bt;
    }
  }
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, hw, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, const Tensor& gout) {
        const std::size_t c = inv_std.size();
        const Tensor& gm = t.value(gamma);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const float* go = gout.ptr() + ch * hw;
          const float* xh = xhat.ptr() + ch * hw;
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t i = 0; i < hw; ++i) {
            sum_g += go[i];
            sum_gx += static_cast<double>(go[i]) * xh[i];
          }
          if (t.requires_grad(beta)) t.grad_buffer(beta)[ch] += static_cast<float>(sum_g);
          if (t.requires_grad(gamma)) t.grad_buffer(gamma)[ch] += static_cast<float>(sum_gx);
          if (t.requires_grad(x)) {
            float* gx = t.grad_buffer(x).ptr() + ch * hw;
            const double n = static_cast<double>(hw);
            const double k = static_cast<double>(gm[ch]) * inv_std[ch];
            const double mg = sum_g / n, mgx = sum_gx / n;
            for (std::size_t i = 0; i < hw; ++i) gx[i] += static_cast<float>(k * (go[i] - mg - xh[i] * mgx));
          }
        }
      });
}

Var cosine_sim_map(const Var& features, const Var& probe, float eps) {
  const Tensor& f = features.value();
  const Tensor& z = probe.value();
  require_rank(f, 3, "cosine_sim_map features");
  require_rank(z, 1, "cosine_sim_map probe");
  const int c = f.dim(0), h = f.dim(1), w = f.dim(2);
  if (z.dim(0) != c) throw ValidationError("cosine_sim_map: probe length does not match channel count");
  const std::size_t hw = static_cast<std::size_t>(h) * w;

  double zz = 0.0;
  for (float v : z.data()) zz += static_cast<double>(v) * v;
  const double zn = std::sqrt(zz);
  std::vector<double> dots(hw, 0.0), fnorm(hw, 0.0);
  for (int ch = 0; ch < c; ++ch) {
    const float* p = f.ptr() + ch * hw;
    const double zc = z[static_cast<std::size_t>(ch)];
    for (std::size_t i = 0; i < hw; ++i) {
      dots[i] += p[i] * zc;
      fnorm[i] += static_cast<double>(p[i]) * p[i];
    }
  }
  Tensor out({h, w});
  for (std::size_t i = 0; i < hw; ++i) {
    fnorm[i] = std::sqrt(fnorm[i]);
    out[i] = static_cast<float>(dots[i] / (fnorm[i] * zn + eps));
  }
  return features.tape().record(
      std::move(out), {features, probe},
      [features, probe, eps, hw, zn, dots = std::move(dots), fnorm = std::move(fnorm)](Tape& t, const Tensor& gout) {
        const Tensor& fv = t.value(features);
        const Tensor& zv = t.value(probe);
        const std::size_t c = zv.size();
        // s = dot / d, d = |f||z| + eps
        std::vector<double> coef_z(hw), coef_f(hw), coef_zz(hw);
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = fnorm[i] * zn + eps;
          const double g = gout[i];
          coef_z[i] = g / d;
          const double common = g * dots[i] / (d * d);
          coef_f[i] = fnorm[i] > 0.0 ? common * zn / fnorm[i] : 0.0;
          coef_zz[i] = zn > 0.0 ? common * fnorm[i] / zn : 0.0;
        }
        if (t.requires_grad(features)) {
          Tensor& gf = t.grad_buffer(features);
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double zc = zv[ch];
            const float* p = fv.ptr() + ch * hw;
            float* gp = gf.ptr() + ch * hw;
            for (std::size_t i = 0; i < hw; ++i) gp[i] += static_cast<float>(coef_z[i] * zc - coef_f[i] * p[i]);
          }
        }
        if (t.requires_grad(probe)) {
          Tensor& gz = t.grad_buffer(probe);
          double zz_scale = 0.0;
          for (std::size_t i = 0; i < hw; ++i) zz_scale += coef_zz[i];
          for (std::size_t ch = 0; ch < c; ++ch) {
            const float* p = fv.ptr() + ch * hw;
            double s = 0.0;
            for (std::size_t i = 0; i < hw; ++i) s += coef_z[i] * p[i];
            gz[ch] += static_cast<float>(s - zz_scale * zv[ch]);
          }
        }
      });
}

namespace {

void check_ce_inputs(const Tensor& l, const Tensor& target, const char* op) {
  require_rank(l, 3, op);
  require_rank(target, 2, op);
  if (l.dim(0) != 2 || l.dim(1) != target.dim(0) || l.dim(2) != target.dim(1)) {
    throw ValidationError(std::string(op) + ": logits " + shape_str(l.shape()) + " vs target " +
                          shape_str(target.shape()));
  }
  for (float v : target.data()) {
    if (v != 0.0f && v != 1.0f) throw ValidationError(std::string(op) + ": target values must be 0 or 1");
  }
}

// Per-pixel -log softmax at the target class and the foreground probability.
void ce_terms(const Tensor& l, const Tensor& target, std::vector<double>& loss, Tensor& probs1) {
  const std::size_t n = target.size();
  const float* l0 = l.ptr();
  const float* l1 = l.ptr() + n;
  loss.resize(n);
  probs1 = Tensor({static_cast<int>(n)});
  for (std::size_t i = 0; i < n; ++i) {
    const double a = l0[i], b = l1[i];
    const double m = std::max(a, b);
    const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
    loss[i] = lse - (target[i] == 1.0f ? b : a);
    probs1[i] = static_cast<float>(std::exp(b - lse));
  }
}

}  // namespace

Var softmax_cross_entropy(const Var& logits, const Tensor& target) {
  const Tensor& l = logits.value();
  check_ce_inputs(l, target, "softmax_cross_entropy");
  const std::size_t n = target.size();
  std::vector<double> loss;
  Tensor probs1;
  ce_terms(l, target, loss, probs1);
  double total = 0.0;
  for (double v : loss) total += v;
  Tensor out({1}, static_cast<float>(total / static_cast<double>(n)));
  return logits.tape().record(std::move(out), {logits},
                              [logits, target, n, probs1 = std::move(probs1)](Tape& t, const Tensor& gout) {
                                Tensor& g = t.grad_buffer(logits);
                                const float scale = gout[0] / static_cast<float>(n);
                                for (std::size_t i = 0; i < n; ++i) {
                                  // d/dl1 = p1 - y, d/dl0 = p0 - (1 - y) = -(p1 - y)
                                  const float d = probs1[i] - target[i];
                                  g[i] -= d * scale;
                                  g[n + i] += d * scale;
                                }
                              });
}

Var cross_entropy_map(const Var& logits, const Tensor& target) {
  const Tensor& l = logits.value();
  check_ce_inputs(l, target, "cross_entropy_map");
  const std::size_t n = target.size();
  std::vector<double> loss;
  Tensor probs1;
  ce_terms(l, target, loss, probs1);
  Tensor out(target.shape());
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(loss[i]);
  return logits.tape().record(std::move(out), {logits},
                              [logits, target, n, probs1 = std::move(probs1)](Tape& t, const Tensor& gout) {
                                Tensor& g = t.grad_buffer(logits);
                                for (std::size_t i = 0; i < n; ++i) {
                                  const float d = (probs1[i] - target[i]) * gout[i];
                                  g[i] -= d;
                                  g[n + i] += d;
                                }
                              });
}

Var masked_average(const Var& features, const Tensor& weights, float eps, bool raw) {
  const Tensor& f = features.value();
  require_rank(f, 3, "masked_average features");
  require_rank(weights, 2, "masked_average weights");
  if (weights.dim(0) != f.dim(1) || weights.dim(1) != f.dim(2)) {
    throw ValidationError("masked_average: weights " + shape_str(weights.shape()) + " vs features " +
                          shape_str(f.shape()));
  }
  const int c = f.dim(0);
  const std::size_t hw = weights.size();
  double denom = 0.0;
  if (raw) {
    denom = static_cast<double>(hw);
  } else {
    for (float v : weights.data()) denom += v;
    denom += eps;
  }
  Tensor out({c});
  for (int ch = 0; ch < c; ++ch) {
    const float* p = f.ptr() + ch * hw;
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += static_cast<double>(p[i]) * weights[i];
    out[static_cast<std::size_t>(ch)] = static_cast<float>(s / denom);
  }
  return features.tape().record(std::move(out), {features},
                                [features, weights, denom, hw](Tape& t, const Tensor& gout) {
                                  Tensor& g = t.grad_buffer(features);
                                  for (std::size_t ch = 0; ch < gout.size(); ++ch) {
                                    const double k = gout[ch] / denom;
                                    float* p = g.ptr() + ch * hw;
                                    for (std::size_t i = 0; i < hw; ++i) p[i] += static_cast<float>(k * weights[i]);
                                  }
                                });
}

Var mean_of(const std::vector<Var>& parts) {
  if (parts.empty()) throw ValidationError("mean_of: no operands");
  const Tensor& first = parts.front().value();
  for (const Var& p : parts) require_same_shape(first, p.value(), "mean_of");
  const double k = static_cast<double>(parts.size());
  std::vector<double> acc(first.size(), 0.0);
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
  }
  Tensor out(first.shape());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / k);
  return parts.front().tape().record(std::move(out), parts, [parts, k](Tape& t, const Tensor& gout) {
    const Tensor g = scaled(gout, static_cast<float>(1.0 / k));
    for (const Var& p : parts) t.accumulate(p, g);
  });
}

// --- elementwise -----------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& gout) {
    t.accumulate(a, gout);
    t.accumulate(b, gout);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& gout) {
    t.accumulate(a, gout);
    t.accumulate(b, scaled(gout, -1.0f));
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& gout) {
    const Tensor& av = t.value(a);
    const Tensor& bv2 = t.value(b);
    if (t.requires_grad(a)) {
      Tensor& g = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i] * bv2[i];
    }
    if (t.requires_grad(b)) {
      Tensor& g = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i] * av[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "div");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= bv[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& gout) {
    const Tensor& av = t.value(a);
    const Tensor& bv2 = t.value(b);
    if (t.requires_grad(a)) {
      Tensor& g = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i] / bv2[i];
    }
    if (t.requires_grad(b)) {
      Tensor& g = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= gout[i] * av[i] / (bv2[i] * bv2[i]);
    }
  });
}

Var affine(const Var& x, float scale, float shift) {
  Tensor out = x.value();
  for (float& v : out.data()) v = v * scale + shift;
  return x.tape().record(std::move(out), {x},
                         [x, scale](Tape& t, const Tensor& gout) { t.accumulate(x, scaled(gout, scale)); });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (float v : x.value().data()) s += v;
  return x.tape().record(Tensor({1}, static_cast<float>(s)), {x}, [x](Tape& t, const Tensor& gout) {
    Tensor& g = t.grad_buffer(x);
    for (float& v : g.data()) v += gout[0];
  });
}

}  // namespace simprop
