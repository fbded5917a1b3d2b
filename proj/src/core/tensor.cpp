#include "tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace cellsearch {

const char* error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return "configuration error";
    case ErrorKind::kShape: return "shape error";
    case ErrorKind::kUsage: return "usage error";
    case ErrorKind::kParse: return "parse error";
    case ErrorKind::kIo: return "i/o error";
    case ErrorKind::kCorrupt: return "corruption error";
    case ErrorKind::kMigration: return "migration error";
    case ErrorKind::kEvaluation: return "evaluation error";
    case ErrorKind::kRuntime: return "runtime error";
  }
  return "error";
}

std::string Shape::str() const {
  std::ostringstream os;
  os << n << "x" << c << "x" << h << "x" << w;
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape) : impl_(std::make_shared<detail::TensorImpl>()) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) throw ShapeError("negative dimension in " + shape.str());
  impl_->shape = shape;
  impl_->value.assign(shape.numel(), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : Tensor(shape) {
  if (values.size() != shape.numel()) {
    throw ShapeError("tensor " + shape.str() + " needs " + std::to_string(shape.numel()) + " values, got " +
                     std::to_string(values.size()));
  }
  impl_->value = std::move(values);
}

Tensor Tensor::full(Shape shape, double v) {
  Tensor t(shape);
  std::fill(t.impl_->value.begin(), t.impl_->value.end(), v);
  return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
  Tensor t(shape);
  for (double& v : t.impl_->value) v = stddev * rng.normal();
  return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(shape);
  for (double& v : t.impl_->value) v = rng.uniform(lo, hi);
  return t;
}

const Shape& Tensor::shape() const {
  static const Shape kEmpty{};
  return impl_ ? impl_->shape : kEmpty;
}

std::span<const double> Tensor::values() const {
  if (!impl_) return {};
  return impl_->value;
}

std::span<double> Tensor::values_mut() {
  if (!impl_) return {};
  return impl_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on non-scalar tensor " + shape().str());
  return impl_->value[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

std::span<const double> Tensor::grad() const {
  if (!impl_) return {};
  return impl_->grad;
}

Tensor Tensor::clone() const {
  if (!impl_) return {};
  return Tensor(impl_->shape, impl_->value);
}

void Tensor::fill(double v) { std::fill(impl_->value.begin(), impl_->value.end(), v); }

void Tensor::copy_from(const Tensor& other) {
  if (other.shape() != shape()) throw ShapeError("copy_from " + other.shape().str() + " into " + shape().str());
  impl_->value = other.impl_->value;
}

// ---------------------------------------------------------------------------
// Tape

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape::Scope::Scope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
Tape::Scope::~Scope() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

bool Tape::tracking(std::initializer_list<const Tensor*> inputs) {
  if (!g_active_tape) return false;
  for (const Tensor* t : inputs) {
    if (t && t->requires_grad()) return true;
  }
  return false;
}

bool Tape::tracking(std::span<const Tensor> inputs) {
  if (!g_active_tape) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
}

void Tape::record(std::vector<Tensor> inputs, Tensor& output, std::function<void()> backward) {
  Entry e;
  e.inputs.reserve(inputs.size());
  for (auto& t : inputs) e.inputs.push_back(t.impl_ptr());
  output.impl()->requires_grad = true;
  output.impl()->is_leaf = false;
  e.output = output.impl_ptr();
  e.backward = std::move(backward);
  entries_.push_back(std::move(e));
}

Gradients Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) throw UsageError("backward requires a scalar loss, got " + loss.shape().str());
  auto reset = [](detail::TensorImpl* t) { t->grad.assign(t->value.size(), 0.0); };
  for (auto& e : entries_) {
    reset(e.output.get());
    for (auto& in : e.inputs) {
      if (in->requires_grad) reset(in.get());
    }
  }
  detail::TensorImpl* root = loss.impl();
  if (root->grad.size() != 1) root->grad.assign(1, 0.0);
  root->grad[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();

  Gradients out;
  for (auto& e : entries_) {
    for (auto& in : e.inputs) {
      if (in->is_leaf && in->requires_grad && !out.grads_.count(in.get())) {
        out.grads_.emplace(in.get(), in->grad);
        out.keep_alive_.push_back(in);
      }
    }
  }
  return out;
}

std::span<const double> Gradients::of(const Tensor& t) const {
  auto it = grads_.find(t.impl());
  if (it == grads_.end()) return {};
  return it->second;
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
int ceil_div(int a, int b) { return -floor_div(-a, b); }

// Output indices o in [0, out_len) with 0 <= o*stride - pad + offset < in_len.
std::pair<int, int> valid_range(int in_len, int out_len, int stride, int pad, int offset) {
  const int lo = std::max(0, ceil_div(pad - offset, stride));
  const int hi = std::min(out_len - 1, floor_div(in_len - 1 + pad - offset, stride));
  return {lo, hi};
}

// Input indices i in [0, in_len) whose scatter target i*stride - pad + offset lies in [0, out_len).
std::pair<int, int> scatter_range(int in_len, int out_len, int stride, int pad, int offset) {
  const int lo = std::max(0, ceil_div(pad - offset, stride));
  const int hi = std::min(in_len - 1, floor_div(out_len - 1 + pad - offset, stride));
  return {lo, hi};
}

struct ConvGeom {
  int N, C, H, W, O, Ho, Wo;
};

// Shared loop nest for conv2d forward/backward. `Visit` receives
// (y_row, x_row, weight_ref, ox_lo, ox_hi, x_offset) and does the inner loop.
template <typename Visit>
void conv_loops(const ConvGeom& g, const ConvSpec& s, Visit&& visit) {
  const int opg = s.out_channels / s.groups;
  const int ipg = s.in_channels_per_group;
  for (int n = 0; n < g.N; ++n) {
    for (int oc = 0; oc < g.O; ++oc) {
      const int grp = oc / opg;
      for (int icg = 0; icg < ipg; ++icg) {
        const int ic = grp * ipg + icg;
        const size_t x_plane = (static_cast<size_t>(n) * g.C + ic) * g.H * g.W;
        const size_t y_plane = (static_cast<size_t>(n) * g.O + oc) * g.Ho * g.Wo;
        const size_t w_base = (static_cast<size_t>(oc) * ipg + icg) * s.kh * s.kw;
        for (int ky = 0; ky < s.kh; ++ky) {
          auto [oy_lo, oy_hi] = valid_range(g.H, g.Ho, s.stride, s.padding, ky * s.dilation);
          for (int oy = oy_lo; oy <= oy_hi; ++oy) {
            const int iy = oy * s.stride - s.padding + ky * s.dilation;
            for (int kx = 0; kx < s.kw; ++kx) {
              auto [ox_lo, ox_hi] = valid_range(g.W, g.Wo, s.stride, s.padding, kx * s.dilation);
              if (ox_lo > ox_hi) continue;
              visit(y_plane + static_cast<size_t>(oy) * g.Wo, x_plane + static_cast<size_t>(iy) * g.W,
                    w_base + ky * s.kw + kx, ox_lo, ox_hi, kx * s.dilation - s.padding);
            }
          }
        }
      }
    }
  }
}

void check_conv_inputs(const Tensor& x, const ConvSpec& spec, const Tensor& weight, const char* what) {
  if (spec.stride < 1 || spec.dilation < 1 || spec.groups < 1 || spec.padding < 0) {
    throw ConfigError(std::string(what) + ": stride, dilation and groups must be positive, padding non-negative");
  }
  if (spec.out_channels % spec.groups != 0) {
    throw ConfigError(std::string(what) + ": out_channels " + std::to_string(spec.out_channels) +
                      " not divisible by groups " + std::to_string(spec.groups));
  }
  if (x.shape().c != spec.in_channels()) {
    throw ConfigError(std::string(what) + ": input has " + std::to_string(x.shape().c) + " channels, spec expects " +
                     std::to_string(spec.in_channels()) + " (in_channels_per_group " +
                     std::to_string(spec.in_channels_per_group) + " x groups " + std::to_string(spec.groups) + ")");
  }
  if (weight.shape() != spec.weight_shape()) {
    throw ConfigError(std::string(what) + ": weight " + weight.shape().str() + " != expected " +
                     spec.weight_shape().str());
  }
}

}  // namespace

int ConvSpec::output_size(int in, int k) const {
  return floor_div(in + 2 * padding - dilation * (k - 1) - 1, stride) + 1;
}

ConvSpec make_conv_spec(int in_ch, int out_ch, int k, int stride, int padding, int dilation, int groups) {
  if (groups < 1 || in_ch % groups != 0) {
    throw ConfigError("in_channels " + std::to_string(in_ch) + " not divisible by groups " + std::to_string(groups));
  }
  ConvSpec s;
  s.out_channels = out_ch;
  s.in_channels_per_group = in_ch / groups;
  s.kh = k;
  s.kw = k;
  s.stride = stride;
  s.padding = padding;
  s.dilation = dilation;
  s.groups = groups;
  return s;
}

Tensor conv2d(const Tensor& x, const ConvSpec& spec, const Tensor& weight, const Tensor* bias) {
  check_conv_inputs(x, spec, weight, "conv2d");
  const Shape& xs = x.shape();
  const int Ho = spec.output_size(xs.h, spec.kh);
  const int Wo = spec.output_size(xs.w, spec.kw);
  if (Ho < 1 || Wo < 1) {
    throw ShapeError("conv2d: output spatial " + std::to_string(Ho) + "x" + std::to_string(Wo) + " from input " +
                     xs.str());
  }
  if (bias && bias->defined() && bias->numel() != static_cast<size_t>(spec.out_channels)) {
    throw ShapeError("conv2d: bias " + bias->shape().str() + " does not match out_channels " +
                     std::to_string(spec.out_channels));
  }
  const bool has_bias = bias && bias->defined();
  const ConvGeom g{xs.n, xs.c, xs.h, xs.w, spec.out_channels, Ho, Wo};
  Tensor y({xs.n, spec.out_channels, Ho, Wo});
  double* yv = y.values_mut().data();
  if (has_bias) {
    const auto b = bias->values();
    const size_t plane = static_cast<size_t>(Ho) * Wo;
    for (int n = 0; n < xs.n; ++n) {
      for (int o = 0; o < spec.out_channels; ++o) {
        std::fill_n(yv + (static_cast<size_t>(n) * spec.out_channels + o) * plane, plane, b[o]);
      }
    }
  }
  {
    const double* xv = x.values().data();
    const double* wv = weight.values().data();
    const int stride = spec.stride;
    conv_loops(g, spec, [&](size_t yrow, size_t xrow, size_t widx, int lo, int hi, int off) {
      const double wgt = wv[widx];
      double* yr = yv + yrow;
      const double* xr = xv + xrow + off;
      for (int ox = lo; ox <= hi; ++ox) yr[ox] += wgt * xr[ox * stride];
    });
  }

  std::vector<Tensor> ins{x, weight};
  if (has_bias) ins.push_back(*bias);
  if (Tape::tracking(ins)) {
    auto xi = x.impl_ptr();
    auto wi = weight.impl_ptr();
    auto bi = has_bias ? bias->impl_ptr() : nullptr;
    auto yi = y.impl();
    Tape::active()->record(ins, y, [xi, wi, bi, yi, g, spec]() {
      const double* gy = yi->grad.data();
      const int stride = spec.stride;
      if (xi->requires_grad || wi->requires_grad) {
        const double* xv = xi->value.data();
        const double* wv = wi->value.data();
        double* gx = xi->requires_grad ? xi->grad.data() : nullptr;
        double* gw = wi->requires_grad ? wi->grad.data() : nullptr;
        conv_loops(g, spec, [&](size_t yrow, size_t xrow, size_t widx, int lo, int hi, int off) {
          const double* gyr = gy + yrow;
          if (gx) {
            const double wgt = wv[widx];
            double* gxr = gx + xrow + off;
            for (int ox = lo; ox <= hi; ++ox) gxr[ox * stride] += wgt * gyr[ox];
          }
          if (gw) {
            const double* xr = xv + xrow + off;
            double acc = 0.0;
            for (int ox = lo; ox <= hi; ++ox) acc += gyr[ox] * xr[ox * stride];
            gw[widx] += acc;
          }
        });
      }
      if (bi && bi->requires_grad) {
        const size_t plane = static_cast<size_t>(g.Ho) * g.Wo;
        for (int n = 0; n < g.N; ++n) {
          for (int o = 0; o < g.O; ++o) {
            const double* p = gy + (static_cast<size_t>(n) * g.O + o) * plane;
            double acc = 0.0;
            for (size_t i = 0; i < plane; ++i) acc += p[i];
            bi->grad[o] += acc;
          }
        }
      }
    });
  }
  return y;
}

namespace {

// y[n, o, iy*s - p + ky*d, ix*s - p + kx*d] += x[n, c, iy, ix] * w[o, c, ky, kx]
template <typename Visit>
void tconv_loops(const ConvGeom& g, const ConvSpec& s, Visit&& visit) {
  for (int n = 0; n < g.N; ++n) {
    for (int o = 0; o < g.O; ++o) {
      for (int c = 0; c < g.C; ++c) {
        const size_t x_plane = (static_cast<size_t>(n) * g.C + c) * g.H * g.W;
        const size_t y_plane = (static_cast<size_t>(n) * g.O + o) * g.Ho * g.Wo;
        const size_t w_base = (static_cast<size_t>(o) * g.C + c) * s.kh * s.kw;
        for (int ky = 0; ky < s.kh; ++ky) {
          auto [iy_lo, iy_hi] = scatter_range(g.H, g.Ho, s.stride, s.padding, ky * s.dilation);
          for (int iy = iy_lo; iy <= iy_hi; ++iy) {
            const int oy = iy * s.stride - s.padding + ky * s.dilation;
            for (int kx = 0; kx < s.kw; ++kx) {
              auto [ix_lo, ix_hi] = scatter_range(g.W, g.Wo, s.stride, s.padding, kx * s.dilation);
              if (ix_lo > ix_hi) continue;
              visit(y_plane + static_cast<size_t>(oy) * g.Wo + (kx * s.dilation - s.padding),
                    x_plane + static_cast<size_t>(iy) * g.W, w_base + ky * s.kw + kx, ix_lo, ix_hi);
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor transposed_conv2d(const Tensor& x, const ConvSpec& spec, const Tensor& weight) {
  if (spec.groups != 1) throw ConfigError("transposed_conv2d: only groups = 1 is supported");
  check_conv_inputs(x, spec, weight, "transposed_conv2d");
  const Shape& xs = x.shape();
  const int Ho = (xs.h - 1) * spec.stride - 2 * spec.padding + spec.dilation * (spec.kh - 1) + 1;
  const int Wo = (xs.w - 1) * spec.stride - 2 * spec.padding + spec.dilation * (spec.kw - 1) + 1;
  if (Ho < 1 || Wo < 1 || Ho % xs.h != 0 || Wo % xs.w != 0 || Ho / xs.h != Wo / xs.w) {
    throw ConfigError("transposed_conv2d: output " + std::to_string(Ho) + "x" + std::to_string(Wo) +
                      " is not an integral upscaling of input " + std::to_string(xs.h) + "x" + std::to_string(xs.w));
  }
  const ConvGeom g{xs.n, xs.c, xs.h, xs.w, spec.out_channels, Ho, Wo};
  Tensor y({xs.n, spec.out_channels, Ho, Wo});
  {
    double* yv = y.values_mut().data();
    const double* xv = x.values().data();
    const double* wv = weight.values().data();
    const int stride = spec.stride;
    tconv_loops(g, spec, [&](size_t yrow, size_t xrow, size_t widx, int lo, int hi) {
      const double wgt = wv[widx];
      double* yr = yv + yrow;
      const double* xr = xv + xrow;
      for (int ix = lo; ix <= hi; ++ix) yr[ix * stride] += wgt * xr[ix];
    });
  }
  if (Tape::tracking({&x, &weight})) {
    auto xi = x.impl_ptr();
    auto wi = weight.impl_ptr();
    auto yi = y.impl();
    Tape::active()->record({x, weight}, y, [xi, wi, yi, g, spec]() {
      const double* gy = yi->grad.data();
      const double* xv = xi->value.data();
      const double* wv = wi->value.data();
      double* gx = xi->requires_grad ? xi->grad.data() : nullptr;
      double* gw = wi->requires_grad ? wi->grad.data() : nullptr;
      const int stride = spec.stride;
      tconv_loops(g, spec, [&](size_t yrow, size_t xrow, size_t widx, int lo, int hi) {
        const double* gyr = gy + yrow;
        if (gx) {
          const double wgt = wv[widx];
          double* gxr = gx + xrow;
          for (int ix = lo; ix <= hi; ++ix) gxr[ix] += wgt * gyr[ix * stride];
        }
        if (gw) {
          const double* xr = xv + xrow;
          double acc = 0.0;
          for (int ix = lo; ix <= hi; ++ix) acc += gyr[ix * stride] * xr[ix];
          gw[widx] += acc;
        }
      });
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Pooling

Tensor pool2d(const Tensor& x, PoolKind kind, int k, int stride, int padding) {
  if (k < 1 || stride < 1 || padding < 0) throw ConfigError("pool2d: invalid window geometry");
  const Shape& xs = x.shape();
  const int Ho = floor_div(xs.h + 2 * padding - k, stride) + 1;
  const int Wo = floor_div(xs.w + 2 * padding - k, stride) + 1;
  if (Ho < 1 || Wo < 1) throw ShapeError("pool2d: empty output from input " + xs.str());
  Tensor y({xs.n, xs.c, Ho, Wo});
  const size_t planes = static_cast<size_t>(xs.n) * xs.c;
  const double* xv = x.values().data();
  double* yv = y.values_mut().data();
  const double inv = 1.0 / (k * k);
  std::shared_ptr<std::vector<int>> argmax;
  if (kind == PoolKind::kMax) argmax = std::make_shared<std::vector<int>>(y.numel(), -1);

  for (size_t p = 0; p < planes; ++p) {
    const double* xp = xv + p * xs.h * xs.w;
    for (int oy = 0; oy < Ho; ++oy) {
      const int y0 = oy * stride - padding;
      for (int ox = 0; ox < Wo; ++ox) {
        const int x0 = ox * stride - padding;
        const size_t yi = (p * Ho + oy) * Wo + ox;
        if (kind == PoolKind::kAvg) {
          double acc = 0.0;
          for (int iy = std::max(0, y0); iy < std::min(xs.h, y0 + k); ++iy) {
            for (int ix = std::max(0, x0); ix < std::min(xs.w, x0 + k); ++ix) acc += xp[iy * xs.w + ix];
          }
          yv[yi] = acc * inv;
        } else {
          double best = -std::numeric_limits<double>::infinity();
          int best_idx = -1;
          for (int iy = std::max(0, y0); iy < std::min(xs.h, y0 + k); ++iy) {
            for (int ix = std::max(0, x0); ix < std::min(xs.w, x0 + k); ++ix) {
              const double v = xp[iy * xs.w + ix];
              if (v > best) {
                best = v;
                best_idx = iy * xs.w + ix;
              }
            }
          }
          yv[yi] = best_idx >= 0 ? best : 0.0;
          (*argmax)[yi] = best_idx;
        }
      }
    }
  }

  if (Tape::tracking({&x})) {
    auto xi = x.impl_ptr();
    auto yo = y.impl();
    Tape::active()->record({x}, y, [xi, yo, xs, Ho, Wo, kind, k, stride, padding, inv, argmax]() {
      const size_t planes = static_cast<size_t>(xs.n) * xs.c;
      const double* gy = yo->grad.data();
      double* gx = xi->grad.data();
      for (size_t p = 0; p < planes; ++p) {
        double* gxp = gx + p * xs.h * xs.w;
        for (int oy = 0; oy < Ho; ++oy) {
          const int y0 = oy * stride - padding;
          for (int ox = 0; ox < Wo; ++ox) {
            const int x0 = ox * stride - padding;
            const size_t yi = (p * Ho + oy) * Wo + ox;
            if (kind == PoolKind::kAvg) {
              const double gv = gy[yi] * inv;
              for (int iy = std::max(0, y0); iy < std::min(xs.h, y0 + k); ++iy) {
                for (int ix = std::max(0, x0); ix < std::min(xs.w, x0 + k); ++ix) gxp[iy * xs.w + ix] += gv;
              }
            } else if ((*argmax)[yi] >= 0) {
              gxp[(*argmax)[yi]] += gy[yi];
            }
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Bilinear resize

namespace {

struct Tap {
  int i0;
  int i1;
  double frac;
};

std::vector<Tap> bilinear_taps(int in_len, int out_len, int num, int den) {
  std::vector<Tap> taps(out_len);
  const double scale = static_cast<double>(num) / den;
  for (int o = 0; o < out_len; ++o) {
    double src = (o + 0.5) / scale - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in_len - 1) i0 = in_len - 1;
    const int i1 = std::min(i0 + 1, in_len - 1);
    double frac = src - i0;
    if (i1 == i0) frac = 0.0;
    taps[o] = {i0, i1, frac};
  }
  return taps;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, int num, int den) {
  if (num < 1 || den < 1) throw ConfigError("bilinear_resize: scale must be a positive rational");
  const Shape& xs = x.shape();
  if ((static_cast<long>(xs.h) * num) % den != 0 || (static_cast<long>(xs.w) * num) % den != 0) {
    throw ConfigError("bilinear_resize: " + std::to_string(xs.h) + "x" + std::to_string(xs.w) + " scaled by " +
                      std::to_string(num) + "/" + std::to_string(den) + " is not integral");
  }
  const int Ho = xs.h * num / den;
  const int Wo = xs.w * num / den;
  Tensor y({xs.n, xs.c, Ho, Wo});
  auto ty = std::make_shared<std::vector<Tap>>(bilinear_taps(xs.h, Ho, num, den));
  auto tx = std::make_shared<std::vector<Tap>>(bilinear_taps(xs.w, Wo, num, den));
  const size_t planes = static_cast<size_t>(xs.n) * xs.c;
  const double* xv = x.values().data();
  double* yv = y.values_mut().data();
  for (size_t p = 0; p < planes; ++p) {
    const double* xp = xv + p * xs.h * xs.w;
    double* yp = yv + p * Ho * Wo;
    for (int oy = 0; oy < Ho; ++oy) {
      const Tap a = (*ty)[oy];
      const double* r0 = xp + a.i0 * xs.w;
      const double* r1 = xp + a.i1 * xs.w;
      for (int ox = 0; ox < Wo; ++ox) {
        const Tap b = (*tx)[ox];
        const double top = r0[b.i0] + b.frac * (r0[b.i1] - r0[b.i0]);
        const double bot = r1[b.i0] + b.frac * (r1[b.i1] - r1[b.i0]);
        yp[oy * Wo + ox] = top + a.frac * (bot - top);
      }
    }
  }
  if (Tape::tracking({&x})) {
    auto xi = x.impl_ptr();
    auto yo = y.impl();
    Tape::active()->record({x}, y, [xi, yo, xs, Ho, Wo, ty, tx]() {
      const size_t planes = static_cast<size_t>(xs.n) * xs.c;
      const double* gy = yo->grad.data();
      double* gx = xi->grad.data();
      for (size_t p = 0; p < planes; ++p) {
        double* gp = gx + p * xs.h * xs.w;
        const double* gyp = gy + p * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          const Tap a = (*ty)[oy];
          for (int ox = 0; ox < Wo; ++ox) {
            const Tap b = (*tx)[ox];
            const double g = gyp[oy * Wo + ox];
            gp[a.i0 * xs.w + b.i0] += g * (1 - a.frac) * (1 - b.frac);
            gp[a.i0 * xs.w + b.i1] += g * (1 - a.frac) * b.frac;
            gp[a.i1 * xs.w + b.i0] += g * a.frac * (1 - b.frac);
            gp[a.i1 * xs.w + b.i1] += g * a.frac * b.frac;
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Channel plumbing

Tensor concat_channels(std::span<const Tensor> xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& s0 = xs[0].shape();
  int total = 0;
  for (const auto& t : xs) {
    const Shape& s = t.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w) {
      throw ShapeError("concat_channels: " + s.str() + " does not match " + s0.str() + " in batch/height/width");
    }
    total += s.c;
  }
  Tensor y({s0.n, total, s0.h, s0.w});
  const size_t plane = static_cast<size_t>(s0.h) * s0.w;
  double* yv = y.values_mut().data();
  std::vector<int> offsets;
  int off = 0;
  for (const auto& t : xs) {
    offsets.push_back(off);
    const int c = t.shape().c;
    for (int n = 0; n < s0.n; ++n) {
      std::copy_n(t.values().data() + static_cast<size_t>(n) * c * plane, c * plane,
                  yv + (static_cast<size_t>(n) * total + off) * plane);
    }
    off += c;
  }
  if (Tape::tracking(xs)) {
    std::vector<Tensor> ins(xs.begin(), xs.end());
    std::vector<std::shared_ptr<detail::TensorImpl>> impls;
    for (auto& t : ins) impls.push_back(t.impl_ptr());
    auto yo = y.impl();
    Tape::active()->record(ins, y, [impls, offsets, yo, s0, total, plane]() {
      for (size_t k = 0; k < impls.size(); ++k) {
        auto& in = impls[k];
        if (!in->requires_grad) continue;
        const int c = in->shape.c;
        for (int n = 0; n < s0.n; ++n) {
          const double* src = yo->grad.data() + (static_cast<size_t>(n) * total + offsets[k]) * plane;
          double* dst = in->grad.data() + static_cast<size_t>(n) * c * plane;
          for (size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return y;
}

Tensor slice_channels(const Tensor& x, int start, int count) {
  const Shape& s = x.shape();
  if (start < 0 || count < 0 || start + count > s.c) {
    throw ShapeError("slice_channels: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of range for " + s.str());
  }
  Tensor y({s.n, count, s.h, s.w});
  const size_t plane = static_cast<size_t>(s.h) * s.w;
  for (int n = 0; n < s.n; ++n) {
    std::copy_n(x.values().data() + (static_cast<size_t>(n) * s.c + start) * plane, count * plane,
                y.values_mut().data() + static_cast<size_t>(n) * count * plane);
  }
  if (Tape::tracking({&x})) {
    auto xi = x.impl_ptr();
    auto yo = y.impl();
    Tape::active()->record({x}, y, [xi, yo, s, start, count, plane]() {
      for (int n = 0; n < s.n; ++n) {
        const double* src = yo->grad.data() + static_cast<size_t>(n) * count * plane;
        double* dst = xi->grad.data() + (static_cast<size_t>(n) * s.c + start) * plane;
        for (size_t i = 0; i < count * plane; ++i) dst[i] += src[i];
      }
    });
  }
  return y;
}

std::vector<Tensor> split_channels(const Tensor& x, std::span<const int> sizes) {
  std::vector<Tensor> out;
  int start = 0;
  for (int c : sizes) {
    out.push_back(slice_channels(x, start, c));
    start += c;
  }
  if (start != x.shape().c) {
    throw ShapeError("split_channels: sizes sum to " + std::to_string(start) + ", tensor has " +
                     std::to_string(x.shape().c) + " channels");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor relu(const Tensor& x) {
  Tensor y(x.shape());
  const auto xv = x.values();
  auto yv = y.values_mut();
  for (size_t i = 0; i < xv.size(); ++i) yv[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  if (Tape::tracking({&x})) {
    auto xi = x.impl_ptr();
    auto yo = y.impl();
    Tape::active()->record({x}, y, [xi, yo]() {
      const size_t n = xi->value.size();
      for (size_t i = 0; i < n; ++i) {
        if (xi->value[i] > 0.0) xi->grad[i] += yo->grad[i];
      }
    });
  }
  return y;
}

Tensor add_n(std::span<const Tensor> xs) {
  if (xs.empty()) throw ShapeError("add_n: no inputs");
  const Shape& s0 = xs[0].shape();
  for (const auto& t : xs) {
    if (t.shape() != s0) throw ShapeError("add: " + t.shape().str() + " vs " + s0.str());
  }
  Tensor y = xs[0].clone();
  auto yv = y.values_mut();
  for (size_t k = 1; k < xs.size(); ++k) {
    const auto v = xs[k].values();
    for (size_t i = 0; i < v.size(); ++i) yv[i] += v[i];
  }
  if (Tape::tracking(xs)) {
    std::vector<Tensor> ins(xs.begin(), xs.end());
    std::vector<std::shared_ptr<detail::TensorImpl>> impls;
    for (auto& t : ins) impls.push_back(t.impl_ptr());
    auto yo = y.impl();
    Tape::active()->record(ins, y, [impls, yo]() {
      for (auto& in : impls) {
        if (!in->requires_grad) continue;
        for (size_t i = 0; i < in->grad.size(); ++i) in->grad[i] += yo->grad[i];
      }
    });
  }
  return y;
}

Tensor add(const Tensor& a, const Tensor& b) {
  const Tensor xs[2] = {a, b};
  return add_n(xs);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("sub: " + a.shape().str() + " vs " + b.shape().str());
  Tensor y(a.shape());
  auto yv = y.values_mut();
  const auto av = a.values();
  const auto bv = b.values();
  for (size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] - bv[i];
  if (Tape::tracking({&a, &b})) {
    auto ai = a.impl_ptr();
    auto bi = b.impl_ptr();
    auto yo = y.impl();
    Tape::active()->record({a, b}, y, [ai, bi, yo]() {
      const size_t n = yo->grad.size();
      if (ai->requires_grad) {
        for (size_t i = 0; i < n; ++i) ai->grad[i] += yo->grad[i];
      }
      if (bi->requires_grad) {
        for (size_t i = 0; i < n; ++i) bi->grad[i] -= yo->grad[i];
      }
    });
  }
  return y;
}

Tensor scalar_mul(const Tensor& x, double s) {
  Tensor y(x.shape());
  auto yv = y.values_mut();
  const auto xv = x.values();
  for (size_t i = 0; i < yv.size(); ++i) yv[i] = s * xv[i];
  if (Tape::tracking({&x})) {
    auto xi = x.impl_ptr();
    auto yo = y.impl();
    Tape::active()->record({x}, y, [xi, yo, s]() {
      for (size_t i = 0; i < yo->grad.size(); ++i) xi->grad[i] += s * yo->grad[i];
    });
  }
  return y;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Tensor y = Tensor::scalar(acc);
  if (Tape::tracking({&x})) {
    auto xi = x.impl_ptr();
    auto yo = y.impl();
    Tape::active()->record({x}, y, [xi, yo]() {
      const double g = yo->grad[0];
      for (double& gx : xi->grad) gx += g;
    });
  }
  return y;
}

Tensor sum_squares(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v * v;
  Tensor y = Tensor::scalar(acc);
  if (Tape::tracking({&x})) {
    auto xi = x.impl_ptr();
    auto yo = y.impl();
    Tape::active()->record({x}, y, [xi, yo]() {
      const double g = 2.0 * yo->grad[0];
      for (size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += g * xi->value[i];
    });
  }
  return y;
}

Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const Shape& s = x.shape();
  if (gamma.numel() != static_cast<size_t>(s.c) || beta.numel() != static_cast<size_t>(s.c)) {
    throw ShapeError("channel_affine: parameters must have " + std::to_string(s.c) + " elements");
  }
  Tensor y(s);
  const size_t plane = static_cast<size_t>(s.h) * s.w;
  const auto xv = x.values();
  auto yv = y.values_mut();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const size_t base = (static_cast<size_t>(n) * s.c + c) * plane;
      for (size_t i = 0; i < plane; ++i) yv[base + i] = xv[base + i] * gv[c] + bv[c];
    }
  }
  if (Tape::tracking({&x, &gamma, &beta})) {
    auto xi = x.impl_ptr();
    auto gi = gamma.impl_ptr();
    auto bi = beta.impl_ptr();
    auto yo = y.impl();
    Tape::active()->record({x, gamma, beta}, y, [xi, gi, bi, yo, s, plane]() {
      for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
          const size_t base = (static_cast<size_t>(n) * s.c + c) * plane;
          double sg = 0.0, sb = 0.0;
          for (size_t i = 0; i < plane; ++i) {
            const double g = yo->grad[base + i];
            if (xi->requires_grad) xi->grad[base + i] += g * gi->value[c];
            sg += g * xi->value[base + i];
            sb += g;
          }
          if (gi->requires_grad) gi->grad[c] += sg;
          if (bi->requires_grad) bi->grad[c] += sb;
        }
      }
    });
  }
  return y;
}

std::vector<double> softmax_vec(std::span<const double> v, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("softmax temperature must be positive");
  if (v.empty()) return {};
  const double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double z = 0.0;
  for (size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp((v[i] - mx) / temperature);
    z += out[i];
  }
  for (double& o : out) o /= z;
  return out;
}

Tensor softmax(const Tensor& logits, double temperature) {
  Tensor y(logits.shape(), softmax_vec(logits.values(), temperature));
  if (Tape::tracking({&logits})) {
    auto li = logits.impl_ptr();
    auto yo = y.impl();
    Tape::active()->record({logits}, y, [li, yo, temperature]() {
      double dot = 0.0;
      for (size_t i = 0; i < yo->value.size(); ++i) dot += yo->grad[i] * yo->value[i];
      for (size_t i = 0; i < yo->value.size(); ++i) {
        li->grad[i] += yo->value[i] * (yo->grad[i] - dot) / temperature;
      }
    });
  }
  return y;
}

Tensor weighted_sum(std::span<const Tensor> xs, const Tensor& weights) {
  if (xs.empty()) throw ShapeError("weighted_sum: no inputs");
  if (weights.numel() != xs.size()) {
    throw ShapeError("weighted_sum: " + std::to_string(xs.size()) + " inputs but " + std::to_string(weights.numel()) +
                     " weights");
  }
  const Shape& s0 = xs[0].shape();
  Tensor y(s0);
  auto yv = y.values_mut();
  const auto wv = weights.values();
  for (size_t k = 0; k < xs.size(); ++k) {
    if (xs[k].shape() != s0) throw ShapeError("weighted_sum: " + xs[k].shape().str() + " vs " + s0.str());
    const auto v = xs[k].values();
    const double wk = wv[k];
    for (size_t i = 0; i < v.size(); ++i) yv[i] += wk * v[i];
  }
  std::vector<Tensor> ins(xs.begin(), xs.end());
  ins.push_back(weights);
  if (Tape::tracking(ins)) {
    std::vector<std::shared_ptr<detail::TensorImpl>> impls;
    for (size_t k = 0; k < xs.size(); ++k) impls.push_back(xs[k].impl_ptr());
    auto wi = weights.impl_ptr();
    auto yo = y.impl();
    Tape::active()->record(ins, y, [impls, wi, yo]() {
      const auto& gy = yo->grad;
      for (size_t k = 0; k < impls.size(); ++k) {
        auto& in = impls[k];
        if (in->requires_grad) {
          const double wk = wi->value[k];
          for (size_t i = 0; i < gy.size(); ++i) in->grad[i] += wk * gy[i];
        }
        if (wi->requires_grad) {
          double acc = 0.0;
          for (size_t i = 0; i < gy.size(); ++i) acc += gy[i] * in->value[i];
          wi->grad[k] += acc;
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Gradient check

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor leaf = x.clone();
  leaf.set_requires_grad(true);
  std::vector<double> analytic;
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = f(leaf);
    Gradients g = tape.backward(loss);
    const auto gx = g.of(leaf);
    analytic.assign(gx.begin(), gx.end());
    if (analytic.empty()) analytic.assign(leaf.numel(), 0.0);
  }
  double worst = 0.0;
  Tensor probe = x.clone();
  for (size_t i = 0; i < probe.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = f(probe).item();
    probe[i] = orig - eps;
    const double fm = f(probe).item();
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

template <typename T>
void put_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw CorruptionError("tensor blob truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  const Shape& s = t.shape();
  put_le<uint32_t>(os, static_cast<uint32_t>(s.n));
  put_le<uint32_t>(os, static_cast<uint32_t>(s.c));
  put_le<uint32_t>(os, static_cast<uint32_t>(s.h));
  put_le<uint32_t>(os, static_cast<uint32_t>(s.w));
  for (double v : t.values()) put_le<double>(os, v);
  if (!os) throw IoError("failed writing tensor blob");
}

Tensor read_tensor(std::istream& is) {
  Shape s;
  s.n = static_cast<int>(get_le<uint32_t>(is));
  s.c = static_cast<int>(get_le<uint32_t>(is));
  s.h = static_cast<int>(get_le<uint32_t>(is));
  s.w = static_cast<int>(get_le<uint32_t>(is));
  if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0 || s.numel() > (size_t{1} << 32)) {
    throw CorruptionError("tensor blob header has implausible shape " + s.str());
  }
  std::vector<double> v(s.numel());
  for (double& d : v) d = get_le<double>(is);
  return Tensor(s, std::move(v));
}

std::vector<uint8_t> tensor_to_bytes(const Tensor& t) {
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  const std::string s = os.str();
  return {s.begin(), s.end()};
}

Tensor tensor_from_bytes(std::span<const uint8_t> bytes) {
  std::istringstream is(std::string(bytes.begin(), bytes.end()), std::ios::binary);
  Tensor t = read_tensor(is);
  if (is.peek() != std::char_traits<char>::eof()) throw CorruptionError("trailing bytes after tensor blob");
  return t;
}

}  // namespace cellsearch
