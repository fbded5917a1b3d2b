#include "ops.hpp"

#include <cmath>
#include <string>

namespace cellsearch {

std::string_view op_name(CandidateOpKind kind) {
  switch (kind) {
    case CandidateOpKind::kZero: return "none";
    case CandidateOpKind::kSkip: return "skip_connect";
    case CandidateOpKind::kAvgPool3: return "avg_pool_3x3";
    case CandidateOpKind::kMaxPool3: return "max_pool_3x3";
    case CandidateOpKind::kSepConv3: return "sep_conv_3x3";
    case CandidateOpKind::kSepConv5: return "sep_conv_5x5";
    case CandidateOpKind::kDilConv3: return "dil_conv_3x3";
    case CandidateOpKind::kDilConv5: return "dil_conv_5x5";
  }
  return "?";
}

CandidateOpKind op_from_name(std::string_view name) {
  for (CandidateOpKind k : kAllCandidateOps) {
    if (op_name(k) == name) return k;
  }
  throw ParseError("unknown operation '" + std::string(name) + "'");
}

namespace {

Tensor he_init(Shape s, int fan_in, Rng& rng) { return Tensor::randn(s, rng, std::sqrt(2.0 / fan_in)).set_requires_grad(true); }

void push_affine(OpInstance& op) {
  op.weights.push_back(Tensor::full({1, op.channels, 1, 1}, 1.0).set_requires_grad(true));
  op.weights.push_back(Tensor::zeros({1, op.channels, 1, 1}).set_requires_grad(true));
}

ConvSpec depthwise_spec(int c, int k, int stride, int dilation) {
  return make_conv_spec(c, c, k, stride, dilation * (k - 1) / 2, dilation, c);
}

// ReLU -> depthwise -> pointwise [-> affine]; consumes weights starting at `w`.
Tensor relu_dw_pw(const OpInstance& op, const Tensor& x, size_t& w, int k, int stride, int dilation) {
  const int c = op.channels;
  Tensor y = relu(x);
  y = conv2d(y, depthwise_spec(c, k, stride, dilation), op.weights[w++]);
  y = conv2d(y, make_conv_spec(c, c, 1), op.weights[w++]);
  if (op.affine) {
    y = channel_affine(y, op.weights[w], op.weights[w + 1]);
    w += 2;
  }
  return y;
}

int kernel_of(CandidateOpKind kind) {
  switch (kind) {
    case CandidateOpKind::kSepConv3:
    case CandidateOpKind::kDilConv3: return 3;
    case CandidateOpKind::kSepConv5:
    case CandidateOpKind::kDilConv5: return 5;
    default: return 1;
  }
}

}  // namespace

OpInstance make_op(CandidateOpKind kind, int channels, int stride, Rng& rng, bool affine) {
  if (channels < 1) throw ConfigError("candidate op needs at least one channel");
  if (stride != 1 && stride != 2) throw ConfigError("candidate op stride must be 1 or 2");
  OpInstance op{kind, channels, stride, affine, {}};
  const int c = channels;
  const int k = kernel_of(kind);
  switch (kind) {
    case CandidateOpKind::kZero:
    case CandidateOpKind::kAvgPool3:
    case CandidateOpKind::kMaxPool3: break;
    case CandidateOpKind::kSkip:
      if (stride == 2) op.weights.push_back(he_init({c, c, 1, 1}, c, rng));
      break;
    case CandidateOpKind::kSepConv3:
    case CandidateOpKind::kSepConv5:
      for (int rep = 0; rep < 2; ++rep) {
        op.weights.push_back(he_init({c, 1, k, k}, k * k, rng));
        op.weights.push_back(he_init({c, c, 1, 1}, c, rng));
        if (affine) push_affine(op);
      }
      break;
    case CandidateOpKind::kDilConv3:
    case CandidateOpKind::kDilConv5:
      op.weights.push_back(he_init({c, 1, k, k}, k * k, rng));
      op.weights.push_back(he_init({c, c, 1, 1}, c, rng));
      if (affine) push_affine(op);
      break;
  }
  return op;
}

Tensor apply_candidate(const OpInstance& op, const Tensor& x) {
  const Shape& s = x.shape();
  if (s.c != op.channels) {
    throw ShapeError("candidate op '" + std::string(op_name(op.kind)) + "' expects " + std::to_string(op.channels) +
                     " channels, input is " + s.str());
  }
  size_t w = 0;
  const int k = kernel_of(op.kind);
  switch (op.kind) {
    case CandidateOpKind::kZero: {
      const int ho = (s.h - 1) / op.stride + 1;
      const int wo = (s.w - 1) / op.stride + 1;
      return Tensor::zeros({s.n, s.c, ho, wo});
    }
    case CandidateOpKind::kSkip:
      if (op.stride == 1) return x;
      return conv2d(x, make_conv_spec(s.c, s.c, 1, 2), op.weights[0]);
    case CandidateOpKind::kAvgPool3: return pool2d(x, PoolKind::kAvg, 3, op.stride, 1);
    case CandidateOpKind::kMaxPool3: return pool2d(x, PoolKind::kMax, 3, op.stride, 1);
    case CandidateOpKind::kSepConv3:
    case CandidateOpKind::kSepConv5: {
      Tensor y = relu_dw_pw(op, x, w, k, op.stride, 1);
      return relu_dw_pw(op, y, w, k, 1, 1);
    }
    case CandidateOpKind::kDilConv3:
    case CandidateOpKind::kDilConv5: return relu_dw_pw(op, x, w, k, op.stride, 2);
  }
  throw ConfigError("unhandled candidate op");
}

Tensor correlation1d(const Tensor& left, const Tensor& right, int max_disp) {
  const Shape& s = left.shape();
  if (right.shape() != s) throw ShapeError("correlation1d: left " + s.str() + " vs right " + right.shape().str());
  if (max_disp < 0 || max_disp >= s.w) {
    throw ConfigError("correlation1d: max_disp " + std::to_string(max_disp) + " must be in [0, width " +
                      std::to_string(s.w) + ")");
  }
  const int D = max_disp + 1;
  Tensor y({s.n, D, s.h, s.w});
  const double inv_c = 1.0 / s.c;
  const size_t plane = static_cast<size_t>(s.h) * s.w;
  const double* lv = left.values().data();
  const double* rv = right.values().data();
  double* yv = y.values_mut().data();
  for (int n = 0; n < s.n; ++n) {
    for (int d = 0; d < D; ++d) {
      double* yp = yv + (static_cast<size_t>(n) * D + d) * plane;
      for (int c = 0; c < s.c; ++c) {
        const double* lp = lv + (static_cast<size_t>(n) * s.c + c) * plane;
        const double* rp = rv + (static_cast<size_t>(n) * s.c + c) * plane;
        for (int h = 0; h < s.h; ++h) {
          for (int w = d; w < s.w; ++w) yp[h * s.w + w] += lp[h * s.w + w] * rp[h * s.w + w - d];
        }
      }
      for (size_t i = 0; i < plane; ++i) yp[i] *= inv_c;
    }
  }
  if (Tape::tracking({&left, &right})) {
    auto li = left.impl_ptr();
    auto ri = right.impl_ptr();
    auto yo = y.impl();
    Tape::active()->record({left, right}, y, [li, ri, yo, s, D, inv_c, plane]() {
      for (int n = 0; n < s.n; ++n) {
        for (int d = 0; d < D; ++d) {
          const double* gp = yo->grad.data() + (static_cast<size_t>(n) * D + d) * plane;
          for (int c = 0; c < s.c; ++c) {
            const size_t base = (static_cast<size_t>(n) * s.c + c) * plane;
            for (int h = 0; h < s.h; ++h) {
              for (int w = d; w < s.w; ++w) {
                const double g = gp[h * s.w + w] * inv_c;
                const size_t il = base + h * s.w + w;
                const size_t ir = il - d;
                if (li->requires_grad) li->grad[il] += g * ri->value[ir];
                if (ri->requires_grad) ri->grad[ir] += g * li->value[il];
              }
            }
          }
        }
      }
    });
  }
  return y;
}

Tensor warp_horizontal(const Tensor& img, const Tensor& disparity) {
  const Shape& s = img.shape();
  const Shape& ds = disparity.shape();
  if (ds.c != 1 || ds.n != s.n || !ds.same_spatial(s)) {
    throw ShapeError("warp_horizontal: disparity " + ds.str() + " incompatible with image " + s.str());
  }
  Tensor y(s);
  const size_t plane = static_cast<size_t>(s.h) * s.w;
  const double* iv = img.values().data();
  const double* dv = disparity.values().data();
  double* yv = y.values_mut().data();
  for (int n = 0; n < s.n; ++n) {
    for (int h = 0; h < s.h; ++h) {
      for (int w = 0; w < s.w; ++w) {
        const double x = w - dv[n * plane + h * s.w + w];
        const double fx = std::floor(x);
        const int x0 = static_cast<int>(fx);
        const double f = x - fx;
        for (int c = 0; c < s.c; ++c) {
          const double* row = iv + (static_cast<size_t>(n) * s.c + c) * plane + h * s.w;
          const double v0 = (x0 >= 0 && x0 < s.w) ? row[x0] : 0.0;
          const double v1 = (x0 + 1 >= 0 && x0 + 1 < s.w) ? row[x0 + 1] : 0.0;
          yv[(static_cast<size_t>(n) * s.c + c) * plane + h * s.w + w] = (1.0 - f) * v0 + f * v1;
        }
      }
    }
  }
  if (Tape::tracking({&img, &disparity})) {
    auto ii = img.impl_ptr();
    auto di = disparity.impl_ptr();
    auto yo = y.impl();
    Tape::active()->record({img, disparity}, y, [ii, di, yo, s, plane]() {
      for (int n = 0; n < s.n; ++n) {
        for (int h = 0; h < s.h; ++h) {
          for (int w = 0; w < s.w; ++w) {
            const size_t dix = n * plane + h * s.w + w;
            const double x = w - di->value[dix];
            const double fx = std::floor(x);
            const int x0 = static_cast<int>(fx);
            const double f = x - fx;
            const bool in0 = x0 >= 0 && x0 < s.w;
            const bool in1 = x0 + 1 >= 0 && x0 + 1 < s.w;
            double gd = 0.0;
            for (int c = 0; c < s.c; ++c) {
              const size_t rbase = (static_cast<size_t>(n) * s.c + c) * plane + h * s.w;
              const double g = yo->grad[rbase + w];
              if (ii->requires_grad) {
                if (in0) ii->grad[rbase + x0] += g * (1.0 - f);
                if (in1) ii->grad[rbase + x0 + 1] += g * f;
              }
              const double v0 = in0 ? ii->value[rbase + x0] : 0.0;
              const double v1 = in1 ? ii->value[rbase + x0 + 1] : 0.0;
              gd -= g * (v1 - v0);
            }
            if (di->requires_grad) di->grad[dix] += gd;
          }
        }
      }
    });
  }
  return y;
}

Tensor epe(const Tensor& pred, const Tensor& gt, const Tensor* valid_mask) {
  const Shape& s = pred.shape();
  if (gt.shape() != s || s.c != 1) throw ShapeError("epe: pred " + s.str() + " vs gt " + gt.shape().str());
  if (valid_mask && valid_mask->defined() && valid_mask->shape() != s) {
    throw ShapeError("epe: mask " + valid_mask->shape().str() + " vs pred " + s.str());
  }
  const bool masked = valid_mask && valid_mask->defined();
  const auto pv = pred.values();
  const auto gv = gt.values();
  double acc = 0.0;
  size_t count = 0;
  for (size_t i = 0; i < pv.size(); ++i) {
    if (masked && !((*valid_mask)[i] > 0.5)) continue;
    acc += std::abs(pv[i] - gv[i]);
    ++count;
  }
  if (count == 0) throw EvaluationError("epe: no valid pixels");
  Tensor y = Tensor::scalar(acc / static_cast<double>(count));
  if (Tape::tracking({&pred})) {
    auto pi = pred.impl_ptr();
    auto gi = gt.impl_ptr();
    auto mi = masked ? valid_mask->impl_ptr() : nullptr;
    auto yo = y.impl();
    Tape::active()->record({pred}, y, [pi, gi, mi, yo, count]() {
      const double g = yo->grad[0] / static_cast<double>(count);
      for (size_t i = 0; i < pi->value.size(); ++i) {
        if (mi && !(mi->value[i] > 0.5)) continue;
        const double d = pi->value[i] - gi->value[i];
        if (d > 0.0) pi->grad[i] += g;
        else if (d < 0.0) pi->grad[i] -= g;
      }
    });
  }
  return y;
}

Tensor downsample_disparity(const Tensor& gt, int factor) {
  if (factor < 1) throw ConfigError("downsample factor must be positive");
  if (factor == 1) return gt;
  return scalar_mul(pool2d(gt, PoolKind::kAvg, factor, factor, 0), 1.0 / factor);
}

Tensor downsample_mask(const Tensor& mask, int factor) {
  if (factor == 1) return mask;
  Tensor pooled = pool2d(mask.detach(), PoolKind::kAvg, factor, factor, 0);
  for (double& v : pooled.values_mut()) v = v >= 0.5 ? 1.0 : 0.0;
  return pooled;
}

Tensor multiscale_epe(std::span<const ScaledPrediction> preds, const Tensor& gt, std::span<const double> weights,
                      const Tensor* valid_mask) {
  if (preds.empty()) throw ConfigError("multiscale_epe: no predictions");
  if (weights.size() != preds.size()) {
    throw ConfigError("multiscale_epe: " + std::to_string(preds.size()) + " predictions but " +
                      std::to_string(weights.size()) + " weights");
  }
  const Shape& gs = gt.shape();
  std::vector<Tensor> terms;
  for (size_t k = 0; k < preds.size(); ++k) {
    const auto& p = preds[k];
    if (p.factor < 1 || gs.h % p.factor != 0 || gs.w % p.factor != 0 || p.pred.shape().h != gs.h / p.factor ||
        p.pred.shape().w != gs.w / p.factor) {
      throw ConfigError("multiscale_epe: prediction " + p.pred.shape().str() + " has no matching scale 1/" +
                        std::to_string(p.factor) + " of ground truth " + gs.str());
    }
    const Tensor g = downsample_disparity(gt.detach(), p.factor);
    Tensor m;
    if (valid_mask && valid_mask->defined()) m = downsample_mask(*valid_mask, p.factor);
    terms.push_back(scalar_mul(epe(p.pred, g, m.defined() ? &m : nullptr), weights[k]));
  }
  return add_n(terms);
}

}  // namespace cellsearch
