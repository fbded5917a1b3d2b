#pragma once

#include <array>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "tensor.hpp"

namespace cellsearch {

enum class CandidateOpKind { kZero = 0, kSkip, kAvgPool3, kMaxPool3, kSepConv3, kSepConv5, kDilConv3, kDilConv5 };

inline constexpr int kNumCandidateOps = 8;

inline constexpr std::array<CandidateOpKind, kNumCandidateOps> kAllCandidateOps = {
    CandidateOpKind::kZero,     CandidateOpKind::kSkip,     CandidateOpKind::kAvgPool3, CandidateOpKind::kMaxPool3,
    CandidateOpKind::kSepConv3, CandidateOpKind::kSepConv5, CandidateOpKind::kDilConv3, CandidateOpKind::kDilConv5};

std::string_view op_name(CandidateOpKind kind);
// Throws ParseError naming the token when unknown.
CandidateOpKind op_from_name(std::string_view name);
inline int op_index(CandidateOpKind kind) { return static_cast<int>(kind); }

/// One candidate operation on one edge, with its own weights.
///
/// SepConv is (ReLU, depthwise kxk, pointwise 1x1) applied twice, the first
/// depthwise carrying the stride. DilConv is ReLU, depthwise kxk with
/// dilation 2, pointwise 1x1, once. A stride-2 Skip is a strided 1x1
/// convolution. With `affine` set, each pointwise output gets a learned
/// per-channel scale and shift.
struct OpInstance {
  CandidateOpKind kind = CandidateOpKind::kZero;
  int channels = 0;
  int stride = 1;
  bool affine = false;
  std::vector<Tensor> weights;
};

OpInstance make_op(CandidateOpKind kind, int channels, int stride, Rng& rng, bool affine = false);

Tensor apply_candidate(const OpInstance& op, const Tensor& x);

/// Horizontal correlation: out[n, d, h, w] = (1/C) sum_c left[n,c,h,w] * right[n,c,h,w-d],
/// zero where w - d < 0; d = 0..max_disp.
Tensor correlation1d(const Tensor& left, const Tensor& right, int max_disp);

/// out(h, w) = linear sample of img at (h, w - disparity(h, w)); taps outside
/// the image read as zero. Differentiable in both arguments.
Tensor warp_horizontal(const Tensor& img, const Tensor& disparity);

/// Mean |pred - gt| over pixels where mask > 0.5 (all pixels without mask).
Tensor epe(const Tensor& pred, const Tensor& gt, const Tensor* valid_mask = nullptr);

struct ScaledPrediction {
  Tensor pred;
  int factor = 1;  // gt resolution / prediction resolution
};

// Ground truth average-pooled by `factor` and divided by it (disparity units follow resolution).
Tensor downsample_disparity(const Tensor& gt, int factor);
// Mask average-pooled by `factor`; a coarse pixel is valid when at least half its support is.
Tensor downsample_mask(const Tensor& mask, int factor);

Tensor multiscale_epe(std::span<const ScaledPrediction> preds, const Tensor& gt, std::span<const double> weights,
                      const Tensor* valid_mask = nullptr);

}  // namespace cellsearch
