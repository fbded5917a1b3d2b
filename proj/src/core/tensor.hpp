#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "common.hpp"

namespace cellsearch {

/// (batch, channels, height, width).
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  size_t numel() const {
    return static_cast<size_t>(n) * static_cast<size_t>(c) * static_cast<size_t>(h) * static_cast<size_t>(w);
  }
  bool same_spatial(const Shape& o) const { return h == o.h && w == o.w; }
  std::string str() const;

  friend bool operator==(const Shape&, const Shape&) = default;
};

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_leaf = true;
};

}  // namespace detail

/// Dense row-major 4-D array of doubles. Copies share storage (handle
/// semantics), which is what lets the tape refer back to inputs; use clone()
/// for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape) { return Tensor(shape); }
  static Tensor full(Shape shape, double v);
  static Tensor scalar(double v) { return full({1, 1, 1, 1}, v); }
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const;
  size_t numel() const { return shape().numel(); }

  std::span<const double> values() const;
  std::span<double> values_mut();
  double operator[](size_t i) const { return impl_->value[i]; }
  double& operator[](size_t i) { return impl_->value[i]; }
  double at(int n, int c, int h, int w) const { return impl_->value[offset(n, c, h, w)]; }
  double& at(int n, int c, int h, int w) { return impl_->value[offset(n, c, h, w)]; }
  double item() const;

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return impl_->is_leaf; }
  // Empty when no backward pass has touched this tensor.
  std::span<const double> grad() const;

  Tensor clone() const;   // deep copy, leaf, no grad
  Tensor detach() const { return clone(); }
  void fill(double v);
  void copy_from(const Tensor& other);

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  size_t offset(int n, int c, int h, int w) const {
    const Shape& s = impl_->shape;
    return ((static_cast<size_t>(n) * s.c + c) * s.h + h) * s.w + w;
  }

  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Leaf gradients produced by one backward pass.
class Gradients {
 public:
  std::span<const double> of(const Tensor& t) const;
  bool contains(const Tensor& t) const { return grads_.count(t.impl()) != 0; }
  size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  std::unordered_map<const detail::TensorImpl*, std::vector<double>> grads_;
  std::vector<std::shared_ptr<detail::TensorImpl>> keep_alive_;
};

/// Records differentiable primitive applications in execution order.
/// Operations record onto the tape installed by a Tape::Scope on the current
/// thread, and only when at least one input requires gradients.
class Tape {
 public:
  struct Entry {
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::shared_ptr<detail::TensorImpl> output;
    std::function<void()> backward;
  };

  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* active();

  // True when an op over `inputs` must be recorded.
  static bool tracking(std::initializer_list<const Tensor*> inputs);
  static bool tracking(std::span<const Tensor> inputs);

  void record(std::vector<Tensor> inputs, Tensor& output, std::function<void()> backward);

  /// Reverse sweep seeded with d(loss)/d(loss) = 1. All gradient buffers on
  /// the tape are reset first, so repeated calls give identical results.
  Gradients backward(const Tensor& loss);

  size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  std::vector<Entry> entries_;
};

/// Kernel geometry; kernel dims are (out_channels, in_channels / groups, kh, kw).
struct ConvSpec {
  int out_channels = 1;
  int in_channels_per_group = 1;
  int kh = 1;
  int kw = 1;
  int stride = 1;
  int dilation = 1;
  int groups = 1;
  int padding = 0;

  Shape weight_shape() const { return {out_channels, in_channels_per_group, kh, kw}; }
  int in_channels() const { return in_channels_per_group * groups; }
  // floor((in + 2 pad - dilation (k - 1) - 1) / stride) + 1
  int output_size(int in, int k) const;
};

ConvSpec make_conv_spec(int in_ch, int out_ch, int k, int stride = 1, int padding = 0, int dilation = 1,
                        int groups = 1);

enum class PoolKind { kAvg, kMax };

Tensor conv2d(const Tensor& x, const ConvSpec& spec, const Tensor& weight, const Tensor* bias = nullptr);
// Weight layout follows ConvSpec: (out_channels, in_channels, kh, kw); groups must be 1.
// The output size must be an integral multiple of the input size.
Tensor transposed_conv2d(const Tensor& x, const ConvSpec& spec, const Tensor& weight);
// Average pooling divides by k*k (zero padding counted); max pooling ignores padding.
Tensor pool2d(const Tensor& x, PoolKind kind, int k, int stride, int padding);
// Scale num/den, half-pixel (align_corners = false) sampling.
Tensor bilinear_resize(const Tensor& x, int num, int den = 1);
Tensor concat_channels(std::span<const Tensor> xs);
Tensor slice_channels(const Tensor& x, int start, int count);
std::vector<Tensor> split_channels(const Tensor& x, std::span<const int> sizes);

Tensor relu(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor add_n(std::span<const Tensor> xs);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& x, double s);
Tensor sum(const Tensor& x);
Tensor sum_squares(const Tensor& x);
// Per-channel x * gamma[c] + beta[c]; gamma, beta have shape (1, C, 1, 1).
Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta);
// Softmax over all elements of `logits` divided by the temperature.
Tensor softmax(const Tensor& logits, double temperature);
// sum_i weights[i] * xs[i]; weights holds xs.size() elements.
Tensor weighted_sum(std::span<const Tensor> xs, const Tensor& weights);

std::vector<double> softmax_vec(std::span<const double> v, double temperature);

/// Central-difference gradient check of a scalar tensor function. Returns
/// max_i |g_a - g_n| / max(1e-8, |g_a| + |g_n|).
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-5);

// Little-endian: 4 x u32 dims (n, c, h, w), then numel f64 values.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);
std::vector<uint8_t> tensor_to_bytes(const Tensor& t);
Tensor tensor_from_bytes(std::span<const uint8_t> bytes);

}  // namespace cellsearch
