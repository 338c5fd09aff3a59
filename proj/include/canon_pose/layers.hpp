#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "canon_pose/tensor.hpp"

namespace canon_pose::nn {

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Param(std::string n, Shape shape) : name(std::move(n)), value(shape), grad(shape) {}
};

// Reverse-mode layer: forward caches what backward needs; backward
// accumulates parameter gradients and returns the input gradient.
template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<T> forward(const Tensor<T>& x) = 0;
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
  virtual std::vector<Param<T>*> params() { return {}; }
  virtual std::string kind() const = 0;

  // When false, backward skips accumulation into parameter gradients.
  bool accumulate_param_grads = true;
  // When false, backward may return an empty tensor (first layer of a network).
  bool propagate_input_grad = true;
};

template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride, std::size_t padding,
         std::string name)
      : in_(in_channels),
        out_(out_channels),
        kernel_(kernel),
        stride_(stride),
        padding_(padding),
        weight_(name + ".weight", {out_channels, in_channels, kernel, kernel}),
        bias_(name + ".bias", {out_channels}) {}

  Tensor<T> forward(const Tensor<T>& x) override {
    if (x.rank() != 4 || x.dim(1) != in_)
      throw DimensionError("conv2d expects [B," + std::to_string(in_) + ",H,W], got " + shape_string(x.shape));
    batch_ = x.dim(0);
    geom_ = {in_, x.dim(2), x.dim(3), kernel_, stride_, padding_};
    if (x.dim(2) + 2 * padding_ < kernel_ || x.dim(3) + 2 * padding_ < kernel_)
      throw DimensionError("conv2d input smaller than kernel: " + shape_string(x.shape));
    const std::size_t oh = geom_.out_height(), ow = geom_.out_width();
    const std::size_t ncols = batch_ * oh * ow;
    col_.assign(geom_.patch_size() * ncols, T(0));
    im2col(x.ptr(), batch_, geom_, col_.data());
    std::vector<T> y2(out_ * ncols);
    gemm(false, false, out_, ncols, geom_.patch_size(), T(1), weight_.value.ptr(), col_.data(), T(0), y2.data());
    for (std::size_t o = 0; o < out_; ++o) {
      const T b = bias_.value[o];
      T* row = y2.data() + o * ncols;
      for (std::size_t i = 0; i < ncols; ++i) row[i] += b;
    }
    Tensor<T> y({batch_, out_, oh, ow});
    swap_leading_axes(y2.data(), out_, batch_, oh * ow, y.ptr());
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    const std::size_t oh = geom_.out_height(), ow = geom_.out_width();
    const std::size_t ncols = batch_ * oh * ow;
    if (grad_out.size() != batch_ * out_ * oh * ow) throw DimensionError("conv2d backward: gradient shape mismatch");
    std::vector<T> dy2(out_ * ncols);
    swap_leading_axes(grad_out.ptr(), batch_, out_, oh * ow, dy2.data());
    if (this->accumulate_param_grads) {
      gemm(false, true, out_, geom_.patch_size(), ncols, T(1), dy2.data(), col_.data(), T(1), weight_.grad.ptr());
      for (std::size_t o = 0; o < out_; ++o) {
        const T* row = dy2.data() + o * ncols;
        T acc = T(0);
        for (std::size_t i = 0; i < ncols; ++i) acc += row[i];
        bias_.grad[o] += acc;
      }
    }
    if (!this->propagate_input_grad) return {};
    std::vector<T> dcol(geom_.patch_size() * ncols);
    gemm(true, false, geom_.patch_size(), ncols, out_, T(1), weight_.value.ptr(), dy2.data(), T(0), dcol.data());
    Tensor<T> dx({batch_, in_, geom_.height, geom_.width});
    col2im(dcol.data(), batch_, geom_, dx.ptr());
    return dx;
  }

  std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }
  std::string kind() const override { return "conv2d"; }

 private:
  std::size_t in_, out_, kernel_, stride_, padding_;
  Param<T> weight_, bias_;
  ConvGeometry geom_;
  std::size_t batch_ = 0;
  std::vector<T> col_;
};

// Adjoint of Conv2d with the same (kernel, stride, padding); output_padding
// selects among the output sizes that convolve back to the input size.
template <typename T>
class ConvTranspose2d final : public Layer<T> {
 public:
  ConvTranspose2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                  std::size_t padding, std::size_t output_padding, std::string name)
      : in_(in_channels),
        out_(out_channels),
        kernel_(kernel),
        stride_(stride),
        padding_(padding),
        output_padding_(output_padding),
        weight_(name + ".weight", {in_channels, out_channels, kernel, kernel}),
        bias_(name + ".bias", {out_channels}) {
    if (output_padding >= stride) throw DimensionError("conv_transpose2d: output_padding must be < stride");
  }

  std::size_t output_size(std::size_t in) const {
    return (in - 1) * stride_ + kernel_ + output_padding_ - 2 * padding_;
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    if (x.rank() != 4 || x.dim(1) != in_)
      throw DimensionError("conv_transpose2d expects [B," + std::to_string(in_) + ",H,W], got " + shape_string(x.shape));
    batch_ = x.dim(0);
    in_h_ = x.dim(2);
    in_w_ = x.dim(3);
    geom_ = {out_, output_size(in_h_), output_size(in_w_), kernel_, stride_, padding_};
    const std::size_t ncols = batch_ * in_h_ * in_w_;
    x2_.resize(in_ * ncols);
    swap_leading_axes(x.ptr(), batch_, in_, in_h_ * in_w_, x2_.data());
    std::vector<T> col(geom_.patch_size() * ncols);
    gemm(true, false, geom_.patch_size(), ncols, in_, T(1), weight_.value.ptr(), x2_.data(), T(0), col.data());
    Tensor<T> y({batch_, out_, geom_.height, geom_.width});
    col2im(col.data(), batch_, geom_, y.ptr());
    const std::size_t plane = geom_.height * geom_.width;
    for (std::size_t b = 0; b < batch_; ++b)
      for (std::size_t o = 0; o < out_; ++o) {
        T* p = y.ptr() + (b * out_ + o) * plane;
        const T bias = bias_.value[o];
        for (std::size_t i = 0; i < plane; ++i) p[i] += bias;
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    const std::size_t ncols = batch_ * in_h_ * in_w_;
    const std::size_t plane = geom_.height * geom_.width;
    if (grad_out.size() != batch_ * out_ * plane) throw DimensionError("conv_transpose2d backward: gradient shape mismatch");
    std::vector<T> dcol(geom_.patch_size() * ncols);
    im2col(grad_out.ptr(), batch_, geom_, dcol.data());
    if (this->accumulate_param_grads) {
      gemm(false, true, in_, geom_.patch_size(), ncols, T(1), x2_.data(), dcol.data(), T(1), weight_.grad.ptr());
      for (std::size_t b = 0; b < batch_; ++b)
        for (std::size_t o = 0; o < out_; ++o) {
          const T* p = grad_out.ptr() + (b * out_ + o) * plane;
          T acc = T(0);
          for (std::size_t i = 0; i < plane; ++i) acc += p[i];
          bias_.grad[o] += acc;
        }
    }
    if (!this->propagate_input_grad) return {};
    std::vector<T> dx2(in_ * ncols);
    gemm(false, false, in_, ncols, geom_.patch_size(), T(1), weight_.value.ptr(), dcol.data(), T(0), dx2.data());
    Tensor<T> dx({batch_, in_, in_h_, in_w_});
    swap_leading_axes(dx2.data(), in_, batch_, in_h_ * in_w_, dx.ptr());
    return dx;
  }

  std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }
  std::string kind() const override { return "conv_transpose2d"; }

 private:
  std::size_t in_, out_, kernel_, stride_, padding_, output_padding_;
  Param<T> weight_, bias_;
  ConvGeometry geom_;
  std::size_t batch_ = 0, in_h_ = 0, in_w_ = 0;
  std::vector<T> x2_;
};

template <typename T>
class Linear final : public Layer<T> {
 public:
  Linear(std::size_t in_features, std::size_t out_features, std::string name)
      : in_(in_features), out_(out_features), weight_(name + ".weight", {out_features, in_features}), bias_(name + ".bias", {out_features}) {}

  Tensor<T> forward(const Tensor<T>& x) override {
    if (x.rank() != 2 || x.dim(1) != in_)
      throw DimensionError("linear expects [B," + std::to_string(in_) + "], got " + shape_string(x.shape));
    input_ = x;
    const std::size_t batch = x.dim(0);
    Tensor<T> y({batch, out_});
    for (std::size_t b = 0; b < batch; ++b) std::copy_n(bias_.value.ptr(), out_, y.ptr() + b * out_);
    gemm(false, true, batch, out_, in_, T(1), x.ptr(), weight_.value.ptr(), T(1), y.ptr());
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    const std::size_t batch = input_.dim(0);
    if (grad_out.size() != batch * out_) throw DimensionError("linear backward: gradient shape mismatch");
    if (this->accumulate_param_grads) {
      gemm(true, false, out_, in_, batch, T(1), grad_out.ptr(), input_.ptr(), T(1), weight_.grad.ptr());
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < out_; ++o) bias_.grad[o] += grad_out[b * out_ + o];
    }
    if (!this->propagate_input_grad) return {};
    Tensor<T> dx({batch, in_});
    gemm(false, false, batch, in_, out_, T(1), grad_out.ptr(), weight_.value.ptr(), T(0), dx.ptr());
    return dx;
  }

  std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }
  std::string kind() const override { return "linear"; }

 private:
  std::size_t in_, out_;
  Param<T> weight_, bias_;
  Tensor<T> input_;
};

template <typename T>
class LeakyReLU final : public Layer<T> {
 public:
  explicit LeakyReLU(T slope) : slope_(slope) {}

  Tensor<T> forward(const Tensor<T>& x) override {
    input_ = x;
    Tensor<T> y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : slope_ * x[i];
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    Tensor<T> dx(grad_out.shape);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = input_[i] > T(0) ? grad_out[i] : slope_ * grad_out[i];
    return dx;
  }

  std::string kind() const override { return "leaky_relu"; }

 private:
  T slope_;
  Tensor<T> input_;
};

// Logistic squashing; output kept strictly inside (0,1) even when saturated.
template <typename T>
class Sigmoid final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) override {
    constexpr T lo = std::numeric_limits<T>::min();
    const T hi = std::nextafter(T(1), T(0));
    output_ = Tensor<T>(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const T v = x[i] >= T(0) ? T(1) / (T(1) + std::exp(-x[i])) : std::exp(x[i]) / (T(1) + std::exp(x[i]));
      output_[i] = std::clamp(v, lo, hi);
    }
    return output_;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    Tensor<T> dx(grad_out.shape);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = grad_out[i] * output_[i] * (T(1) - output_[i]);
    return dx;
  }

  std::string kind() const override { return "sigmoid"; }

 private:
  Tensor<T> output_;
};

// Per-sample normalization over all non-batch axes of [B, C, ...], then a
// per-channel scale and shift. No batch statistics, so inference does not
// depend on batch composition.
template <typename T>
class LayerNorm final : public Layer<T> {
 public:
  LayerNorm(std::size_t channels, std::string name, T eps = T(1e-5))
      : channels_(channels), eps_(eps), scale_(name + ".scale", {channels}), shift_(name + ".shift", {channels}) {
    scale_.value.fill(T(1));
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    if (x.rank() < 2 || x.dim(1) != channels_)
      throw DimensionError("layer_norm expects [B," + std::to_string(channels_) + ",...], got " + shape_string(x.shape));
    const std::size_t batch = x.dim(0), per = x.size() / batch, plane = per / channels_;
    normalized_ = Tensor<T>(x.shape);
    inv_std_.assign(batch, T(0));
    Tensor<T> y(x.shape);
    for (std::size_t b = 0; b < batch; ++b) {
      const T* src = x.ptr() + b * per;
      double mean = 0.0, var = 0.0;
      for (std::size_t i = 0; i < per; ++i) mean += src[i];
      mean /= static_cast<double>(per);
      for (std::size_t i = 0; i < per; ++i) var += (src[i] - mean) * (src[i] - mean);
      var /= static_cast<double>(per);
      const T inv = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps_)));
      inv_std_[b] = inv;
      T* xh = normalized_.ptr() + b * per;
      T* dst = y.ptr() + b * per;
      for (std::size_t c = 0; c < channels_; ++c)
        for (std::size_t i = c * plane; i < (c + 1) * plane; ++i) {
          xh[i] = static_cast<T>(src[i] - mean) * inv;
          dst[i] = scale_.value[c] * xh[i] + shift_.value[c];
        }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    if (grad_out.shape != normalized_.shape) throw DimensionError("layer_norm backward: gradient shape mismatch");
    const std::size_t batch = grad_out.dim(0), per = grad_out.size() / batch, plane = per / channels_;
    Tensor<T> dx(grad_out.shape);
    for (std::size_t b = 0; b < batch; ++b) {
      const T* dy = grad_out.ptr() + b * per;
      const T* xh = normalized_.ptr() + b * per;
      double mean_g = 0.0, mean_gx = 0.0;
      for (std::size_t c = 0; c < channels_; ++c)
        for (std::size_t i = c * plane; i < (c + 1) * plane; ++i) {
          const double g = static_cast<double>(dy[i]) * scale_.value[c];
          mean_g += g;
          mean_gx += g * xh[i];
          if (this->accumulate_param_grads) {
            scale_.grad[c] += dy[i] * xh[i];
            shift_.grad[c] += dy[i];
          }
        }
      mean_g /= static_cast<double>(per);
      mean_gx /= static_cast<double>(per);
      T* out = dx.ptr() + b * per;
      for (std::size_t c = 0; c < channels_; ++c)
        for (std::size_t i = c * plane; i < (c + 1) * plane; ++i) {
          const double g = static_cast<double>(dy[i]) * scale_.value[c];
          out[i] = static_cast<T>(inv_std_[b] * (g - mean_g - xh[i] * mean_gx));
        }
    }
    if (!this->propagate_input_grad) return {};
    return dx;
  }

  std::vector<Param<T>*> params() override { return {&scale_, &shift_}; }
  std::string kind() const override { return "layer_norm"; }

 private:
  std::size_t channels_;
  T eps_;
  Param<T> scale_, shift_;
  Tensor<T> normalized_;
  std::vector<T> inv_std_;
};

inline bool is_normalization_param(const std::string& name) {
  auto ends_with = [&](const char* s) {
    const std::string suffix(s);
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends_with(".scale") || ends_with(".shift");
}

// Shape change only: [B, ...] -> [B, target...].
template <typename T>
class Reshape final : public Layer<T> {
 public:
  explicit Reshape(Shape per_sample) : per_sample_(std::move(per_sample)) {}

  Tensor<T> forward(const Tensor<T>& x) override {
    input_shape_ = x.shape;
    Shape s{x.dim(0)};
    s.insert(s.end(), per_sample_.begin(), per_sample_.end());
    return x.reshaped(s);
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override { return grad_out.reshaped(input_shape_); }

  std::string kind() const override { return "reshape"; }

 private:
  Shape per_sample_;
  Shape input_shape_;
};

template <typename T>
class Sequential {
 public:
  Sequential() = default;
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  template <typename L, typename... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }

  Tensor<T> forward(const Tensor<T>& x) {
    Tensor<T> h = x;
    for (auto& layer : layers_) h = layer->forward(h);
    return h;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    Tensor<T> g = grad_out;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      g = (*it)->backward(g);
      if (g.size() == 0) break;
    }
    return g;
  }

  std::vector<Param<T>*> params() {
    std::vector<Param<T>*> out;
    for (auto& layer : layers_)
      for (auto* p : layer->params()) out.push_back(p);
    return out;
  }

  void zero_grad() {
    for (auto* p : params()) p->grad.fill(T(0));
  }

  void set_accumulate_param_grads(bool on) {
    for (auto& layer : layers_) layer->accumulate_param_grads = on;
  }

  void set_propagate_input_grad(bool on) {
    if (!layers_.empty()) layers_.front()->propagate_input_grad = on;
  }

  std::size_t layer_count() const { return layers_.size(); }
  Layer<T>& layer(std::size_t i) { return *layers_.at(i); }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

}  // namespace canon_pose::nn
