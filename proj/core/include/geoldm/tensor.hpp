#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "geoldm/error.hpp"
#include "geoldm/rng.hpp"

namespace geoldm::nn {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad; // lazily sized to value.size()
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backward_fn; // scatter self.grad into parents

    // Scalars produced by reductions keep their double-precision accumulator
    // so finite-difference probes are not limited by the final float cast.
    double precise = 0.0;
    bool has_precise = false;

    std::span<float> grad_span() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
        return grad;
    }
};

/// Dense float32 tensor with reverse-mode autodiff. Value-semantics handle to a
/// shared node; ops are free functions that record the tape. Layouts by
/// convention: 4D (batch, channels, height, width) for conv paths, 2D
/// (rows, cols) for linear paths, {1} for scalars. Row-major throughout.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float v, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, float stddev = 1.0f, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(impl_); }
    const Shape& shape() const { return impl_->shape; }
    int dim(int k) const { return impl_->shape[static_cast<std::size_t>(k)]; }
    std::size_t numel() const { return impl_->value.size(); }
    bool requires_grad() const { return impl_ && impl_->requires_grad; }

    std::span<float> data() { return impl_->value; }
    std::span<const float> data() const { return impl_->value; }
    std::span<float> grad() { return impl_->grad_span(); }

    /// Value of a {1} scalar.
    float item() const;
    /// Scalar value at reduction precision when available.
    double item_precise() const;

    /// Reverse pass from this scalar: topo-sorts the tape and accumulates
    /// gradients into every node with requires_grad set.
    void backward();

    void zero_grad() {
        if (impl_) impl_->grad.assign(impl_->value.size(), 0.0f);
    }

    /// Same storage, detached from the tape.
    Tensor detach() const;

    std::shared_ptr<TensorImpl> impl_;
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);
Tensor silu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor clamp(const Tensor& a, float lo, float hi); // gradient masked outside [lo, hi]

// ---- reductions (accumulated in double) ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// ---- structured ops ----

/// Cross-correlation. x (B,Cin,H,W), w (Cout,Cin,K,K), optional bias (Cout).
/// Output spatial size floor((H + 2*pad - K)/stride) + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);

/// Nearest-neighbour 2x spatial upsampling.
Tensor upsample_nearest2(const Tensor& x);

/// Per-(batch, group) normalization over (C/G, H, W), then per-channel affine.
Tensor group_norm(const Tensor& x, int groups, const Tensor& gain, const Tensor& bias,
                  float eps = 1e-5f);

/// y = x * W^T + b. x (B,in), W (out,in), b (out) optional.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

/// Residual single-head scaled dot-product self-attention over spatial
/// positions: y = x + softmax(Q K^T / sqrt(C)) V with Q/K/V linear maps of the
/// (HW, C)-flattened input. wq/wk/wv are (C,C).
Tensor self_attention(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv);

Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& x, int c0, int c1);

/// x (B,C,H,W) + e (B,C) broadcast over spatial dims.
Tensor add_channel_bias(const Tensor& x, const Tensor& e);

} // namespace geoldm::nn
