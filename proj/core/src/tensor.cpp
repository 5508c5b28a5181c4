#include "geoldm/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace geoldm::nn {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapC = Eigen::Map<const MatRM>;

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t k = 0; k < s.size(); ++k) os << (k ? "," : "") << s[k];
    os << ')';
    return os.str();
}

namespace {

std::shared_ptr<TensorImpl> make_impl(Shape shape, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    impl->value.assign(shape_numel(shape), 0.0f);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return impl;
}

Tensor wrap(std::shared_ptr<TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
}

/// Result node inheriting requires_grad from parents.
Tensor make_result(Shape shape, std::initializer_list<Tensor> parents) {
    bool rg = false;
    for (const auto& p : parents)
        if (p.defined() && p.requires_grad()) rg = true;
    auto impl = make_impl(std::move(shape), rg);
    if (rg)
        for (const auto& p : parents)
            if (p.defined()) impl->parents.push_back(p.impl_);
    return wrap(std::move(impl));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.shape() == b.shape(), "nn/shape-mismatch",
            std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void check_finite(const Tensor& t, const char* op) {
    for (float v : t.data())
        require(std::isfinite(v), "nn/non-finite", std::string(op) + " produced a non-finite value");
}

} // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return wrap(make_impl(std::move(shape), requires_grad));
}

Tensor Tensor::full(Shape shape, float v, bool requires_grad) {
    auto t = zeros(std::move(shape), requires_grad);
    std::fill(t.impl_->value.begin(), t.impl_->value.end(), v);
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
    require(values.size() == shape_numel(shape), "nn/shape-mismatch",
            "from(): value count does not match shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->value = std::move(values);
    impl->requires_grad = requires_grad;
    return wrap(std::move(impl));
}

Tensor Tensor::randn(Shape shape, Rng& rng, float stddev, bool requires_grad) {
    auto t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.impl_->value) v = stddev * rng.normal_f();
    return t;
}

float Tensor::item() const {
    require(numel() == 1, "nn/shape-mismatch", "item() on non-scalar " + shape_str(shape()));
    return impl_->value[0];
}

double Tensor::item_precise() const {
    require(numel() == 1, "nn/shape-mismatch", "item_precise() on non-scalar " + shape_str(shape()));
    return impl_->has_precise ? impl_->precise : static_cast<double>(impl_->value[0]);
}

Tensor Tensor::detach() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->value = impl_->value;
    impl->requires_grad = false;
    return wrap(std::move(impl));
}

void Tensor::backward() {
    require(defined() && numel() == 1, "nn/backward", "backward() must start from a scalar");
    // Iterative post-order DFS to topo-sort the tape.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack{{impl_.get(), 0}};
    visited.insert(impl_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorImpl* p = node->parents[next++].get();
            if (visited.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    impl_->grad_span()[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (node->backward_fn && node->requires_grad) node->backward_fn(*node);
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace {

double scalar_precise(const std::shared_ptr<TensorImpl>& t) {
    return t->has_precise ? t->precise : static_cast<double>(t->value[0]);
}

void propagate_precise_unary(Tensor& out, const Tensor& a, double (*fn)(double, double), double arg) {
    if (out.numel() == 1 && a.impl_->has_precise) {
        out.impl_->precise = fn(scalar_precise(a.impl_), arg);
        out.impl_->has_precise = true;
    }
}

} // namespace


Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = make_result(a.shape(), {a, b});
    const auto& av = a.impl_->value;
    const auto& bv = b.impl_->value;
    auto& ov = out.impl_->value;
    for (std::size_t k = 0; k < ov.size(); ++k) ov[k] = av[k] + bv[k];
    if (out.numel() == 1 && (a.impl_->has_precise || b.impl_->has_precise)) {
        out.impl_->precise = scalar_precise(a.impl_) + scalar_precise(b.impl_);
        out.impl_->has_precise = true;
    }
    if (out.requires_grad()) {
        auto pa = a.impl_, pb = b.impl_;
        out.impl_->backward_fn = [pa, pb](TensorImpl& self) {
            if (pa->requires_grad) {
                auto g = pa->grad_span();
                for (std::size_t k = 0; k < g.size(); ++k) g[k] += self.grad[k];
            }
            if (pb->requires_grad) {
                auto g = pb->grad_span();
                for (std::size_t k = 0; k < g.size(); ++k) g[k] += self.grad[k];
            }
        };
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = make_result(a.shape(), {a, b});
    const auto& av = a.impl_->value;
    const auto& bv = b.impl_->value;
    auto& ov = out.impl_->value;
    for (std::size_t k = 0; k < ov.size(); ++k) ov[k] = av[k] - bv[k];
    if (out.numel() == 1 && (a.impl_->has_precise || b.impl_->has_precise)) {
        out.impl_->precise = scalar_precise(a.impl_) - scalar_precise(b.impl_);
        out.impl_->has_precise = true;
    }
    if (out.requires_grad()) {
        auto pa = a.impl_, pb = b.impl_;
        out.impl_->backward_fn = [pa, pb](TensorImpl& self) {
            if (pa->requires_grad) {
                auto g = pa->grad_span();
                for (std::size_t k = 0; k < g.size(); ++k) g[k] += self.grad[k];
            }
            if (pb->requires_grad) {
                auto g = pb->grad_span();
                for (std::size_t k = 0; k < g.size(); ++k) g[k] -= self.grad[k];
            }
        };
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = make_result(a.shape(), {a, b});
    const auto& av = a.impl_->value;
    const auto& bv = b.impl_->value;
    auto& ov = out.impl_->value;
    for (std::size_t k = 0; k < ov.size(); ++k) ov[k] = av[k] * bv[k];
    if (out.numel() == 1 && (a.impl_->has_precise || b.impl_->has_precise)) {
        out.impl_->precise = scalar_precise(a.impl_) * scalar_precise(b.impl_);
        out.impl_->has_precise = true;
    }
    if (out.requires_grad()) {
        auto pa = a.impl_, pb = b.impl_;
        out.impl_->backward_fn = [pa, pb](TensorImpl& self) {
            if (pa->requires_grad) {
                auto g = pa->grad_span();
                for (std::size_t k = 0; k < g.size(); ++k) g[k] += self.grad[k] * pb->value[k];
            }
            if (pb->requires_grad) {
                auto g = pb->grad_span();
                for (std::size_t k = 0; k < g.size(); ++k) g[k] += self.grad[k] * pa->value[k];
            }
        };
    }
    return out;
}

Tensor scale(const Tensor& a, float s) {
    Tensor out = make_result(a.shape(), {a});
    const auto& av = a.impl_->value;
    auto& ov = out.impl_->value;
    for (std::size_t k = 0; k < ov.size(); ++k) ov[k] = s * av[k];
    propagate_precise_unary(out, a, [](double x, double m) { return x * m; }, s);
    if (out.requires_grad()) {
        auto pa = a.impl_;
        out.impl_->backward_fn = [pa, s](TensorImpl& self) {
            auto g = pa->grad_span();
            for (std::size_t k = 0; k < g.size(); ++k) g[k] += s * self.grad[k];
        };
    }
    return out;
}

Tensor add_scalar(const Tensor& a, float s) {
    Tensor out = make_result(a.shape(), {a});
    const auto& av = a.impl_->value;
    auto& ov = out.impl_->value;
    for (std::size_t k = 0; k < ov.size(); ++k) ov[k] = av[k] + s;
    propagate_precise_unary(out, a, [](double x, double m) { return x + m; }, s);
    if (out.requires_grad()) {
        auto pa = a.impl_;
        out.impl_->backward_fn = [pa](TensorImpl& self) {
            auto g = pa->grad_span();
            for (std::size_t k = 0; k < g.size(); ++k) g[k] += self.grad[k];
        };
    }
    return out;
}

Tensor silu(const Tensor& a) {
    Tensor out = make_result(a.shape(), {a});
    const auto& av = a.impl_->value;
    auto& ov = out.impl_->value;
    for (std::size_t k = 0; k < ov.size(); ++k) {
        const float sig = 1.0f / (1.0f + std::exp(-av[k]));
        ov[k] = av[k] * sig;
    }
    if (out.requires_grad()) {
        auto pa = a.impl_;
        out.impl_->backward_fn = [pa](TensorImpl& self) {
            auto g = pa->grad_span();
            for (std::size_t k = 0; k < g.size(); ++k) {
                const float x = pa->value[k];
                const float sig = 1.0f / (1.0f + std::exp(-x));
                g[k] += self.grad[k] * sig * (1.0f + x * (1.0f - sig));
            }
        };
    }
    return out;
}

Tensor exp(const Tensor& a) {
    Tensor out = make_result(a.shape(), {a});
    const auto& av = a.impl_->value;
    auto& ov = out.impl_->value;
    for (std::size_t k = 0; k < ov.size(); ++k) ov[k] = std::exp(av[k]);
    check_finite(out, "exp");
    if (out.requires_grad()) {
        auto pa = a.impl_;
        auto po = out.impl_;
        out.impl_->backward_fn = [pa](TensorImpl& self) {
            auto g = pa->grad_span();
            for (std::size_t k = 0; k < g.size(); ++k) g[k] += self.grad[k] * self.value[k];
        };
        (void)po;
    }
    return out;
}

Tensor clamp(const Tensor& a, float lo, float hi) {
    Tensor out = make_result(a.shape(), {a});
    const auto& av = a.impl_->value;
    auto& ov = out.impl_->value;
    for (std::size_t k = 0; k < ov.size(); ++k) ov[k] = std::min(hi, std::max(lo, av[k]));
    if (out.requires_grad()) {
        auto pa = a.impl_;
        out.impl_->backward_fn = [pa, lo, hi](TensorImpl& self) {
            auto g = pa->grad_span();
            for (std::size_t k = 0; k < g.size(); ++k) {
                const float x = pa->value[k];
                if (x >= lo && x <= hi) g[k] += self.grad[k];
            }
        };
    }
    return out;
}

Tensor sum(const Tensor& a) {
    Tensor out = make_result({1}, {a});
    double acc = 0.0;
    for (float v : a.impl_->value) acc += v;
    out.impl_->value[0] = static_cast<float>(acc);
    out.impl_->precise = acc;
    out.impl_->has_precise = true;
    if (out.requires_grad()) {
        auto pa = a.impl_;
        out.impl_->backward_fn = [pa](TensorImpl& self) {
            auto g = pa->grad_span();
            const float gy = self.grad[0];
            for (std::size_t k = 0; k < g.size(); ++k) g[k] += gy;
        };
    }
    return out;
}

Tensor mean(const Tensor& a) {
    const float inv = 1.0f / static_cast<float>(a.numel());
    return scale(sum(a), inv);
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
    int B, Cin, H, W, Cout, K, Hout, Wout;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
    require(x.shape().size() == 4 && w.shape().size() == 4, "nn/shape-mismatch",
            "conv2d expects 4D input and kernel");
    ConvDims d;
    d.B = x.dim(0);
    d.Cin = x.dim(1);
    d.H = x.dim(2);
    d.W = x.dim(3);
    d.Cout = w.dim(0);
    d.K = w.dim(2);
    require(w.dim(1) == d.Cin, "nn/shape-mismatch", "conv2d kernel channel-in mismatch");
    require(w.dim(2) == w.dim(3), "nn/shape-mismatch", "conv2d expects square kernels");
    require(stride >= 1 && pad >= 0, "nn/shape-mismatch", "conv2d stride/pad invalid");
    d.Hout = (d.H + 2 * pad - d.K) / stride + 1;
    d.Wout = (d.W + 2 * pad - d.K) / stride + 1;
    require(d.Hout >= 1 && d.Wout >= 1, "nn/shape-mismatch", "conv2d output would be empty");
    return d;
}

/// cols (Cin*K*K, Hout*Wout) for one batch element.
void im2col(const float* x, const ConvDims& d, int stride, int pad, float* cols) {
    const int HW = d.Hout * d.Wout;
    for (int c = 0; c < d.Cin; ++c) {
        const float* xc = x + static_cast<std::size_t>(c) * d.H * d.W;
        for (int ki = 0; ki < d.K; ++ki) {
            for (int kj = 0; kj < d.K; ++kj) {
                float* row = cols + (static_cast<std::size_t>(c) * d.K * d.K + ki * d.K + kj) * HW;
                for (int oh = 0; oh < d.Hout; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    float* dst = row + static_cast<std::size_t>(oh) * d.Wout;
                    if (ih < 0 || ih >= d.H) {
                        std::fill(dst, dst + d.Wout, 0.0f);
                        continue;
                    }
                    const float* src = xc + static_cast<std::size_t>(ih) * d.W;
                    for (int ow = 0; ow < d.Wout; ++ow) {
                        const int iw = ow * stride - pad + kj;
                        dst[ow] = (iw >= 0 && iw < d.W) ? src[iw] : 0.0f;
                    }
                }
            }
        }
    }
}

void col2im_add(const float* cols, const ConvDims& d, int stride, int pad, float* dx) {
    const int HW = d.Hout * d.Wout;
    for (int c = 0; c < d.Cin; ++c) {
        float* xc = dx + static_cast<std::size_t>(c) * d.H * d.W;
        for (int ki = 0; ki < d.K; ++ki) {
            for (int kj = 0; kj < d.K; ++kj) {
                const float* row = cols + (static_cast<std::size_t>(c) * d.K * d.K + ki * d.K + kj) * HW;
                for (int oh = 0; oh < d.Hout; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= d.H) continue;
                    const float* src = row + static_cast<std::size_t>(oh) * d.Wout;
                    float* dst = xc + static_cast<std::size_t>(ih) * d.W;
                    for (int ow = 0; ow < d.Wout; ++ow) {
                        const int iw = ow * stride - pad + kj;
                        if (iw >= 0 && iw < d.W) dst[iw] += src[ow];
                    }
                }
            }
        }
    }
}

} // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    const ConvDims d = conv_dims(x, w, stride, pad);
    if (bias.defined())
        require(bias.numel() == static_cast<std::size_t>(d.Cout), "nn/shape-mismatch",
                "conv2d bias size mismatch");

    Tensor out = bias.defined() ? make_result({d.B, d.Cout, d.Hout, d.Wout}, {x, w, bias})
                                : make_result({d.B, d.Cout, d.Hout, d.Wout}, {x, w});
    const int HW = d.Hout * d.Wout;
    const int KC = d.Cin * d.K * d.K;
    std::vector<float> cols(static_cast<std::size_t>(KC) * HW);
    MapC wm(w.impl_->value.data(), d.Cout, KC);
    for (int b = 0; b < d.B; ++b) {
        const float* xb = x.impl_->value.data() + static_cast<std::size_t>(b) * d.Cin * d.H * d.W;
        im2col(xb, d, stride, pad, cols.data());
        MapC cm(cols.data(), KC, HW);
        MapM om(out.impl_->value.data() + static_cast<std::size_t>(b) * d.Cout * HW, d.Cout, HW);
        om.noalias() = wm * cm;
        if (bias.defined()) {
            for (int co = 0; co < d.Cout; ++co)
                om.row(co).array() += bias.impl_->value[static_cast<std::size_t>(co)];
        }
    }

    if (out.requires_grad()) {
        auto px = x.impl_;
        auto pw = w.impl_;
        auto pb = bias.defined() ? bias.impl_ : nullptr;
        out.impl_->backward_fn = [px, pw, pb, d, stride, pad](TensorImpl& self) {
            const int HW = d.Hout * d.Wout;
            const int KC = d.Cin * d.K * d.K;
            std::vector<float> cols(static_cast<std::size_t>(KC) * HW);
            std::vector<float> dcols(cols.size());
            MapC wm(pw->value.data(), d.Cout, KC);
            const bool need_dx = px->requires_grad;
            const bool need_dw = pw->requires_grad;
            MatRM dw_acc;
            if (need_dw) dw_acc = MatRM::Zero(d.Cout, KC);
            for (int b = 0; b < d.B; ++b) {
                MapC gom(self.grad.data() + static_cast<std::size_t>(b) * d.Cout * HW, d.Cout, HW);
                if (need_dw || need_dx) {
                    const float* xb = px->value.data() + static_cast<std::size_t>(b) * d.Cin * d.H * d.W;
                    im2col(xb, d, stride, pad, cols.data());
                }
                if (need_dw) {
                    MapC cm(cols.data(), KC, HW);
                    dw_acc.noalias() += gom * cm.transpose();
                }
                if (need_dx) {
                    MapM dcm(dcols.data(), KC, HW);
                    dcm.noalias() = wm.transpose() * gom;
                    float* dxb = px->grad_span().data() + static_cast<std::size_t>(b) * d.Cin * d.H * d.W;
                    col2im_add(dcols.data(), d, stride, pad, dxb);
                }
            }
            if (need_dw) {
                auto g = pw->grad_span();
                MapM(g.data(), d.Cout, KC) += dw_acc;
            }
            if (pb && pb->requires_grad) {
                auto g = pb->grad_span();
                for (int b = 0; b < d.B; ++b) {
                    MapC gom(self.grad.data() + static_cast<std::size_t>(b) * d.Cout * HW, d.Cout, HW);
                    for (int co = 0; co < d.Cout; ++co) g[static_cast<std::size_t>(co)] += gom.row(co).sum();
                }
            }
        };
    }
    return out;
}

Tensor upsample_nearest2(const Tensor& x) {
    require(x.shape().size() == 4, "nn/shape-mismatch", "upsample_nearest2 expects 4D");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor out = make_result({B, C, 2 * H, 2 * W}, {x});
    const auto& xv = x.impl_->value;
    auto& ov = out.impl_->value;
    for (int bc = 0; bc < B * C; ++bc) {
        const float* src = xv.data() + static_cast<std::size_t>(bc) * H * W;
        float* dst = ov.data() + static_cast<std::size_t>(bc) * 4 * H * W;
        for (int h = 0; h < H; ++h) {
            for (int w = 0; w < W; ++w) {
                const float v = src[h * W + w];
                float* d0 = dst + (2 * h) * 2 * W + 2 * w;
                d0[0] = v;
                d0[1] = v;
                d0[2 * W] = v;
                d0[2 * W + 1] = v;
            }
        }
    }
    if (out.requires_grad()) {
        auto px = x.impl_;
        out.impl_->backward_fn = [px, B, C, H, W](TensorImpl& self) {
            auto g = px->grad_span();
            for (int bc = 0; bc < B * C; ++bc) {
                const float* gs = self.grad.data() + static_cast<std::size_t>(bc) * 4 * H * W;
                float* gd = g.data() + static_cast<std::size_t>(bc) * H * W;
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) {
                        const float* s0 = gs + (2 * h) * 2 * W + 2 * w;
                        gd[h * W + w] += s0[0] + s0[1] + s0[2 * W] + s0[2 * W + 1];
                    }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// group_norm
// ---------------------------------------------------------------------------

Tensor group_norm(const Tensor& x, int groups, const Tensor& gain, const Tensor& bias, float eps) {
    require(x.shape().size() == 4, "nn/shape-mismatch", "group_norm expects 4D");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(groups >= 1 && C % groups == 0, "nn/groupnorm-groups",
            "channels " + std::to_string(C) + " not divisible by groups " + std::to_string(groups));
    require(gain.numel() == static_cast<std::size_t>(C) && bias.numel() == static_cast<std::size_t>(C),
            "nn/shape-mismatch", "group_norm affine parameter size mismatch");

    const int cpg = C / groups;
    const int spatial = H * W;
    const std::size_t gsz = static_cast<std::size_t>(cpg) * spatial;

    Tensor out = make_result(x.shape(), {x, gain, bias});
    std::vector<float> inv_std(static_cast<std::size_t>(B) * groups);
    std::vector<float> means(inv_std.size());

    const auto& xv = x.impl_->value;
    auto& ov = out.impl_->value;
    for (int b = 0; b < B; ++b) {
        for (int g = 0; g < groups; ++g) {
            const std::size_t base = (static_cast<std::size_t>(b) * C + static_cast<std::size_t>(g) * cpg) * spatial;
            double m = 0.0;
            for (std::size_t k = 0; k < gsz; ++k) m += xv[base + k];
            m /= static_cast<double>(gsz);
            double var = 0.0;
            for (std::size_t k = 0; k < gsz; ++k) {
                const double dv = xv[base + k] - m;
                var += dv * dv;
            }
            var /= static_cast<double>(gsz);
            const float istd = static_cast<float>(1.0 / std::sqrt(var + eps));
            const std::size_t sg = static_cast<std::size_t>(b) * groups + g;
            inv_std[sg] = istd;
            means[sg] = static_cast<float>(m);
            for (int c = 0; c < cpg; ++c) {
                const float ga = gain.impl_->value[static_cast<std::size_t>(g) * cpg + c];
                const float be = bias.impl_->value[static_cast<std::size_t>(g) * cpg + c];
                const std::size_t cb = base + static_cast<std::size_t>(c) * spatial;
                for (int s = 0; s < spatial; ++s) {
                    const float xh = (xv[cb + s] - means[sg]) * istd;
                    ov[cb + s] = ga * xh + be;
                }
            }
        }
    }

    if (out.requires_grad()) {
        auto px = x.impl_;
        auto pg = gain.impl_;
        auto pb = bias.impl_;
        out.impl_->backward_fn = [px, pg, pb, B, C, H, W, groups, cpg,
                                  inv_std = std::move(inv_std), means = std::move(means)](TensorImpl& self) {
            const int spatial = H * W;
            const std::size_t gsz = static_cast<std::size_t>(cpg) * spatial;
            std::vector<float> xhat(gsz), dxhat(gsz);
            for (int b = 0; b < B; ++b) {
                for (int g = 0; g < groups; ++g) {
                    const std::size_t base =
                        (static_cast<std::size_t>(b) * C + static_cast<std::size_t>(g) * cpg) * spatial;
                    const std::size_t sg = static_cast<std::size_t>(b) * groups + g;
                    const float istd = inv_std[sg], m = means[sg];
                    for (std::size_t k = 0; k < gsz; ++k) xhat[k] = (px->value[base + k] - m) * istd;

                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (int c = 0; c < cpg; ++c) {
                        const float ga = pg->value[static_cast<std::size_t>(g) * cpg + c];
                        const std::size_t cb = static_cast<std::size_t>(c) * spatial;
                        for (int s = 0; s < spatial; ++s) {
                            const float dy = self.grad[base + cb + s];
                            const float dh = dy * ga;
                            dxhat[cb + s] = dh;
                            sum_dxhat += dh;
                            sum_dxhat_xhat += static_cast<double>(dh) * xhat[cb + s];
                        }
                    }
                    if (pg->requires_grad || pb->requires_grad) {
                        auto gg = pg->grad_span();
                        auto gb = pb->grad_span();
                        for (int c = 0; c < cpg; ++c) {
                            const std::size_t cb = static_cast<std::size_t>(c) * spatial;
                            double dga = 0.0, dbe = 0.0;
                            for (int s = 0; s < spatial; ++s) {
                                const float dy = self.grad[base + cb + s];
                                dga += static_cast<double>(dy) * xhat[cb + s];
                                dbe += dy;
                            }
                            gg[static_cast<std::size_t>(g) * cpg + c] += static_cast<float>(dga);
                            gb[static_cast<std::size_t>(g) * cpg + c] += static_cast<float>(dbe);
                        }
                    }
                    if (px->requires_grad) {
                        auto gx = px->grad_span();
                        const float mean_dxhat = static_cast<float>(sum_dxhat / static_cast<double>(gsz));
                        const float mean_dxx = static_cast<float>(sum_dxhat_xhat / static_cast<double>(gsz));
                        for (std::size_t k = 0; k < gsz; ++k)
                            gx[base + k] += istd * (dxhat[k] - mean_dxhat - xhat[k] * mean_dxx);
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    require(x.shape().size() == 2 && w.shape().size() == 2, "nn/shape-mismatch",
            "linear expects 2D input and weight");
    const int B = x.dim(0), in = x.dim(1), out_f = w.dim(0);
    require(w.dim(1) == in, "nn/shape-mismatch", "linear weight in-features mismatch");
    if (bias.defined())
        require(bias.numel() == static_cast<std::size_t>(out_f), "nn/shape-mismatch",
                "linear bias size mismatch");

    Tensor out = bias.defined() ? make_result({B, out_f}, {x, w, bias})
                                : make_result({B, out_f}, {x, w});
    MapC xm(x.impl_->value.data(), B, in);
    MapC wm(w.impl_->value.data(), out_f, in);
    MapM om(out.impl_->value.data(), B, out_f);
    om.noalias() = xm * wm.transpose();
    if (bias.defined())
        for (int b = 0; b < B; ++b)
            for (int f = 0; f < out_f; ++f) om(b, f) += bias.impl_->value[static_cast<std::size_t>(f)];

    if (out.requires_grad()) {
        auto px = x.impl_;
        auto pw = w.impl_;
        auto pb = bias.defined() ? bias.impl_ : nullptr;
        out.impl_->backward_fn = [px, pw, pb, B, in, out_f](TensorImpl& self) {
            MapC gom(self.grad.data(), B, out_f);
            if (px->requires_grad) {
                MapC wm(pw->value.data(), out_f, in);
                MapM gxm(px->grad_span().data(), B, in);
                gxm.noalias() += gom * wm;
            }
            if (pw->requires_grad) {
                MapC xm(px->value.data(), B, in);
                MapM gwm(pw->grad_span().data(), out_f, in);
                gwm.noalias() += gom.transpose() * xm;
            }
            if (pb && pb->requires_grad) {
                auto g = pb->grad_span();
                for (int b = 0; b < B; ++b)
                    for (int f = 0; f < out_f; ++f) g[static_cast<std::size_t>(f)] += gom(b, f);
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// self-attention
// ---------------------------------------------------------------------------

namespace {

/// Extract (L, C) position-major view of one batch element of a (B,C,H,W) buffer.
void gather_positions(const float* x, int C, int L, MatRM& out) {
    out.resize(L, C);
    for (int c = 0; c < C; ++c)
        for (int l = 0; l < L; ++l) out(l, c) = x[static_cast<std::size_t>(c) * L + l];
}

void scatter_positions_add(const MatRM& m, int C, int L, float* x) {
    for (int c = 0; c < C; ++c)
        for (int l = 0; l < L; ++l) x[static_cast<std::size_t>(c) * L + l] += m(l, c);
}

void softmax_rows(MatRM& s) {
    for (int r = 0; r < s.rows(); ++r) {
        const float mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp();
        s.row(r) /= s.row(r).sum();
    }
}

} // namespace

Tensor self_attention(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv) {
    require(x.shape().size() == 4, "nn/shape-mismatch", "self_attention expects 4D");
    const int B = x.dim(0), C = x.dim(1), L = x.dim(2) * x.dim(3);
    for (const Tensor* w : {&wq, &wk, &wv})
        require(w->shape() == Shape{C, C}, "nn/shape-mismatch", "attention projection must be (C,C)");

    Tensor out = make_result(x.shape(), {x, wq, wk, wv});
    const float inv_sqrt_c = 1.0f / std::sqrt(static_cast<float>(C));
    MapC wqm(wq.impl_->value.data(), C, C);
    MapC wkm(wk.impl_->value.data(), C, C);
    MapC wvm(wv.impl_->value.data(), C, C);

    MatRM X, Q, K, V, S, O;
    for (int b = 0; b < B; ++b) {
        const float* xb = x.impl_->value.data() + static_cast<std::size_t>(b) * C * L;
        float* ob = out.impl_->value.data() + static_cast<std::size_t>(b) * C * L;
        gather_positions(xb, C, L, X);
        Q.noalias() = X * wqm.transpose();
        K.noalias() = X * wkm.transpose();
        V.noalias() = X * wvm.transpose();
        S.noalias() = Q * K.transpose() * inv_sqrt_c;
        softmax_rows(S);
        O.noalias() = S * V;
        std::copy(xb, xb + static_cast<std::size_t>(C) * L, ob); // residual
        scatter_positions_add(O, C, L, ob);
    }

    if (out.requires_grad()) {
        auto px = x.impl_;
        auto pq = wq.impl_;
        auto pk = wk.impl_;
        auto pv = wv.impl_;
        out.impl_->backward_fn = [px, pq, pk, pv, B, C, L, inv_sqrt_c](TensorImpl& self) {
            MapC wqm(pq->value.data(), C, C);
            MapC wkm(pk->value.data(), C, C);
            MapC wvm(pv->value.data(), C, C);
            MatRM X, Q, K, V, S, dO, dA, dV, dS, dQ, dK, dX;
            for (int b = 0; b < B; ++b) {
                const float* xb = px->value.data() + static_cast<std::size_t>(b) * C * L;
                const float* gb = self.grad.data() + static_cast<std::size_t>(b) * C * L;
                gather_positions(xb, C, L, X);
                Q.noalias() = X * wqm.transpose();
                K.noalias() = X * wkm.transpose();
                V.noalias() = X * wvm.transpose();
                S.noalias() = Q * K.transpose() * inv_sqrt_c;
                softmax_rows(S);
                gather_positions(gb, C, L, dO);

                dA.noalias() = dO * V.transpose();
                dV.noalias() = S.transpose() * dO;
                dS = S.cwiseProduct(dA);
                Eigen::VectorXf rowsum = dS.rowwise().sum();
                dS.noalias() -= (rowsum * Eigen::RowVectorXf::Ones(L)).cwiseProduct(S);
                dS *= inv_sqrt_c;
                dQ.noalias() = dS * K;
                dK.noalias() = dS.transpose() * Q;

                if (px->requires_grad) {
                    float* gx = px->grad_span().data() + static_cast<std::size_t>(b) * C * L;
                    for (std::size_t k = 0; k < static_cast<std::size_t>(C) * L; ++k) gx[k] += gb[k];
                    dX.noalias() = dQ * wqm + dK * wkm + dV * wvm;
                    scatter_positions_add(dX, C, L, gx);
                }
                if (pq->requires_grad) MapM(pq->grad_span().data(), C, C) += dQ.transpose() * X;
                if (pk->requires_grad) MapM(pk->grad_span().data(), C, C) += dK.transpose() * X;
                if (pv->requires_grad) MapM(pv->grad_span().data(), C, C) += dV.transpose() * X;
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// channel concat / slice / bias
// ---------------------------------------------------------------------------

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require(a.shape().size() == 4 && b.shape().size() == 4, "nn/shape-mismatch",
            "concat_channels expects 4D");
    const int B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    require(b.dim(0) == B && b.dim(2) == H && b.dim(3) == W, "nn/shape-mismatch",
            "concat_channels batch/spatial mismatch");
    Tensor out = make_result({B, Ca + Cb, H, W}, {a, b});
    const std::size_t sp = static_cast<std::size_t>(H) * W;
    auto& ov = out.impl_->value;
    for (int bi = 0; bi < B; ++bi) {
        const float* pa = a.impl_->value.data() + static_cast<std::size_t>(bi) * Ca * sp;
        const float* pb = b.impl_->value.data() + static_cast<std::size_t>(bi) * Cb * sp;
        float* po = ov.data() + static_cast<std::size_t>(bi) * (Ca + Cb) * sp;
        std::copy(pa, pa + Ca * sp, po);
        std::copy(pb, pb + Cb * sp, po + Ca * sp);
    }
    if (out.requires_grad()) {
        auto ia = a.impl_, ib = b.impl_;
        out.impl_->backward_fn = [ia, ib, B, Ca, Cb, sp](TensorImpl& self) {
            for (int bi = 0; bi < B; ++bi) {
                const float* go = self.grad.data() + static_cast<std::size_t>(bi) * (Ca + Cb) * sp;
                if (ia->requires_grad) {
                    float* ga = ia->grad_span().data() + static_cast<std::size_t>(bi) * Ca * sp;
                    for (std::size_t k = 0; k < Ca * sp; ++k) ga[k] += go[k];
                }
                if (ib->requires_grad) {
                    float* gb = ib->grad_span().data() + static_cast<std::size_t>(bi) * Cb * sp;
                    for (std::size_t k = 0; k < Cb * sp; ++k) gb[k] += go[Ca * sp + k];
                }
            }
        };
    }
    return out;
}

Tensor slice_channels(const Tensor& x, int c0, int c1) {
    require(x.shape().size() == 4, "nn/shape-mismatch", "slice_channels expects 4D");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(0 <= c0 && c0 < c1 && c1 <= C, "nn/shape-mismatch", "slice_channels bad range");
    const int Cs = c1 - c0;
    Tensor out = make_result({B, Cs, H, W}, {x});
    const std::size_t sp = static_cast<std::size_t>(H) * W;
    for (int bi = 0; bi < B; ++bi) {
        const float* px = x.impl_->value.data() + (static_cast<std::size_t>(bi) * C + c0) * sp;
        float* po = out.impl_->value.data() + static_cast<std::size_t>(bi) * Cs * sp;
        std::copy(px, px + Cs * sp, po);
    }
    if (out.requires_grad()) {
        auto ix = x.impl_;
        out.impl_->backward_fn = [ix, B, C, Cs, c0, sp](TensorImpl& self) {
            for (int bi = 0; bi < B; ++bi) {
                float* gx = ix->grad_span().data() + (static_cast<std::size_t>(bi) * C + c0) * sp;
                const float* go = self.grad.data() + static_cast<std::size_t>(bi) * Cs * sp;
                for (std::size_t k = 0; k < Cs * sp; ++k) gx[k] += go[k];
            }
        };
    }
    return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& e) {
    require(x.shape().size() == 4 && e.shape().size() == 2, "nn/shape-mismatch",
            "add_channel_bias expects 4D + 2D");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(e.dim(0) == B && e.dim(1) == C, "nn/shape-mismatch", "add_channel_bias (B,C) mismatch");
    Tensor out = make_result(x.shape(), {x, e});
    const std::size_t sp = static_cast<std::size_t>(H) * W;
    auto& ov = out.impl_->value;
    for (int bi = 0; bi < B; ++bi)
        for (int c = 0; c < C; ++c) {
            const float ev = e.impl_->value[static_cast<std::size_t>(bi) * C + c];
            const std::size_t base = (static_cast<std::size_t>(bi) * C + c) * sp;
            for (std::size_t s = 0; s < sp; ++s) ov[base + s] = x.impl_->value[base + s] + ev;
        }
    if (out.requires_grad()) {
        auto ix = x.impl_, ie = e.impl_;
        out.impl_->backward_fn = [ix, ie, B, C, sp](TensorImpl& self) {
            if (ix->requires_grad) {
                auto g = ix->grad_span();
                for (std::size_t k = 0; k < g.size(); ++k) g[k] += self.grad[k];
            }
            if (ie->requires_grad) {
                auto g = ie->grad_span();
                for (int bi = 0; bi < B; ++bi)
                    for (int c = 0; c < C; ++c) {
                        const std::size_t base = (static_cast<std::size_t>(bi) * C + c) * sp;
                        double acc = 0.0;
                        for (std::size_t s = 0; s < sp; ++s) acc += self.grad[base + s];
                        g[static_cast<std::size_t>(bi) * C + c] += static_cast<float>(acc);
                    }
            }
        };
    }
    return out;
}

} // namespace geoldm::nn
