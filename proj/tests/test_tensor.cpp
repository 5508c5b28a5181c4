#include "doctest.h"

#include <cmath>

#include "geoldm/optim.hpp"
#include "geoldm/tensor.hpp"

using namespace geoldm;
using nn::Tensor;

namespace {

/// Independent 6-loop cross-correlation reference.
std::vector<float> conv_reference(const Tensor& x, const Tensor& w, int stride, int pad) {
    const int B = x.shape()[0], Cin = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const int Cout = w.shape()[0], K = w.shape()[2];
    const int Ho = (H + 2 * pad - K) / stride + 1;
    const int Wo = (W + 2 * pad - K) / stride + 1;
    std::vector<float> out(static_cast<std::size_t>(B) * Cout * Ho * Wo, 0.0f);
    auto xv = x.data();
    auto wv = w.data();
    for (int b = 0; b < B; ++b)
        for (int co = 0; co < Cout; ++co)
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow) {
                    double acc = 0.0;
                    for (int ci = 0; ci < Cin; ++ci)
                        for (int ki = 0; ki < K; ++ki)
                            for (int kj = 0; kj < K; ++kj) {
                                const int ih = oh * stride - pad + ki;
                                const int iw = ow * stride - pad + kj;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += static_cast<double>(
                                           xv[((static_cast<std::size_t>(b) * Cin + ci) * H + ih) * W + iw]) *
                                       wv[((static_cast<std::size_t>(co) * Cin + ci) * K + ki) * K + kj];
                            }
                    out[((static_cast<std::size_t>(b) * Cout + co) * Ho + oh) * Wo + ow] =
                        static_cast<float>(acc);
                }
    return out;
}

/// Dense single-head attention oracle: y = x + softmax(QK^T/sqrt(C)) V.
std::vector<float> attention_reference(const Tensor& x, const Tensor& wq, const Tensor& wk,
                                       const Tensor& wv) {
    const int B = x.shape()[0], C = x.shape()[1], L = x.shape()[2] * x.shape()[3];
    auto xv = x.data();
    auto project = [&](std::span<const float> wm, int b, int l, int c) {
        double acc = 0.0;
        for (int ci = 0; ci < C; ++ci)
            acc += static_cast<double>(xv[(static_cast<std::size_t>(b) * C + ci) * L + l]) *
                   wm[static_cast<std::size_t>(c) * C + ci];
        return acc;
    };
    std::vector<float> out(x.numel());
    for (int b = 0; b < B; ++b) {
        std::vector<double> q(static_cast<std::size_t>(L) * C), k(q.size()), v(q.size());
        for (int l = 0; l < L; ++l)
            for (int c = 0; c < C; ++c) {
                q[static_cast<std::size_t>(l) * C + c] = project(wq.data(), b, l, c);
                k[static_cast<std::size_t>(l) * C + c] = project(wk.data(), b, l, c);
                v[static_cast<std::size_t>(l) * C + c] = project(wv.data(), b, l, c);
            }
        for (int l = 0; l < L; ++l) {
            std::vector<double> scores(static_cast<std::size_t>(L));
            double mx = -1e300;
            for (int m = 0; m < L; ++m) {
                double s = 0.0;
                for (int c = 0; c < C; ++c)
                    s += q[static_cast<std::size_t>(l) * C + c] * k[static_cast<std::size_t>(m) * C + c];
                scores[static_cast<std::size_t>(m)] = s / std::sqrt(static_cast<double>(C));
                mx = std::max(mx, scores[static_cast<std::size_t>(m)]);
            }
            double z = 0.0;
            for (auto& s : scores) {
                s = std::exp(s - mx);
                z += s;
            }
            for (int c = 0; c < C; ++c) {
                double acc = 0.0;
                for (int m = 0; m < L; ++m)
                    acc += scores[static_cast<std::size_t>(m)] / z * v[static_cast<std::size_t>(m) * C + c];
                out[(static_cast<std::size_t>(b) * C + c) * L + l] =
                    xv[(static_cast<std::size_t>(b) * C + c) * L + l] + static_cast<float>(acc);
            }
        }
    }
    return out;
}

} // namespace

TEST_CASE("conv2d with a unit 1x1 kernel is the identity") {
    Rng rng(3);
    Tensor x = Tensor::randn({2, 3, 5, 5}, rng);
    Tensor w = Tensor::zeros({3, 3, 1, 1});
    for (int c = 0; c < 3; ++c) w.data()[static_cast<std::size_t>(c) * 3 + c] = 1.0f;
    Tensor y = nn::conv2d(x, w, {}, 1, 0);
    REQUIRE(y.shape() == x.shape());
    for (std::size_t k = 0; k < x.numel(); ++k) CHECK(y.data()[k] == doctest::Approx(x.data()[k]));
}

TEST_CASE("conv2d shape arithmetic: 64x64, 3x3, stride 2, pad 1 gives 32x32") {
    Tensor x = Tensor::zeros({1, 1, 64, 64});
    Tensor w = Tensor::zeros({4, 1, 3, 3});
    Tensor y = nn::conv2d(x, w, {}, 2, 1);
    CHECK(y.shape() == nn::Shape{1, 4, 32, 32});
}

TEST_CASE("conv2d of constant input with an all-ones 3x3 kernel gives 9c") {
    const float c = 0.37f;
    Tensor x = Tensor::full({1, 1, 6, 6}, c);
    Tensor w = Tensor::full({1, 1, 3, 3}, 1.0f);
    Tensor y = nn::conv2d(x, w, {}, 1, 0);
    CHECK(y.shape() == nn::Shape{1, 1, 4, 4});
    for (float v : y.data()) CHECK(v == doctest::Approx(9.0f * c));
}

TEST_CASE("conv2d matches the naive reference on random 8x8 input") {
    Rng rng(11);
    Tensor x = Tensor::randn({2, 3, 8, 8}, rng);
    Tensor w = Tensor::randn({4, 3, 3, 3}, rng, 0.5f);
    for (auto [stride, pad] : {std::pair{1, 0}, {1, 1}, {2, 1}}) {
        Tensor y = nn::conv2d(x, w, {}, stride, pad);
        const auto ref = conv_reference(x, w, stride, pad);
        REQUIRE(y.numel() == ref.size());
        for (std::size_t k = 0; k < ref.size(); ++k)
            CHECK(std::abs(y.data()[k] - ref[k]) < 1e-6f * std::max(1.0f, std::abs(ref[k])));
    }
}

TEST_CASE("self_attention matches the dense oracle") {
    Rng rng(23);
    Tensor x = Tensor::randn({2, 4, 2, 2}, rng, 0.7f);
    Tensor wq = Tensor::randn({4, 4}, rng, 0.3f);
    Tensor wk = Tensor::randn({4, 4}, rng, 0.3f);
    Tensor wv = Tensor::randn({4, 4}, rng, 0.3f);
    Tensor y = nn::self_attention(x, wq, wk, wv);
    const auto ref = attention_reference(x, wq, wk, wv);
    for (std::size_t k = 0; k < ref.size(); ++k) CHECK(std::abs(y.data()[k] - ref[k]) < 1e-6f);
}

TEST_CASE("grad_check: quadratic") {
    Rng rng(5);
    Tensor x = Tensor::full({4, 3}, 1.0f, true);
    auto fwd = [&] { return nn::sum(nn::mul(x, x)); };
    // analytic gradient of sum(x^2) at ones is 2 everywhere
    x.zero_grad();
    Tensor loss = fwd();
    loss.backward();
    for (float g : x.grad()) CHECK(g == doctest::Approx(2.0f));
    // a quadratic has no truncation error, so an exactly representable step
    // keeps the central difference float-exact
    CHECK(nn::grad_check(fwd, {x}, 0.5) < 1e-6);
}

TEST_CASE("grad_check: conv2d on a 6x6 input") {
    Rng rng(7);
    Tensor x = Tensor::randn({1, 2, 6, 6}, rng, 0.5f, true);
    Tensor w = Tensor::randn({2, 2, 3, 3}, rng, 0.4f, true);
    auto fwd = [&] { return nn::mean(nn::conv2d(x, w, {}, 1, 1)); };
    CHECK(nn::grad_check(fwd, {x, w}, 1e-3) < 1e-3);
}

TEST_CASE("grad_check: self_attention on a 2x2 input") {
    Rng rng(9);
    Tensor x = Tensor::randn({1, 3, 2, 2}, rng, 0.5f, true);
    Tensor wq = Tensor::randn({3, 3}, rng, 0.4f, true);
    Tensor wk = Tensor::randn({3, 3}, rng, 0.4f, true);
    Tensor wv = Tensor::randn({3, 3}, rng, 0.4f, true);
    auto fwd = [&] { return nn::mean(nn::self_attention(x, wq, wk, wv)); };
    CHECK(nn::grad_check(fwd, {x, wq, wk, wv}, 1e-2) < 1e-3);
}

TEST_CASE("grad_check: remaining elementwise and structured ops") {
    Rng rng(13);
    SUBCASE("silu") {
        Tensor x = Tensor::randn({3, 3}, rng, 1.0f, true);
        CHECK(nn::grad_check([&] { return nn::sum(nn::silu(x)); }, {x}, 1e-3) < 1e-3);
    }
    SUBCASE("exp") {
        Tensor x = Tensor::randn({3, 3}, rng, 0.5f, true);
        CHECK(nn::grad_check([&] { return nn::sum(nn::exp(x)); }, {x}, 1e-3) < 1e-3);
    }
    SUBCASE("upsample") {
        Tensor x = Tensor::randn({1, 2, 3, 3}, rng, 1.0f, true);
        CHECK(nn::grad_check([&] { return nn::mean(nn::upsample_nearest2(x)); }, {x}, 1e-3) < 1e-3);
    }
    SUBCASE("linear") {
        Tensor x = Tensor::randn({3, 4}, rng, 0.5f, true);
        Tensor w = Tensor::randn({2, 4}, rng, 0.5f, true);
        Tensor b = Tensor::randn({2}, rng, 0.5f, true);
        CHECK(nn::grad_check([&] { return nn::mean(nn::linear(x, w, b)); }, {x, w, b}, 1e-3) < 1e-3);
    }
    SUBCASE("concat and slice") {
        Tensor a = Tensor::randn({1, 2, 2, 2}, rng, 1.0f, true);
        Tensor b = Tensor::randn({1, 3, 2, 2}, rng, 1.0f, true);
        auto fwd = [&] {
            Tensor cat = nn::concat_channels(a, b);
            return nn::sum(nn::mul(nn::slice_channels(cat, 1, 4), nn::slice_channels(cat, 1, 4)));
        };
        CHECK(nn::grad_check(fwd, {a, b}, 1e-3) < 1e-3);
    }
    SUBCASE("channel bias") {
        Tensor x = Tensor::randn({2, 3, 2, 2}, rng, 1.0f, true);
        Tensor e = Tensor::randn({2, 3}, rng, 1.0f, true);
        auto fwd = [&] {
            Tensor y = nn::add_channel_bias(x, e);
            return nn::sum(nn::mul(y, y));
        };
        CHECK(nn::grad_check(fwd, {x, e}, 1e-3) < 2e-3);
    }
}

TEST_CASE("forward passes are deterministic") {
    Rng rng(31);
    Tensor x = Tensor::randn({1, 2, 4, 4}, rng);
    Tensor w = Tensor::randn({2, 2, 3, 3}, rng);
    Tensor y1 = nn::conv2d(x, w, {}, 1, 1);
    Tensor y2 = nn::conv2d(x, w, {}, 1, 1);
    for (std::size_t k = 0; k < y1.numel(); ++k) CHECK(y1.data()[k] == y2.data()[k]);
}

TEST_CASE("shape mismatches are rejected") {
    Tensor a = Tensor::zeros({2, 2});
    Tensor b = Tensor::zeros({2, 3});
    CHECK_THROWS_AS((void)nn::add(a, b), Error);
    Tensor x = Tensor::zeros({1, 2, 4, 4});
    Tensor w = Tensor::zeros({2, 3, 3, 3});
    CHECK_THROWS_AS((void)nn::conv2d(x, w, {}, 1, 1), Error);
}
