#include "geoldm/layers.hpp"

#include <cmath>

namespace geoldm::nn {

int norm_groups_for(int channels) {
    // keep at least two channels per group so per-channel shifts (conv biases,
    // timestep embeddings) are not cancelled exactly by the normalization
    for (int g = std::min(8, channels / 2); g > 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

namespace {

void kaiming_uniform(Tensor& t, int fan_in, Rng& rng) {
    const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
    for (auto& v : t.data()) v = static_cast<float>(rng.uniform(-bound, bound));
}

} // namespace

Conv2d::Conv2d(ParamSet& params, const std::string& name, int cin, int cout, int k, int stride_,
               int pad_, Rng& rng, bool zero_init)
    : stride(stride_), pad(pad_) {
    w = params.create(name + ".w", {cout, cin, k, k});
    b = params.create(name + ".b", {cout});
    if (!zero_init) kaiming_uniform(w, cin * k * k, rng);
}

GroupNorm::GroupNorm(ParamSet& params, const std::string& name, int channels)
    : groups(norm_groups_for(channels)) {
    gain = params.create(name + ".gain", {channels});
    bias = params.create(name + ".bias", {channels});
    for (auto& v : gain.data()) v = 1.0f;
}

Linear::Linear(ParamSet& params, const std::string& name, int in, int out, Rng& rng,
               bool zero_init) {
    w = params.create(name + ".w", {out, in});
    b = params.create(name + ".b", {out});
    if (!zero_init) kaiming_uniform(w, in, rng);
}

SelfAttention::SelfAttention(ParamSet& params, const std::string& name, int channels, Rng& rng) {
    wq = params.create(name + ".wq", {channels, channels});
    wk = params.create(name + ".wk", {channels, channels});
    wv = params.create(name + ".wv", {channels, channels});
    kaiming_uniform(wq, channels, rng);
    kaiming_uniform(wk, channels, rng);
    // wv stays zero: the residual attention starts as identity.
}

ResBlock::ResBlock(ParamSet& params, const std::string& name, int cin, int cout, int emb_dim,
                   Rng& rng) {
    gn1 = GroupNorm(params, name + ".gn1", cin);
    conv1 = Conv2d(params, name + ".conv1", cin, cout, 3, 1, 1, rng);
    gn2 = GroupNorm(params, name + ".gn2", cout);
    conv2 = Conv2d(params, name + ".conv2", cout, cout, 3, 1, 1, rng, /*zero_init=*/true);
    if (cin != cout) {
        skip = Conv2d(params, name + ".skip", cin, cout, 1, 1, 0, rng);
        has_skip = true;
    }
    if (emb_dim > 0) {
        emb_proj = Linear(params, name + ".emb", emb_dim, cout, rng);
        has_emb = true;
    }
}

Tensor ResBlock::operator()(const Tensor& x) const {
    Tensor h = conv1(silu(gn1(x)));
    h = conv2(silu(gn2(h)));
    return add(has_skip ? skip(x) : x, h);
}

Tensor ResBlock::operator()(const Tensor& x, const Tensor& emb) const {
    require(has_emb, "nn/resblock", "block built without embedding projection");
    Tensor h = conv1(silu(gn1(x)));
    h = add_channel_bias(h, emb_proj(silu(emb)));
    h = conv2(silu(gn2(h)));
    return add(has_skip ? skip(x) : x, h);
}

Tensor timestep_embedding(const std::vector<int>& t, int dim) {
    require(dim >= 2 && dim % 2 == 0, "nn/timestep-emb", "embedding dim must be even and >= 2");
    const int half = dim / 2;
    const int B = static_cast<int>(t.size());
    Tensor e = Tensor::zeros({B, dim});
    auto d = e.data();
    for (int b = 0; b < B; ++b) {
        for (int k = 0; k < half; ++k) {
            const double freq = std::exp(-std::log(10000.0) * k / half);
            const double arg = static_cast<double>(t[static_cast<std::size_t>(b)]) * freq;
            d[static_cast<std::size_t>(b) * dim + k] = static_cast<float>(std::sin(arg));
            d[static_cast<std::size_t>(b) * dim + half + k] = static_cast<float>(std::cos(arg));
        }
    }
    return e;
}

} // namespace geoldm::nn
