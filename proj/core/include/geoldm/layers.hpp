#pragma once

#include <map>
#include <string>
#include <vector>

#include "geoldm/tensor.hpp"

namespace geoldm::nn {

/// Named parameter registry. Registration order is preserved so checkpoints
/// serialize deterministically.
class ParamSet {
public:
    Tensor create(const std::string& name, Shape shape) {
        require(!index_.count(name), "nn/param-duplicate", "parameter '" + name + "' already exists");
        Tensor t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
        index_[name] = entries_.size();
        entries_.push_back({name, t});
        return t;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Tensor at(const std::string& name) const {
        auto it = index_.find(name);
        require(it != index_.end(), "nn/param-missing", "no parameter named '" + name + "'");
        return entries_[it->second].second;
    }

    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

    void zero_grad() {
        for (auto& [name, t] : entries_) t.zero_grad();
    }

    std::size_t total_parameters() const {
        std::size_t n = 0;
        for (const auto& [name, t] : entries_) n += t.numel();
        return n;
    }

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::map<std::string, std::size_t> index_;
};

/// Largest divisor of `channels` that is <= 8, for group-norm group counts.
int norm_groups_for(int channels);

struct Conv2d {
    Tensor w, b;
    int stride = 1, pad = 0;

    Conv2d() = default;
    /// Kaiming-uniform kernel (zeroed when zero_init), zero bias.
    Conv2d(ParamSet& params, const std::string& name, int cin, int cout, int k, int stride,
           int pad, Rng& rng, bool zero_init = false);

    Tensor operator()(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
};

struct GroupNorm {
    Tensor gain, bias;
    int groups = 1;
    float eps = 1e-5f;

    GroupNorm() = default;
    GroupNorm(ParamSet& params, const std::string& name, int channels);

    Tensor operator()(const Tensor& x) const { return group_norm(x, groups, gain, bias, eps); }
};

struct Linear {
    Tensor w, b;

    Linear() = default;
    Linear(ParamSet& params, const std::string& name, int in, int out, Rng& rng,
           bool zero_init = false);

    Tensor operator()(const Tensor& x) const { return linear(x, w, b); }
};

struct SelfAttention {
    Tensor wq, wk, wv;

    SelfAttention() = default;
    /// Value projection zero-initialized so the residual block starts as identity.
    SelfAttention(ParamSet& params, const std::string& name, int channels, Rng& rng);

    Tensor operator()(const Tensor& x) const { return self_attention(x, wq, wk, wv); }
};

/// norm-act-conv twice with a residual skip (1x1 projection when the channel
/// count changes); optional per-block projection of a conditioning embedding
/// added channel-wise between the convolutions. Second conv zero-initialized.
struct ResBlock {
    GroupNorm gn1, gn2;
    Conv2d conv1, conv2, skip;
    Linear emb_proj;
    bool has_skip = false;
    bool has_emb = false;

    ResBlock() = default;
    ResBlock(ParamSet& params, const std::string& name, int cin, int cout, int emb_dim, Rng& rng);

    Tensor operator()(const Tensor& x) const;
    Tensor operator()(const Tensor& x, const Tensor& emb) const;
};

/// Sinusoidal embedding of integer timesteps, shape (t.size(), dim).
Tensor timestep_embedding(const std::vector<int>& t, int dim);

} // namespace geoldm::nn
