#pragma once

#include <filesystem>

#include "geoldm/layers.hpp"
#include "geoldm/optim.hpp"

namespace geoldm::nn {

/// Named tensors split into a parameter section and a parallel optimizer
/// section with the same per-tensor layout.
struct Checkpoint {
    std::vector<std::pair<std::string, Tensor>> tensors;
    std::vector<std::pair<std::string, Tensor>> opt_tensors;

    const Tensor* find(const std::string& name) const;
    float scalar(const std::string& name) const;

    static Checkpoint from_params(const ParamSet& params);
    static Checkpoint from_params(const ParamSet& params, const Adam& opt);

    /// Copies values into matching entries of `params`; every parameter must
    /// be present with the right shape.
    void load_into(ParamSet& params) const;
    void load_optimizer(Adam& opt) const;
};

/// "LDMC" file: little-endian header {magic, version u32, tensor count u32};
/// per tensor {name len u16, name, rank u8, dims u32[rank], f32 payload};
/// then an optimizer section {count u32, same per-tensor layout}.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace geoldm::nn
