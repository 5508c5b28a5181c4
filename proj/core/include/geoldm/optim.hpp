#pragma once

#include "geoldm/layers.hpp"

namespace geoldm::nn {

struct AdamConfig {
    float lr = 1e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

/// Adam with bias correction over a ParamSet. Moment buffers are exposed by
/// name so checkpoints can persist optimizer state.
class Adam {
public:
    Adam() = default;
    Adam(const ParamSet& params, AdamConfig cfg);

    /// One update from the currently accumulated gradients.
    /// Throws nn/non-finite-grad if any gradient is not finite.
    void step();

    long step_count() const { return step_count_; }
    const AdamConfig& config() const { return cfg_; }

    struct Slot {
        std::string name;
        Tensor param;
        std::vector<float> m, v;
    };
    std::vector<Slot>& slots() { return slots_; }
    const std::vector<Slot>& slots() const { return slots_; }
    void set_step_count(long n) { step_count_ = n; }

private:
    AdamConfig cfg_;
    std::vector<Slot> slots_;
    long step_count_ = 0;
};

/// Max over all elements of all inputs of
/// |analytic - central_difference| / max(|analytic|, |fd|, 1e-8).
/// `forward` must rebuild the graph from the current input values and return a
/// scalar. Inputs must have requires_grad set.
double grad_check(const std::function<Tensor()>& forward, std::vector<Tensor> inputs,
                  double fd_step = 1e-3);

} // namespace geoldm::nn
