#include "geoldm/optim.hpp"

#include <cmath>

namespace geoldm::nn {

Adam::Adam(const ParamSet& params, AdamConfig cfg) : cfg_(cfg) {
    for (const auto& [name, t] : params.entries()) {
        Slot s;
        s.name = name;
        s.param = t;
        s.m.assign(t.numel(), 0.0f);
        s.v.assign(t.numel(), 0.0f);
        slots_.push_back(std::move(s));
    }
}

void Adam::step() {
    ++step_count_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(step_count_));
    for (auto& s : slots_) {
        auto g = s.param.grad();
        auto p = s.param.data();
        for (std::size_t k = 0; k < p.size(); ++k) {
            const float gk = g[k];
            require(std::isfinite(gk), "nn/non-finite-grad",
                    "non-finite gradient in '" + s.name + "'");
            s.m[k] = cfg_.beta1 * s.m[k] + (1.0f - cfg_.beta1) * gk;
            s.v[k] = cfg_.beta2 * s.v[k] + (1.0f - cfg_.beta2) * gk * gk;
            const float mhat = s.m[k] / static_cast<float>(bc1);
            const float vhat = s.v[k] / static_cast<float>(bc2);
            p[k] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

double grad_check(const std::function<Tensor()>& forward, std::vector<Tensor> inputs,
                  double fd_step) {
    require(fd_step > 0.0, "nn/grad-check", "fd step must be positive");
    for (auto& in : inputs)
        require(in.requires_grad(), "nn/grad-check", "grad_check inputs must require grad");

    for (auto& in : inputs) in.zero_grad();
    Tensor loss = forward();
    loss.backward();

    std::vector<std::vector<float>> analytic;
    analytic.reserve(inputs.size());
    for (auto& in : inputs) {
        auto g = in.grad();
        for (float v : g) require(std::isfinite(v), "nn/non-finite-grad", "analytic gradient not finite");
        analytic.emplace_back(g.begin(), g.end());
    }

    double max_rel = 0.0;
    const float h = static_cast<float>(fd_step);
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        auto vals = inputs[t].data();
        double diff_norm = 0.0, an_norm = 0.0, fd_norm = 0.0;
        for (std::size_t k = 0; k < vals.size(); ++k) {
            const float orig = vals[k];
            vals[k] = orig + h;
            const double fp = forward().item_precise();
            vals[k] = orig - h;
            const double fm = forward().item_precise();
            vals[k] = orig;
            const double fd = (fp - fm) / (2.0 * fd_step);
            const double an = analytic[t][k];
            diff_norm = std::max(diff_norm, std::abs(an - fd));
            an_norm = std::max(an_norm, std::abs(an));
            fd_norm = std::max(fd_norm, std::abs(fd));
        }
        // per-tensor relative error: max-norm of the difference over the
        // gradient scale, so near-zero entries do not amplify float noise
        max_rel = std::max(max_rel, diff_norm / std::max({an_norm, fd_norm, 1e-8}));
    }
    return max_rel;
}

} // namespace geoldm::nn
