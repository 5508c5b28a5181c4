#pragma once

#include <functional>

#include "geoldm/vae.hpp"

namespace geoldm::diffusion {

using vae::LatentField;

/// Precomputed noise-schedule tables, 1-indexed by timestep (array index t-1).
/// alpha_bar(0) is defined as 1 so the DDIM step is well-formed at t = 1.
struct SchedulerTable {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;

    double a_bar(int t) const {
        require(t >= 0 && t <= T, "diffusion/t-range", "timestep out of range");
        return t == 0 ? 1.0 : alpha_bar[static_cast<std::size_t>(t - 1)];
    }
    double beta_at(int t) const {
        require(t >= 1 && t <= T, "diffusion/t-range", "timestep out of range");
        return beta[static_cast<std::size_t>(t - 1)];
    }
    double alpha_at(int t) const {
        require(t >= 1 && t <= T, "diffusion/t-range", "timestep out of range");
        return alpha[static_cast<std::size_t>(t - 1)];
    }
};

/// beta_t linear from beta1 to betaT inclusive; alpha_t = 1 - beta_t;
/// alpha_bar_t = prod_{s<=t} alpha_s.
SchedulerTable make_linear_schedule(int T, double beta1, double betaT);

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
LatentField forward_noise(const LatentField& x0, int t, const LatentField& eps,
                          const SchedulerTable& sched);

/// Noise predictor interface used by the samplers; tests may inject oracles.
using EpsFn = std::function<LatentField(const LatentField&, int)>;

/// One stochastic ancestral step:
/// x_{t-1} = (x_t - (1-alpha_t)/sqrt(1-abar_t) eps_theta) / sqrt(alpha_t) + sqrt(beta_t) z.
LatentField ddpm_sample_step(const LatentField& x, int t, const EpsFn& eps_fn,
                             const SchedulerTable& sched, const LatentField& z);

/// One deterministic DDIM step from t to t_prev (t_prev < t, 0 allowed):
/// x_prev = sqrt(abar_prev) x0_hat + sqrt(1-abar_prev) eps_theta with
/// x0_hat = (x_t - sqrt(1-abar_t) eps_theta) / sqrt(abar_t).
LatentField ddim_sample_step(const LatentField& x, int t, int t_prev, const EpsFn& eps_fn,
                             const SchedulerTable& sched);

/// Evenly spaced decreasing subsequence of {1..T}, length n_steps, ending at 1.
std::vector<int> ddim_substep_schedule(int T, int n_steps);

/// xi = xi1 (1 - delta) + xi2 delta, 0 <= delta <= 1.
LatentField interpolate_latents(const LatentField& xi1, const LatentField& xi2, double delta);

struct UNetConfig {
    int latent_n = 4;
    int latent_channels = 1;
    int base_channels = 32;
    int emb_dim = 64;
    void validate() const;
};

/// Epsilon-prediction U-net at the latent resolution: two residual blocks on
/// the contracting side, a residual-attention-residual middle block, two
/// residual blocks with concatenated skips on the expanding side; sinusoidal
/// timestep embedding projected into every block.
class DenoiserNet {
public:
    DenoiserNet(const UNetConfig& cfg, std::uint64_t init_seed);

    nn::Tensor forward(const nn::Tensor& x, const std::vector<int>& t) const;
    /// Single-field convenience wrapper around forward().
    LatentField predict(const LatentField& x, int t) const;
    /// Batched prediction for many simultaneous chains.
    std::vector<LatentField> predict_batch(std::span<const LatentField> x, int t) const;

    nn::ParamSet& params() { return params_; }
    const nn::ParamSet& params() const { return params_; }
    const UNetConfig& config() const { return cfg_; }

private:
    UNetConfig cfg_;
    nn::ParamSet params_;
    nn::Linear emb_fc1_, emb_fc2_;
    nn::Conv2d stem_;
    nn::ResBlock down1_, down2_, mid1_, mid2_, up2_, up1_;
    nn::SelfAttention attn_;
    nn::GroupNorm head_norm_;
    nn::Conv2d head_;
};

/// Noise-matching training loss on a latent batch: t ~ U{1..T} and
/// eps ~ N(0,I) per element, mean over the batch of
/// ||eps - eps_theta(sqrt(abar_t) xi0 + sqrt(1-abar_t) eps, t)||^2.
/// The returned tensor carries the graph for training.
nn::Tensor ddpm_loss_t(const DenoiserNet& net, std::span<const LatentField> xi0,
                       const SchedulerTable& sched, std::uint64_t seed);
double ddpm_loss(const DenoiserNet& net, std::span<const LatentField> xi0,
                 const SchedulerTable& sched, std::uint64_t seed);

struct LdmConfig {
    int T = 1000;
    double beta1 = 1e-4;
    double betaT = 0.02;
    int ddim_steps = 50;
    int unet_base_channels = 32;
    int emb_dim = 64;
    // training
    float lr = 1e-4f;
    int batch_size = 16;
    int steps = 4000;
    int val_every = 250;
};

/// Trained latent diffusion model: frozen VAE + denoiser + schedule.
class LdmModel {
public:
    LdmModel(vae::Vae vae, DenoiserNet net, SchedulerTable sched, int ddim_steps);

    /// Full DDIM chain from xi_T down to the decoded, discretized facies grid.
    FaciesGrid generate(const LatentField& xi_T, int n_steps = 0) const;
    std::vector<FaciesGrid> generate_batch(std::span<const LatentField> xi_T, int n_steps = 0) const;
    /// Denoised latent without decoding.
    LatentField denoise(const LatentField& xi_T, int n_steps = 0) const;

    const vae::Vae& vae() const { return vae_; }
    const DenoiserNet& net() const { return net_; }
    const SchedulerTable& schedule() const { return sched_; }
    int default_ddim_steps() const { return ddim_steps_; }
    int latent_n() const { return vae_.config().latent_n(); }

    nn::Checkpoint to_checkpoint() const;
    static LdmModel from_checkpoint(const nn::Checkpoint& ckpt);

private:
    vae::Vae vae_;
    DenoiserNet net_;
    SchedulerTable sched_;
    int ddim_steps_;
};

struct LdmTrainResult {
    nn::Checkpoint best; // combined model checkpoint
    std::vector<vae::TrainLogRow> log;
    double best_val = 0.0;
};

/// Trains the denoiser on encoder-mean latents of the dataset (VAE frozen).
LdmTrainResult train_ldm(const nn::Checkpoint& vae_ckpt, const FaciesDataset& data,
                         const LdmConfig& cfg, std::uint64_t seed, std::ostream* progress);

} // namespace geoldm::diffusion
