#pragma once

#include <iosfwd>
#include <optional>

#include "geoldm/checkpoint.hpp"
#include "geoldm/facies.hpp"
#include "geoldm/layers.hpp"

namespace geoldm::vae {

/// Real-valued latent plane, f = 8 smaller than the geomodel grid per axis.
/// Row-major storage (j outer, i inner), which is also the flattening order
/// used for history-matching vectors.
struct LatentField {
    int nx = 0;
    int ny = 0;
    std::vector<float> v;

    LatentField() = default;
    LatentField(int nx_, int ny_, float fill = 0.0f)
        : nx(nx_), ny(ny_), v(static_cast<std::size_t>(nx_) * ny_, fill) {}

    std::size_t size() const { return v.size(); }
};

struct LatentDistribution {
    LatentField mu;
    LatentField log_var;
};

struct VaeLossReport {
    double recon = 0.0;
    double kl = 0.0;
    double hard = 0.0;
    double total = 0.0;
    double lambda_kl = 0.0;
    double lambda_h = 0.0;
};

struct VaeConfig {
    int grid_n = 32;       // square N x N geomodels, N divisible by 8
    int base_channels = 16;
    int latent_channels = 1;
    float lambda_kl = 1e-6f;
    float lambda_h = 10.0f;
    // training
    float lr = 1e-4f;
    int batch_size = 16;
    int steps = 3000;
    int val_every = 250;

    int latent_n() const { return grid_n / 8; }
    void validate() const;
};

// ---- geomodel <-> tensor helpers ----

/// (B, 1, N, N) tensor of continuous facies levels for the given grids.
nn::Tensor grids_to_tensor(std::span<const FaciesGrid> grids);
/// Discretize a (B, 1, N, N) batch of levels back to facies grids.
std::vector<FaciesGrid> tensor_to_grids(const nn::Tensor& t);
/// (B, 1, N, N) 0/1 mask of conditioning cells, replicated across the batch.
nn::Tensor hard_data_mask(const ConditioningSet& cond, int batch, int n);

/// Encoder-decoder with three stride-2 stages (f = 8). The encoder emits
/// (mu, log sigma^2) with log-variance clamped to [-30, 20]; the decoder
/// mirrors the encoder with nearest-neighbour upsampling.
class Vae {
public:
    Vae(const VaeConfig& cfg, std::uint64_t init_seed);

    // graph-level, used by training: m is (B, 1, N, N)
    std::pair<nn::Tensor, nn::Tensor> encode_t(const nn::Tensor& m) const;
    nn::Tensor decode_t(const nn::Tensor& xi) const; // unclamped

    // data-level API
    LatentDistribution encode(const FaciesGrid& m) const;
    FaciesGrid decode(const LatentField& xi) const; // clamp + nearest-level discretize
    std::vector<LatentDistribution> encode_batch(std::span<const FaciesGrid> grids) const;
    std::vector<FaciesGrid> decode_batch(std::span<const LatentField> fields) const;

    nn::ParamSet& params() { return params_; }
    const nn::ParamSet& params() const { return params_; }
    const VaeConfig& config() const { return cfg_; }

    nn::Checkpoint to_checkpoint() const;
    static Vae from_checkpoint(const nn::Checkpoint& ckpt);

private:
    VaeConfig cfg_;
    nn::ParamSet params_;
    // encoder
    nn::Conv2d stem_;
    nn::ResBlock enc_res_[4];
    nn::Conv2d enc_down_[3];
    nn::GroupNorm enc_out_norm_;
    nn::Conv2d enc_out_;
    // decoder
    nn::Conv2d dec_in_;
    nn::ResBlock dec_res_[4];
    nn::Conv2d dec_up_[3];
    nn::GroupNorm dec_out_norm_;
    nn::Conv2d dec_out_;
};

/// xi = mu + sigma * z with z ~ N(0, I) drawn from `seed`.
LatentField sample_latent(const LatentDistribution& dist, std::uint64_t seed);

struct VaeLossTensors {
    nn::Tensor recon, kl, hard, total;
    VaeLossReport report(float lambda_kl, float lambda_h) const;
};

/// Batch losses: recon = ||m - m_hat||^2, kl closed-form against N(0, I),
/// hard = ||H(m - m_hat)||^2 / N_h; each averaged over the batch.
VaeLossTensors vae_loss_t(const nn::Tensor& m, const nn::Tensor& m_hat, const nn::Tensor& mu,
                          const nn::Tensor& log_var, const nn::Tensor& hard_mask, int n_hard,
                          float lambda_kl, float lambda_h);

/// Data-level loss evaluation for a single reconstruction pair.
VaeLossReport vae_loss(const FaciesGrid& m, const nn::Tensor& m_hat, const LatentDistribution& dist,
                       const ConditioningSet& cond, float lambda_kl, float lambda_h);

struct TrainLogRow {
    int step = 0;
    double recon = 0.0, kl = 0.0, hard = 0.0, total = 0.0;
};

struct VaeTrainResult {
    nn::Checkpoint best;
    std::vector<TrainLogRow> log;
    double best_val = 0.0;
};

/// Adam over Eq.-style total loss; returns the best-validation checkpoint
/// (by total validation loss). Throws vae/non-finite-loss on divergence.
VaeTrainResult train_vae(const FaciesDataset& data, const ConditioningSet& cond,
                         const VaeConfig& cfg, std::uint64_t seed, std::ostream* progress);

void write_loss_csv(const std::filesystem::path& path, std::span<const TrainLogRow> rows);

} // namespace geoldm::vae
