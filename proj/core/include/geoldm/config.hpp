#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "geoldm/geogen.hpp"

namespace geoldm::config {

/// Full pipeline configuration. Defaults reproduce the reference experiment
/// setup (64x64 grids, T = 1000 with beta in [1e-4, 0.02], 100 DDIM steps,
/// lambda_KL = 1e-6, lambda_h = 10, Adam lr 1e-4 at batch 16, N_e = 200 with
/// the 10-step inflation schedule). Desk-scale runs override via file.
struct PipelineConfig {
    // [global]
    std::uint64_t seed = 42;
    std::string out_dir = "runs";
    int workers = 0;
    std::string conditioning_file; // empty = built-in well-pattern conditioning

    // [geogen]
    int nx = 64;
    int ny = 64;
    int n_channels_min = 3, n_channels_max = 5;
    double width_min = 4.0, width_max = 7.0;
    double amplitude_min = 2.0, amplitude_max = 6.0;
    double wavelength_min = 24.0, wavelength_max = 48.0;
    double orientation_min = -0.35, orientation_max = 0.35;
    double levee_halfwidth_min = 1.0, levee_halfwidth_max = 2.0;
    int retry_budget = 1000;
    int n_total = 4000;
    double split_train = 0.7, split_val = 0.2, split_test = 0.1;

    // [vae]
    int vae_base_channels = 64;
    int latent_channels = 1;
    double lambda_kl = 1e-6;
    double lambda_h = 10.0;
    double vae_lr = 1e-4;
    int vae_batch_size = 16;
    int vae_steps = 20000;
    int vae_val_every = 250;

    // [diffusion]
    int T = 1000;
    double beta1 = 1e-4;
    double betaT = 0.02;
    int ddim_steps = 100;
    int unet_base_channels = 64;
    int emb_dim = 64;
    double ldm_lr = 1e-4;
    int ldm_batch_size = 16;
    int ldm_steps = 30000;
    int ldm_val_every = 250;

    // [flowsim]
    double phi_mud = 0.05, phi_levee = 0.15, phi_channel = 0.20;
    double k_mud = 50.0, k_levee = 400.0, k_channel = 2500.0;
    double mu_w = 0.31, mu_o = 1.09;
    double swc = 0.10, sor = 0.20;
    double krw_end = 0.4, kro_end = 1.0;
    double corey_nw = 2.0, corey_no = 2.0;
    double sw_init = 0.10, p_init = 310.0;
    double c_w = 4e-5, c_o = 1e-4;
    double bhp_inj = 330.0, bhp_prod = 300.0;
    double cell_dx = 20.0, cell_dy = 20.0, cell_dz = 5.0;
    double t_end = 2500.0, max_dt = 50.0, report_every = 50.0;

    // [esmda]
    int hm_case = 1;
    int n_ensemble = 200;
    std::vector<double> alphas = {57.017, 35.0, 25.0, 20.0, 18.0, 15.0, 12.0, 8.0, 5.0, 3.0};
    double obs_every = 100.0;
    double obs_until = 1000.0;
    double obs_rel_std = 0.02;

    geogen::ChannelStyle channel_style() const;
};

/// Parses a sectioned key=value file; missing keys take the defaults above,
/// unknown sections/keys are rejected, and every range violation is reported
/// in one error message.
PipelineConfig parse_config(const std::filesystem::path& path);
PipelineConfig parse_config_text(const std::string& text, const std::string& origin);

/// Canonical serialization; parse(serialize(c)) == c.
std::string serialize_config(const PipelineConfig& cfg);

bool operator==(const PipelineConfig& a, const PipelineConfig& b);

} // namespace geoldm::config
