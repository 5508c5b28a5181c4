#pragma once

#include <Eigen/Dense>
#include <functional>

#include "geoldm/facies.hpp"

namespace geoldm::esmda {

/// Per-property prior: normal(mean, std) truncated at two standard deviations,
/// kept inside [min, max] at initialization and after every update.
struct PropPrior {
    double mean = 0.0, std = 0.0, min = 0.0, max = 0.0;
};

/// Priors for [porosity, ln-permeability] of the three facies (uncertain-
/// properties case). Order matches the facies codes: mud, levee, channel.
struct PropPriors {
    PropPrior porosity[3];
    PropPrior log_perm[3];

    static PropPriors reference();
};

/// Stacked history-matching vectors, one column per member. Case 1 rows are
/// the flattened latent (row-major over the latent plane); Case 2 appends
/// [phi_mud, phi_levee, phi_channel, ln k_mud, ln k_levee, ln k_channel].
struct Ensemble {
    Eigen::MatrixXd members; // N_hm x N_e
    int generation = 0;

    int n_members() const { return static_cast<int>(members.cols()); }
    int n_vars() const { return static_cast<int>(members.rows()); }
};

struct ObservationSet {
    Eigen::VectorXd d_obs;
    Eigen::VectorXd c_d; // diagonal of the measurement covariance
};

struct EsmdaConfig {
    int case_id = 1; // 1: latent only, 2: latent + facies properties
    int n_ensemble = 200;
    std::vector<double> alphas = {57.017, 35.0, 25.0, 20.0, 18.0, 15.0, 12.0, 8.0, 5.0, 3.0};
    double obs_rel_std = 0.02;
    double obs_floor_frac = 1e-6; // absolute noise floor as a fraction of the peak rate
    std::uint64_t seed = 0;
    int workers = 0; // 0 = hardware concurrency

    int n_steps() const { return static_cast<int>(alphas.size()); }
    /// Enforces sum(1/alpha_i) = 1 within 1e-3.
    void validate() const;
};

/// Latent components i.i.d. N(0,1); Case-2 properties from their truncated
/// priors. Deterministic per seed.
Ensemble init_ensemble(int case_id, int n_e, int latent_len, const PropPriors& priors,
                       std::uint64_t seed);

/// d* = d_obs + sqrt(alpha) C_d^{1/2} z.
Eigen::VectorXd perturb_obs(const ObservationSet& obs, double alpha, std::uint64_t seed);

/// One smoother update with inflation alpha: members += C_xd (C_dd + a C_d)^-1
/// (d* - d_sim) column-wise, sample covariances with 1/(N_e - 1). Case-2
/// property rows are re-truncated to their prior [min, max] afterwards.
Ensemble esmda_update(const Ensemble& ens, const Eigen::MatrixXd& d_sim, const ObservationSet& obs,
                      double alpha, std::uint64_t seed, int case_id = 1,
                      const PropPriors* priors = nullptr);

/// Measurement covariance from relative noise on the reference (true-model)
/// data, with an absolute floor; optionally perturbs the data into d_obs.
ObservationSet make_observation_set(const Eigen::VectorXd& d_true, double rel_std,
                                    double floor_frac, bool add_noise, std::uint64_t seed);

using ForwardModel = std::function<Eigen::VectorXd(const Eigen::VectorXd& member)>;

struct EsmdaRunResult {
    Ensemble posterior;
    Eigen::MatrixXd posterior_d; // N_d x N_e forward responses of the posterior
    std::vector<double> mismatch; // normalized data mismatch per step, size n_steps + 1
    std::vector<Ensemble> per_step; // ensembles after each update
};

/// Full multiple-data-assimilation loop: evaluate forward model for every
/// member (in parallel), log the ensemble-mean normalized mismatch
/// (1/N_d)(d - d_obs)^T C_d^-1 (d - d_obs), perturb observations, update.
EsmdaRunResult run_esmda(const EsmdaConfig& cfg, const Ensemble& prior, const ForwardModel& forward,
                         const ObservationSet& obs, std::ostream* progress = nullptr);

/// k-means (Lloyd, seeded k-means++ init, fixed restarts) on flattened
/// continuous facies codes; returns the per-cluster medoid indices sorted
/// ascending.
std::vector<std::size_t> kmeans_medoid_indices(std::span<const FaciesGrid> grids, int k,
                                               std::uint64_t seed = 17, int restarts = 10);
std::vector<FaciesGrid> kmeans_medoids(std::span<const FaciesGrid> grids, int k,
                                       std::uint64_t seed = 17, int restarts = 10);

/// Binary ensemble stack ("HMEN"): header {magic, version u32, n_vars u32,
/// n_members u32, generation u32} then column-major f64 payload.
void write_ensemble(const std::filesystem::path& path, const Ensemble& ens);
Ensemble read_ensemble(const std::filesystem::path& path);

} // namespace geoldm::esmda
