#include "geoldm/esmda.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <ostream>
#include <thread>

#include "geoldm/rng.hpp"

namespace geoldm::esmda {

PropPriors PropPriors::reference() {
    PropPriors p;
    p.porosity[kMud] = {0.075, 0.0125, 0.05, 0.10};
    p.porosity[kLevee] = {0.16, 0.02, 0.12, 0.20};
    p.porosity[kChannel] = {0.26, 0.02, 0.22, 0.30};
    p.log_perm[kMud] = {3.45, 0.23, 3.00, 3.91};
    p.log_perm[kLevee] = {5.41, 0.40, 4.61, 6.21};
    p.log_perm[kChannel] = {7.46, 0.27, 6.91, 8.00};
    return p;
}

void EsmdaConfig::validate() const {
    require(case_id == 1 || case_id == 2, "esmda/bad-config", "case must be 1 or 2");
    require(n_ensemble >= 2, "esmda/bad-config", "ensemble size must be >= 2");
    require(!alphas.empty(), "esmda/bad-config", "alpha schedule is empty");
    double inv_sum = 0.0;
    for (double a : alphas) {
        require(a > 0.0, "esmda/bad-config", "inflation factors must be positive");
        inv_sum += 1.0 / a;
    }
    require(std::abs(inv_sum - 1.0) <= 1e-3, "esmda/bad-config",
            "sum of inverse inflation factors is " + std::to_string(inv_sum) + ", must be 1");
    require(obs_rel_std > 0.0, "esmda/bad-config", "observation noise must be positive");
}

namespace {

double draw_truncated(Rng& rng, const PropPrior& p) {
    double z;
    do {
        z = rng.normal();
    } while (std::abs(z) > 2.0);
    return std::clamp(p.mean + p.std * z, p.min, p.max);
}

} // namespace

Ensemble init_ensemble(int case_id, int n_e, int latent_len, const PropPriors& priors,
                       std::uint64_t seed) {
    require(case_id == 1 || case_id == 2, "esmda/bad-config", "case must be 1 or 2");
    require(n_e >= 2, "esmda/bad-config", "ensemble size must be >= 2");
    require(latent_len >= 1, "esmda/bad-config", "latent length must be >= 1");
    const int n_hm = latent_len + (case_id == 2 ? 6 : 0);
    Ensemble ens;
    ens.members.resize(n_hm, n_e);
    Rng rng(splitmix64(seed));
    for (int j = 0; j < n_e; ++j) {
        for (int r = 0; r < latent_len; ++r) ens.members(r, j) = rng.normal();
        if (case_id == 2) {
            for (int f = 0; f < 3; ++f)
                ens.members(latent_len + f, j) = draw_truncated(rng, priors.porosity[f]);
            for (int f = 0; f < 3; ++f)
                ens.members(latent_len + 3 + f, j) = draw_truncated(rng, priors.log_perm[f]);
        }
    }
    return ens;
}

Eigen::VectorXd perturb_obs(const ObservationSet& obs, double alpha, std::uint64_t seed) {
    require(alpha > 0.0, "esmda/bad-config", "alpha must be positive");
    require(obs.d_obs.size() == obs.c_d.size(), "esmda/shape-mismatch",
            "observation/covariance size mismatch");
    Rng rng(splitmix64(seed));
    Eigen::VectorXd out = obs.d_obs;
    const double sa = std::sqrt(alpha);
    for (Eigen::Index k = 0; k < out.size(); ++k) {
        require(obs.c_d[k] >= 0.0, "esmda/bad-config", "covariance diagonal must be nonnegative");
        out[k] += sa * std::sqrt(obs.c_d[k]) * rng.normal();
    }
    return out;
}

Ensemble esmda_update(const Ensemble& ens, const Eigen::MatrixXd& d_sim, const ObservationSet& obs,
                      double alpha, std::uint64_t seed, int case_id, const PropPriors* priors) {
    const int n_e = ens.n_members();
    const int n_hm = ens.n_vars();
    const Eigen::Index n_d = obs.d_obs.size();
    require(d_sim.rows() == n_d && d_sim.cols() == n_e, "esmda/shape-mismatch",
            "d_sim must be N_d x N_e");
    require(n_e >= 2, "esmda/bad-config", "ensemble size must be >= 2");

    // sample (co)variances with 1/(N_e - 1)
    const Eigen::VectorXd x_mean = ens.members.rowwise().mean();
    const Eigen::VectorXd d_mean = d_sim.rowwise().mean();
    const Eigen::MatrixXd ax = ens.members.colwise() - x_mean;
    const Eigen::MatrixXd ad = d_sim.colwise() - d_mean;
    const double norm = 1.0 / static_cast<double>(n_e - 1);
    const Eigen::MatrixXd c_xd = ax * ad.transpose() * norm;
    Eigen::MatrixXd c_dd = ad * ad.transpose() * norm;
    c_dd += (alpha * obs.c_d).asDiagonal();

    Eigen::LDLT<Eigen::MatrixXd> solver(c_dd);
    require(solver.info() == Eigen::Success, "esmda/solver-failure",
            "C_dd + alpha C_d factorization failed");

    // perturbed data, one draw per member
    Eigen::MatrixXd innovations(n_d, n_e);
    const std::uint64_t pert_root = derive_seed(seed, "esmda.perturb");
    for (int j = 0; j < n_e; ++j)
        innovations.col(j) =
            perturb_obs(obs, alpha, derive_seed(pert_root, static_cast<std::uint64_t>(j))) -
            d_sim.col(j);

    Ensemble out;
    out.generation = ens.generation + 1;
    out.members = ens.members + c_xd * solver.solve(innovations);

    if (case_id == 2) {
        require(priors != nullptr, "esmda/bad-config", "case 2 update needs property priors");
        const int latent_len = n_hm - 6;
        for (int j = 0; j < n_e; ++j) {
            for (int f = 0; f < 3; ++f) {
                auto& phi = out.members(latent_len + f, j);
                phi = std::clamp(phi, priors->porosity[f].min, priors->porosity[f].max);
                auto& lk = out.members(latent_len + 3 + f, j);
                lk = std::clamp(lk, priors->log_perm[f].min, priors->log_perm[f].max);
            }
        }
    }
    return out;
}

ObservationSet make_observation_set(const Eigen::VectorXd& d_true, double rel_std,
                                    double floor_frac, bool add_noise, std::uint64_t seed) {
    ObservationSet obs;
    const double peak = d_true.cwiseAbs().maxCoeff();
    const double floor_abs = floor_frac * peak;
    obs.c_d.resize(d_true.size());
    for (Eigen::Index k = 0; k < d_true.size(); ++k) {
        const double sd = std::max(rel_std * std::abs(d_true[k]), floor_abs);
        obs.c_d[k] = sd * sd;
    }
    obs.d_obs = d_true;
    if (add_noise) {
        Rng rng(splitmix64(seed));
        for (Eigen::Index k = 0; k < d_true.size(); ++k)
            obs.d_obs[k] += std::sqrt(obs.c_d[k]) * rng.normal();
    }
    return obs;
}

namespace {

double mean_mismatch(const Eigen::MatrixXd& d_sim, const ObservationSet& obs) {
    double acc = 0.0;
    for (Eigen::Index j = 0; j < d_sim.cols(); ++j) {
        double phi = 0.0;
        for (Eigen::Index k = 0; k < obs.d_obs.size(); ++k) {
            const double r = d_sim(k, j) - obs.d_obs[k];
            phi += r * r / obs.c_d[k];
        }
        acc += phi / static_cast<double>(obs.d_obs.size());
    }
    return acc / static_cast<double>(d_sim.cols());
}

/// Evaluates fn(j) for j in [0, n) on a small worker pool; each index writes
/// only its own slot so the result is identical for any worker count.
void parallel_members(int n, int workers, const std::function<void(int)>& fn) {
    if (workers <= 0) workers = static_cast<int>(std::thread::hardware_concurrency());
    workers = std::max(1, std::min(workers, n));
    if (workers == 1) {
        for (int j = 0; j < n; ++j) fn(j);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            try {
                int j;
                while ((j = next.fetch_add(1)) < n) fn(j);
            } catch (...) {
                errors[static_cast<std::size_t>(w)] = std::current_exception();
            }
        });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace

EsmdaRunResult run_esmda(const EsmdaConfig& cfg, const Ensemble& prior, const ForwardModel& forward,
                         const ObservationSet& obs, std::ostream* progress) {
    cfg.validate();
    require(prior.n_members() == cfg.n_ensemble, "esmda/bad-config",
            "prior ensemble size disagrees with config");

    EsmdaRunResult result;
    Ensemble ens = prior;
    const Eigen::Index n_d = obs.d_obs.size();

    auto evaluate = [&](const Ensemble& e) {
        Eigen::MatrixXd d(n_d, e.n_members());
        parallel_members(e.n_members(), cfg.workers, [&](int j) {
            Eigen::VectorXd dj;
            try {
                dj = forward(e.members.col(j));
            } catch (const std::exception& ex) {
                throw Error("esmda/forward-failure",
                            "member " + std::to_string(j) + ": " + ex.what());
            }
            require(dj.size() == n_d, "esmda/shape-mismatch",
                    "forward model returned wrong observation count for member " +
                        std::to_string(j));
            d.col(j) = dj;
        });
        return d;
    };

    const std::uint64_t step_root = derive_seed(cfg.seed, "esmda.steps");
    const PropPriors priors = PropPriors::reference();
    for (int a = 0; a < cfg.n_steps(); ++a) {
        const Eigen::MatrixXd d_sim = evaluate(ens);
        result.mismatch.push_back(mean_mismatch(d_sim, obs));
        if (progress)
            (*progress) << "esmda step " << a << " alpha " << cfg.alphas[static_cast<std::size_t>(a)]
                        << " mismatch " << result.mismatch.back() << '\n';
        ens = esmda_update(ens, d_sim, obs, cfg.alphas[static_cast<std::size_t>(a)],
                           derive_seed(step_root, static_cast<std::uint64_t>(a)), cfg.case_id,
                           cfg.case_id == 2 ? &priors : nullptr);
        result.per_step.push_back(ens);
    }
    result.posterior_d = evaluate(ens);
    result.mismatch.push_back(mean_mismatch(result.posterior_d, obs));
    if (progress) (*progress) << "esmda final mismatch " << result.mismatch.back() << '\n';
    result.posterior = std::move(ens);
    return result;
}

// ---------------------------------------------------------------------------
// k-means medoids
// ---------------------------------------------------------------------------

namespace {

double sq_dist(std::span<const float> a, std::span<const float> b) {
    double acc = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        const double d = static_cast<double>(a[k]) - b[k];
        acc += d * d;
    }
    return acc;
}

} // namespace

std::vector<std::size_t> kmeans_medoid_indices(std::span<const FaciesGrid> grids, int k,
                                               std::uint64_t seed, int restarts) {
    require(k >= 1 && static_cast<std::size_t>(k) <= grids.size(), "esmda/bad-kmeans",
            "k must be in 1..set size");
    const std::size_t n = grids.size();
    const std::size_t dim = grids[0].cell_count();
    std::vector<std::vector<float>> x(n, std::vector<float>(dim));
    for (std::size_t i = 0; i < n; ++i) {
        require(grids[i].cell_count() == dim, "esmda/shape-mismatch", "grid shapes differ");
        for (std::size_t c = 0; c < dim; ++c) x[i][c] = code_to_level(grids[i].codes[c]);
    }

    Rng rng(splitmix64(seed));
    double best_inertia = std::numeric_limits<double>::infinity();
    std::vector<int> best_assign(n, 0);
    std::vector<std::vector<double>> best_centroids;

    for (int r = 0; r < restarts; ++r) {
        // k-means++ seeding
        std::vector<std::vector<double>> centroids;
        std::vector<double> d2(n, std::numeric_limits<double>::infinity());
        const std::size_t first = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(n) - 1));
        centroids.emplace_back(x[first].begin(), x[first].end());
        while (static_cast<int>(centroids.size()) < k) {
            double total = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                double dist = 0.0;
                for (std::size_t c = 0; c < dim; ++c) {
                    const double dd = x[i][c] - centroids.back()[c];
                    dist += dd * dd;
                }
                d2[i] = std::min(d2[i], dist);
                total += d2[i];
            }
            double pick = rng.uniform() * total;
            std::size_t chosen = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                pick -= d2[i];
                if (pick <= 0.0) {
                    chosen = i;
                    break;
                }
            }
            centroids.emplace_back(x[chosen].begin(), x[chosen].end());
        }

        std::vector<int> assign(n, -1);
        for (int iter = 0; iter < 100; ++iter) {
            bool changed = false;
            for (std::size_t i = 0; i < n; ++i) {
                int arg = 0;
                double best = std::numeric_limits<double>::infinity();
                for (int c = 0; c < k; ++c) {
                    double dist = 0.0;
                    const auto& cen = centroids[static_cast<std::size_t>(c)];
                    for (std::size_t q = 0; q < dim; ++q) {
                        const double dd = x[i][q] - cen[q];
                        dist += dd * dd;
                    }
                    if (dist < best) {
                        best = dist;
                        arg = c;
                    }
                }
                if (assign[i] != arg) {
                    assign[i] = arg;
                    changed = true;
                }
            }
            // recompute centroids; reseed empties from the farthest points
            std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
            for (auto& c : centroids) std::fill(c.begin(), c.end(), 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                auto& cen = centroids[static_cast<std::size_t>(assign[i])];
                for (std::size_t q = 0; q < dim; ++q) cen[q] += x[i][q];
                ++counts[static_cast<std::size_t>(assign[i])];
            }
            for (int c = 0; c < k; ++c) {
                if (counts[static_cast<std::size_t>(c)] == 0) {
                    const std::size_t moved =
                        static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(n) - 1));
                    centroids[static_cast<std::size_t>(c)].assign(x[moved].begin(), x[moved].end());
                    changed = true;
                } else {
                    for (auto& v : centroids[static_cast<std::size_t>(c)])
                        v /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
                }
            }
            if (!changed) break;
        }

        double inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto& cen = centroids[static_cast<std::size_t>(assign[i])];
            for (std::size_t q = 0; q < dim; ++q) {
                const double dd = x[i][q] - cen[q];
                inertia += dd * dd;
            }
        }
        if (inertia < best_inertia) {
            best_inertia = inertia;
            best_assign = assign;
            best_centroids = centroids;
        }
    }

    // medoid of each cluster = member closest to its centroid; a cluster left
    // empty (possible when the set has fewer distinct grids than k) falls back
    // to the globally nearest member
    std::vector<std::size_t> medoids;
    for (int c = 0; c < k; ++c) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t arg = 0;
        bool found = false;
        for (int pass = 0; pass < 2 && !found; ++pass) {
            for (std::size_t i = 0; i < n; ++i) {
                if (pass == 0 && best_assign[i] != c) continue;
                double dist = 0.0;
                for (std::size_t q = 0; q < dim; ++q) {
                    const double dd = x[i][q] - best_centroids[static_cast<std::size_t>(c)][q];
                    dist += dd * dd;
                }
                if (dist < best) {
                    best = dist;
                    arg = i;
                    found = true;
                }
            }
        }
        medoids.push_back(arg);
    }
    std::sort(medoids.begin(), medoids.end());
    return medoids;
}

std::vector<FaciesGrid> kmeans_medoids(std::span<const FaciesGrid> grids, int k, std::uint64_t seed,
                                       int restarts) {
    std::vector<FaciesGrid> out;
    for (std::size_t idx : kmeans_medoid_indices(grids, k, seed, restarts))
        out.push_back(grids[idx]);
    return out;
}

// ---------------------------------------------------------------------------
// ensemble files
// ---------------------------------------------------------------------------

namespace {
constexpr char kEnsMagic[4] = {'H', 'M', 'E', 'N'};

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}
} // namespace

void write_ensemble(const std::filesystem::path& path, const Ensemble& ens) {
    std::ofstream os(path, std::ios::binary);
    require(os.good(), "esmda/io", "cannot open " + path.string() + " for writing");
    os.write(kEnsMagic, 4);
    put_u32(os, 1);
    put_u32(os, static_cast<std::uint32_t>(ens.n_vars()));
    put_u32(os, static_cast<std::uint32_t>(ens.n_members()));
    put_u32(os, static_cast<std::uint32_t>(ens.generation));
    for (int j = 0; j < ens.n_members(); ++j)
        for (int r = 0; r < ens.n_vars(); ++r) {
            const double v = ens.members(r, j);
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            put_u32(os, static_cast<std::uint32_t>(bits & 0xffffffffULL));
            put_u32(os, static_cast<std::uint32_t>(bits >> 32));
        }
    require(os.good(), "esmda/io", "write failed for " + path.string());
}

Ensemble read_ensemble(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), "esmda/io", "cannot open " + path.string());
    char magic[4];
    is.read(magic, 4);
    require(is.good() && std::memcmp(magic, kEnsMagic, 4) == 0, "esmda/bad-magic",
            path.string() + " is not an ensemble stack");
    require(get_u32(is) == 1, "esmda/bad-version", "unsupported ensemble version");
    const std::uint32_t n_vars = get_u32(is);
    const std::uint32_t n_members = get_u32(is);
    Ensemble ens;
    ens.generation = static_cast<int>(get_u32(is));
    ens.members.resize(n_vars, n_members);
    for (std::uint32_t j = 0; j < n_members; ++j)
        for (std::uint32_t r = 0; r < n_vars; ++r) {
            const std::uint64_t lo = get_u32(is);
            const std::uint64_t hi = get_u32(is);
            const std::uint64_t bits = lo | (hi << 32);
            double v;
            std::memcpy(&v, &bits, 8);
            ens.members(r, j) = v;
        }
    require(is.good(), "esmda/io", "truncated ensemble file " + path.string());
    return ens;
}

} // namespace geoldm::esmda
