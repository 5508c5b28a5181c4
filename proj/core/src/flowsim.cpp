#include "geoldm/flowsim.hpp"

#include <Eigen/Sparse>
#include <algorithm>
#include <cmath>
#include <fstream>

namespace geoldm::flowsim {

void RockFluidProps::validate() const {
    for (const auto& r : rock) {
        require(r.phi > 0.0 && r.phi < 1.0, "flowsim/bad-props", "porosity must be in (0,1)");
        require(r.perm > 0.0, "flowsim/bad-props", "permeability must be positive");
    }
    require(mu_w > 0.0 && mu_o > 0.0, "flowsim/bad-props", "viscosities must be positive");
    require(swc >= 0.0 && swc < 1.0 - sor && sor >= 0.0, "flowsim/bad-props",
            "need 0 <= Swc < 1 - Sor");
    require(krw_end > 0.0 && kro_end > 0.0, "flowsim/bad-props", "endpoints must be positive");
    require(nw >= 1.0 && no >= 1.0, "flowsim/bad-props", "Corey exponents must be >= 1");
    require(sw_init >= swc && sw_init <= 1.0 - sor, "flowsim/bad-props",
            "initial saturation outside mobile range");
    require(c_w >= 0.0 && c_o >= 0.0, "flowsim/bad-props", "compressibilities must be >= 0");
}

std::pair<std::vector<double>, std::vector<double>> assign_properties(const FaciesGrid& grid,
                                                                      const RockFluidProps& props) {
    std::vector<double> phi(grid.cell_count()), perm(grid.cell_count());
    for (std::size_t c = 0; c < grid.cell_count(); ++c) {
        const std::uint8_t code = grid.codes[c];
        require(code < kNumFacies, "flowsim/bad-facies",
                "unknown facies code " + std::to_string(code));
        phi[c] = props.rock[code].phi;
        perm[c] = props.rock[code].perm;
    }
    return {std::move(phi), std::move(perm)};
}

std::pair<double, double> relperm(double sw, const RockFluidProps& props) {
    require(sw >= props.swc - 1e-12 && sw <= 1.0 - props.sor + 1e-12, "flowsim/sw-range",
            "saturation " + std::to_string(sw) + " outside mobile range");
    const double se = std::clamp((sw - props.swc) / (1.0 - props.swc - props.sor), 0.0, 1.0);
    const double krw = props.krw_end * std::pow(se, props.nw);
    const double kro = props.kro_end * std::pow(1.0 - se, props.no);
    return {krw, kro};
}

double peaceman_index(double dx, double dy, double dz, double kx, double ky, double rw) {
    require(dx > 0 && dy > 0 && dz > 0 && kx > 0 && ky > 0 && rw > 0, "flowsim/bad-well",
            "degenerate well geometry");
    const double a = std::sqrt(ky / kx), b = std::sqrt(kx / ky);
    const double r_eq = 0.28 * std::sqrt(a * dx * dx + b * dy * dy) /
                        (std::sqrt(std::sqrt(ky / kx)) + std::sqrt(std::sqrt(kx / ky)));
    require(r_eq > rw, "flowsim/bad-well", "equivalent radius must exceed wellbore radius");
    return kDarcy * 2.0 * M_PI * std::sqrt(kx * ky) * dz / std::log(r_eq / rw);
}

namespace {

struct Face {
    int a, b;      // cell indices, flux positive a -> b
    double t_geo;  // kDarcy * harmonic k * area / distance
};

double fw_of(double sw, const RockFluidProps& props) {
    const auto [krw, kro] = relperm(sw, props);
    const double lw = krw / props.mu_w, lo = kro / props.mu_o;
    return lw / (lw + lo);
}

/// Max |d fw / d Sw| over the mobile range, sampled; bounds the explicit CFL.
double max_fw_slope(const RockFluidProps& props) {
    const int n = 2000;
    double prev = fw_of(props.swc, props), best = 0.0;
    for (int k = 1; k <= n; ++k) {
        const double sw = props.swc + (1.0 - props.swc - props.sor) * k / n;
        const double f = fw_of(sw, props);
        best = std::max(best, std::abs(f - prev) * n / (1.0 - props.swc - props.sor));
        prev = f;
    }
    return std::max(best, 1e-12);
}

} // namespace

SimResult simulate(const FaciesGrid& grid, const RockFluidProps& props,
                   std::span<const WellSpec> wells, const GridGeometry& geom,
                   const SimOptions& opts) {
    props.validate();
    require(opts.t_end > 0 && opts.max_dt > 0 && opts.report_every > 0, "flowsim/bad-config",
            "time controls must be positive");
    const double n_reports_d = opts.t_end / opts.report_every;
    const int n_reports = static_cast<int>(std::llround(n_reports_d));
    require(std::abs(n_reports_d - n_reports) < 1e-9 && n_reports >= 1, "flowsim/bad-config",
            "t_end must be a multiple of report_every");
    for (const auto& w : wells) {
        require(grid.in_bounds(w.i, w.j), "flowsim/bad-well",
                "well " + w.name + " outside the grid");
        require(w.bhp > 0, "flowsim/bad-well", "well " + w.name + " has nonpositive BHP");
    }

    const int nx = grid.nx, ny = grid.ny;
    const int N = nx * ny;
    auto [phi, perm] = assign_properties(grid, props);
    const double v_cell = geom.dx * geom.dy * geom.dz;

    // geometric transmissibilities
    std::vector<Face> faces;
    faces.reserve(static_cast<std::size_t>(2 * N));
    for (int j = 0; j < ny; ++j)
        for (int i = 0; i < nx; ++i) {
            const int c = j * nx + i;
            if (i + 1 < nx) {
                const double kh = 2.0 * perm[c] * perm[c + 1] / (perm[c] + perm[c + 1]);
                faces.push_back({c, c + 1, kDarcy * kh * geom.dy * geom.dz / geom.dx});
            }
            if (j + 1 < ny) {
                const double kh = 2.0 * perm[c] * perm[c + nx] / (perm[c] + perm[c + nx]);
                faces.push_back({c, c + nx, kDarcy * kh * geom.dx * geom.dz / geom.dy});
            }
        }

    struct WellState {
        int cell;
        double wi;
        WellKind kind;
        double bhp;
        double cum_w = 0.0, cum_o = 0.0;
        double prev_cum_w = 0.0, prev_cum_o = 0.0;
    };
    std::vector<WellState> ws;
    for (const auto& w : wells) {
        const int c = w.j * nx + w.i;
        ws.push_back({c, peaceman_index(geom.dx, geom.dy, geom.dz, perm[c], perm[c], w.rw),
                      w.kind, w.bhp});
    }

    std::vector<double> p(static_cast<std::size_t>(N), props.p_init);
    std::vector<double> sw(static_cast<std::size_t>(N), props.sw_init);
    const double dfw_max = max_fw_slope(props);

    SimResult result;
    auto& series = result.series;
    for (const auto& w : wells) series.well_names.push_back(w.name);
    series.water_rate.assign(wells.size(), {});
    series.oil_rate.assign(wells.size(), {});

    // conservation ledgers (m3)
    double injected_w = 0.0, produced_w = 0.0, produced_o = 0.0;
    double storage_total = 0.0, storage_water = 0.0;
    const double pv_ref = [&] {
        double s = 0.0;
        for (int c = 0; c < N; ++c) s += v_cell * phi[static_cast<std::size_t>(c)];
        return s;
    }();

    Eigen::SparseMatrix<double> A(N, N);
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver;
    std::vector<Eigen::Triplet<double>> trips;
    std::vector<double> lam_w_face(faces.size()), lam_t_face(faces.size()), u_face(faces.size());
    std::vector<double> net_w(static_cast<std::size_t>(N));
    bool pattern_ready = false;

    double t = 0.0;
    for (int rep = 1; rep <= n_reports; ++rep) {
        const double t_report = rep * opts.report_every;
        while (t < t_report - 1e-12) {
            const double dt = std::min(opts.max_dt, t_report - t);

            if (ws.empty()) {
                // static reservoir: uniform pressure, nothing moves
                t += dt;
                continue;
            }

            // lagged potential upwinding for face mobilities
            for (std::size_t f = 0; f < faces.size(); ++f) {
                const auto& fc = faces[f];
                const int up = (p[static_cast<std::size_t>(fc.b)] > p[static_cast<std::size_t>(fc.a)])
                                   ? fc.b
                                   : fc.a;
                const auto [krw, kro] = relperm(sw[static_cast<std::size_t>(up)], props);
                lam_w_face[f] = krw / props.mu_w;
                lam_t_face[f] = krw / props.mu_w + kro / props.mu_o;
            }

            trips.clear();
            Eigen::VectorXd b = Eigen::VectorXd::Zero(N);
            std::vector<double> diag(static_cast<std::size_t>(N), 0.0);
            std::vector<double> ct(static_cast<std::size_t>(N));
            for (int c = 0; c < N; ++c) {
                const std::size_t cc = static_cast<std::size_t>(c);
                ct[cc] = sw[cc] * props.c_w + (1.0 - sw[cc]) * props.c_o;
                const double acc = v_cell * phi[cc] * ct[cc] / dt;
                diag[cc] += acc;
                b[c] += acc * p[cc];
            }
            for (std::size_t f = 0; f < faces.size(); ++f) {
                const auto& fc = faces[f];
                const double tl = faces[f].t_geo * lam_t_face[f];
                diag[static_cast<std::size_t>(fc.a)] += tl;
                diag[static_cast<std::size_t>(fc.b)] += tl;
                trips.emplace_back(fc.a, fc.b, -tl);
                trips.emplace_back(fc.b, fc.a, -tl);
            }
            std::vector<double> lam_t_well(ws.size());
            for (std::size_t w = 0; w < ws.size(); ++w) {
                const auto [krw, kro] = relperm(sw[static_cast<std::size_t>(ws[w].cell)], props);
                lam_t_well[w] = krw / props.mu_w + kro / props.mu_o;
                const double wl = ws[w].wi * lam_t_well[w];
                diag[static_cast<std::size_t>(ws[w].cell)] += wl;
                b[ws[w].cell] += wl * ws[w].bhp;
            }
            for (int c = 0; c < N; ++c) trips.emplace_back(c, c, diag[static_cast<std::size_t>(c)]);
            A.setFromTriplets(trips.begin(), trips.end());

            if (!pattern_ready) {
                solver.analyzePattern(A);
                pattern_ready = true;
            }
            solver.factorize(A);
            require(solver.info() == Eigen::Success, "flowsim/solver-failure",
                    "pressure factorization failed");
            Eigen::VectorXd pn = solver.solve(b);
            require(solver.info() == Eigen::Success, "flowsim/solver-failure",
                    "pressure solve failed");
            const double resid = (A * pn - b).norm() / std::max(b.norm(), 1e-30);
            require(resid < 1e-8, "flowsim/solver-failure",
                    "pressure residual too large: " + std::to_string(resid));

            // face total fluxes and well totals under the new pressure
            for (std::size_t f = 0; f < faces.size(); ++f)
                u_face[f] = faces[f].t_geo * lam_t_face[f] * (pn[faces[f].a] - pn[faces[f].b]);
            std::vector<double> q_total(ws.size());
            for (std::size_t w = 0; w < ws.size(); ++w)
                q_total[w] = ws[w].wi * lam_t_well[w] * (ws[w].bhp - pn[ws[w].cell]);

            // CFL bound from the largest cell throughput
            std::vector<double> thru(static_cast<std::size_t>(N), 0.0);
            for (std::size_t f = 0; f < faces.size(); ++f) {
                const double u = std::abs(u_face[f]);
                thru[static_cast<std::size_t>(faces[f].a)] += u;
                thru[static_cast<std::size_t>(faces[f].b)] += u;
            }
            for (std::size_t w = 0; w < ws.size(); ++w)
                thru[static_cast<std::size_t>(ws[w].cell)] += std::abs(q_total[w]);
            double dt_cfl = dt;
            for (int c = 0; c < N; ++c) {
                const std::size_t cc = static_cast<std::size_t>(c);
                if (thru[cc] > 0.0)
                    dt_cfl = std::min(dt_cfl, opts.cfl * v_cell * phi[cc] / (thru[cc] * dfw_max));
            }
            const int n_sub = static_cast<int>(std::ceil(dt / std::max(dt_cfl, 1e-12)));
            require(n_sub <= 2000000, "flowsim/cfl", "saturation sub-step count exploded");
            const double dt_s = dt / n_sub;

            // saturation-weighted share of the compression storage, removed
            // from the transport update so compressing cells do not overshoot
            std::vector<double> corr_rate(static_cast<std::size_t>(N));
            for (int c = 0; c < N; ++c) {
                const std::size_t cc = static_cast<std::size_t>(c);
                const double dp = pn[c] - p[cc];
                corr_rate[cc] = sw[cc] * ct[cc] * dp / dt;
                storage_total += v_cell * phi[cc] * ct[cc] * dp;
                storage_water += v_cell * phi[cc] * sw[cc] * ct[cc] * dp;
            }

            for (int s = 0; s < n_sub; ++s) {
                std::fill(net_w.begin(), net_w.end(), 0.0);
                for (std::size_t f = 0; f < faces.size(); ++f) {
                    const double u = u_face[f];
                    if (u == 0.0) continue;
                    const int up = u > 0.0 ? faces[f].a : faces[f].b;
                    const double fw = fw_of(sw[static_cast<std::size_t>(up)], props);
                    const double qw = fw * u;
                    net_w[static_cast<std::size_t>(faces[f].a)] -= qw;
                    net_w[static_cast<std::size_t>(faces[f].b)] += qw;
                }
                for (std::size_t w = 0; w < ws.size(); ++w) {
                    const std::size_t cc = static_cast<std::size_t>(ws[w].cell);
                    double qw, qo;
                    if (ws[w].kind == WellKind::injector && q_total[w] >= 0.0) {
                        qw = q_total[w];
                        qo = 0.0;
                    } else {
                        const double fw = fw_of(sw[cc], props);
                        qw = fw * q_total[w];
                        qo = (1.0 - fw) * q_total[w];
                    }
                    net_w[cc] += qw;
                    ws[w].cum_w += qw * dt_s;
                    ws[w].cum_o += qo * dt_s;
                    if (qw > 0.0)
                        injected_w += qw * dt_s;
                    else
                        produced_w -= qw * dt_s;
                    produced_o -= std::min(qo, 0.0) * dt_s;
                }
                for (int c = 0; c < N; ++c) {
                    const std::size_t cc = static_cast<std::size_t>(c);
                    double s_new = sw[cc] + dt_s * (net_w[cc] / (v_cell * phi[cc]) - corr_rate[cc]);
                    const double over = std::max({0.0, props.swc - s_new, s_new - (1.0 - props.sor)});
                    if (over > 0.0) {
                        result.audit.max_sat_overshoot = std::max(result.audit.max_sat_overshoot, over);
                        require(over <= opts.sat_tol, "flowsim/sat-overshoot",
                                "saturation overshoot " + std::to_string(over) + " beyond tolerance");
                        s_new = std::clamp(s_new, props.swc, 1.0 - props.sor);
                    }
                    sw[cc] = s_new;
                }
            }

            for (int c = 0; c < N; ++c) p[static_cast<std::size_t>(c)] = pn[c];
            t += dt;
        }

        // report row: interval-averaged rates
        series.times.push_back(t_report);
        double f_inj = 0.0, f_op = 0.0, f_wp = 0.0;
        for (std::size_t w = 0; w < ws.size(); ++w) {
            const double rw_rate = (ws[w].cum_w - ws[w].prev_cum_w) / opts.report_every;
            const double ro_rate = (ws[w].cum_o - ws[w].prev_cum_o) / opts.report_every;
            ws[w].prev_cum_w = ws[w].cum_w;
            ws[w].prev_cum_o = ws[w].cum_o;
            if (ws[w].kind == WellKind::injector) {
                series.water_rate[w].push_back(rw_rate);
                series.oil_rate[w].push_back(std::max(0.0, ro_rate));
                f_inj += rw_rate;
            } else {
                series.water_rate[w].push_back(-rw_rate);
                series.oil_rate[w].push_back(-ro_rate);
                f_wp += -rw_rate;
                f_op += -ro_rate;
            }
        }
        series.field_injection.push_back(f_inj);
        series.field_oil_production.push_back(f_op);
        series.field_water_production.push_back(f_wp);

        // conservation audit against the initial state
        double water_now = 0.0;
        for (int c = 0; c < N; ++c)
            water_now += v_cell * phi[static_cast<std::size_t>(c)] *
                         (sw[static_cast<std::size_t>(c)] - props.sw_init);
        const double denom = std::max({injected_w, 1e-9 * pv_ref});
        const double err_w = std::abs(injected_w - produced_w - (water_now + storage_water)) / denom;
        const double err_t =
            std::abs(injected_w - produced_w - produced_o - storage_total) / denom;
        result.audit.max_water_balance_err = std::max(result.audit.max_water_balance_err, err_w);
        result.audit.max_total_balance_err = std::max(result.audit.max_total_balance_err, err_t);
    }

    result.audit.cumulative_injected = injected_w;
    result.final_pressure = std::move(p);
    result.final_sw = std::move(sw);
    return result;
}

std::vector<double> extract_observations(const WellSeries& series, std::span<const WellSpec> wells,
                                         double every, double until) {
    require(every > 0, "flowsim/bad-config", "observation interval must be positive");
    std::vector<double> obs;
    if (until <= 0) return obs;
    for (double tt = every; tt <= until + 1e-9; tt += every) {
        std::size_t idx = series.times.size();
        for (std::size_t k = 0; k < series.times.size(); ++k)
            if (std::abs(series.times[k] - tt) < 1e-6) {
                idx = k;
                break;
            }
        require(idx < series.times.size(), "flowsim/missing-report",
                "no report at day " + std::to_string(tt));
        for (std::size_t w = 0; w < wells.size(); ++w)
            if (wells[w].kind == WellKind::producer) {
                obs.push_back(series.oil_rate[w][idx]);
                obs.push_back(series.water_rate[w][idx]);
            }
        for (std::size_t w = 0; w < wells.size(); ++w)
            if (wells[w].kind == WellKind::injector) obs.push_back(series.water_rate[w][idx]);
    }
    return obs;
}

std::vector<std::string> observation_labels(std::span<const WellSpec> wells, double every,
                                            double until) {
    std::vector<std::string> labels;
    if (until <= 0) return labels;
    for (double tt = every; tt <= until + 1e-9; tt += every) {
        const std::string ts = "t" + std::to_string(static_cast<long>(std::llround(tt)));
        for (const auto& w : wells)
            if (w.kind == WellKind::producer) {
                labels.push_back(ts + ":" + w.name + ":oil");
                labels.push_back(ts + ":" + w.name + ":water");
            }
        for (const auto& w : wells)
            if (w.kind == WellKind::injector) labels.push_back(ts + ":" + w.name + ":water");
    }
    return labels;
}

void write_series_csv(const std::filesystem::path& path, const WellSeries& series) {
    std::ofstream os(path);
    require(os.good(), "flowsim/io", "cannot open " + path.string() + " for writing");
    os << "time,well,phase,rate\n";
    for (std::size_t k = 0; k < series.times.size(); ++k)
        for (std::size_t w = 0; w < series.well_names.size(); ++w) {
            os << series.times[k] << ',' << series.well_names[w] << ",water,"
               << series.water_rate[w][k] << '\n';
            os << series.times[k] << ',' << series.well_names[w] << ",oil," << series.oil_rate[w][k]
               << '\n';
        }
}

std::vector<WellSpec> reference_wells(int nx, int ny, double bhp_inj, double bhp_prod) {
    auto sx = [nx](int i64) { return std::clamp(static_cast<int>(std::lround(i64 * nx / 64.0)), 0, nx - 1); };
    auto sy = [ny](int j64) { return std::clamp(static_cast<int>(std::lround(j64 * ny / 64.0)), 0, ny - 1); };
    return {
        {"I1", sx(10), sy(10), WellKind::injector, bhp_inj},
        {"I2", sx(10), sy(31), WellKind::injector, bhp_inj},
        {"I3", sx(10), sy(52), WellKind::injector, bhp_inj},
        {"P1", sx(53), sy(20), WellKind::producer, bhp_prod},
        {"P2", sx(53), sy(42), WellKind::producer, bhp_prod},
    };
}

ConditioningSet reference_conditioning(int nx, int ny) {
    ConditioningSet cond;
    for (const auto& w : reference_wells(nx, ny)) cond.points.push_back({w.i, w.j, kChannel});
    return cond;
}

} // namespace geoldm::flowsim
