#include "geoldm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace geoldm::metrics {

TwoPointCurve two_point_probability(const FaciesGrid& grid, std::uint8_t facies, int dx, int dy,
                                    int max_lag) {
    require(!(dx == 0 && dy == 0), "metrics/bad-direction", "direction must be nonzero");
    require(max_lag >= 0 && max_lag * std::abs(dx) < grid.nx && max_lag * std::abs(dy) < grid.ny,
            "metrics/bad-lag", "max_lag exceeds grid extent");
    TwoPointCurve curve;
    curve.facies = facies;
    curve.dx = dx;
    curve.dy = dy;
    curve.prob.resize(static_cast<std::size_t>(max_lag) + 1);
    curve.prob[0] = 1.0;
    for (int l = 1; l <= max_lag; ++l) {
        long hits = 0, total = 0;
        const int oi = l * dx, oj = l * dy;
        for (int j = 0; j < grid.ny; ++j) {
            const int j2 = j + oj;
            if (j2 < 0 || j2 >= grid.ny) continue;
            for (int i = 0; i < grid.nx; ++i) {
                const int i2 = i + oi;
                if (i2 < 0 || i2 >= grid.nx) continue;
                if (grid.at(i, j) != facies) continue;
                ++total;
                if (grid.at(i2, j2) == facies) ++hits;
            }
        }
        curve.prob[static_cast<std::size_t>(l)] =
            total > 0 ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
    }
    return curve;
}

TwoPointEnvelope two_point_envelope(std::span<const FaciesGrid> grids, std::uint8_t facies, int dx,
                                    int dy, int max_lag) {
    require(!grids.empty(), "metrics/empty-set", "two_point_envelope needs at least one grid");
    TwoPointEnvelope env;
    env.per_grid.reserve(grids.size());
    for (const auto& g : grids)
        env.per_grid.push_back(two_point_probability(g, facies, dx, dy, max_lag));
    const std::size_t L = env.per_grid[0].prob.size();
    env.mean.assign(L, 0.0);
    env.lo.assign(L, std::numeric_limits<double>::infinity());
    env.hi.assign(L, -std::numeric_limits<double>::infinity());
    for (const auto& c : env.per_grid)
        for (std::size_t l = 0; l < L; ++l) {
            env.mean[l] += c.prob[l];
            env.lo[l] = std::min(env.lo[l], c.prob[l]);
            env.hi[l] = std::max(env.hi[l], c.prob[l]);
        }
    for (auto& m : env.mean) m /= static_cast<double>(grids.size());
    return env;
}

double ssim(std::span<const float> a, std::span<const float> b, int width, int height,
            double dynamic_range, int window) {
    require(a.size() == b.size() &&
                a.size() == static_cast<std::size_t>(width) * static_cast<std::size_t>(height),
            "metrics/shape-mismatch", "ssim image sizes differ");
    require(window >= 1 && window <= width && window <= height, "metrics/bad-window",
            "ssim window larger than image");
    const double c1 = std::pow(0.01 * dynamic_range, 2);
    const double c2 = std::pow(0.03 * dynamic_range, 2);
    const int n = window * window;

    double acc = 0.0;
    long count = 0;
    for (int y = 0; y + window <= height; ++y) {
        for (int x = 0; x + window <= width; ++x) {
            double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
            for (int wy = 0; wy < window; ++wy)
                for (int wx = 0; wx < window; ++wx) {
                    const double va = a[static_cast<std::size_t>(y + wy) * width + (x + wx)];
                    const double vb = b[static_cast<std::size_t>(y + wy) * width + (x + wx)];
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            const double mu_a = sa / n, mu_b = sb / n;
            const double var_a = saa / n - mu_a * mu_a;
            const double var_b = sbb / n - mu_b * mu_b;
            const double cov = sab / n - mu_a * mu_b;
            const double num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            const double den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            acc += num / den;
            ++count;
        }
    }
    return acc / static_cast<double>(count);
}

double ssim(const FaciesGrid& a, const FaciesGrid& b) {
    require(a.nx == b.nx && a.ny == b.ny, "metrics/shape-mismatch", "ssim grids differ in shape");
    std::vector<float> la(a.cell_count()), lb(b.cell_count());
    for (std::size_t k = 0; k < la.size(); ++k) {
        la[k] = code_to_level(a.codes[k]);
        lb[k] = code_to_level(b.codes[k]);
    }
    const int window = std::min({7, a.nx, a.ny});
    return ssim(la, lb, a.nx, a.ny, 2.0, window);
}

double quantile(std::vector<double> values, double q) {
    require(!values.empty(), "metrics/empty-set", "quantile of empty set");
    require(q >= 0.0 && q <= 1.0, "metrics/bad-quantile", "q must be in [0, 1]");
    std::sort(values.begin(), values.end());
    const double h = q * static_cast<double>(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(h));
    if (lo + 1 >= values.size()) return values.back();
    const double w = h - static_cast<double>(lo);
    return values[lo] * (1.0 - w) + values[lo + 1] * w;
}

PercentileBand percentile_curves(std::span<const std::vector<double>> series,
                                 std::span<const double> times) {
    require(!series.empty(), "metrics/empty-set", "percentile_curves needs at least one series");
    const std::size_t nt = times.size();
    for (const auto& s : series)
        require(s.size() == nt, "metrics/shape-mismatch", "series lengths differ from time grid");
    PercentileBand band;
    band.times.assign(times.begin(), times.end());
    band.p10.resize(nt);
    band.p50.resize(nt);
    band.p90.resize(nt);
    std::vector<double> column(series.size());
    for (std::size_t t = 0; t < nt; ++t) {
        for (std::size_t s = 0; s < series.size(); ++s) column[s] = series[s][t];
        band.p10[t] = quantile(column, 0.10);
        band.p50[t] = quantile(column, 0.50);
        band.p90[t] = quantile(column, 0.90);
    }
    return band;
}

double hard_data_accuracy(std::span<const FaciesGrid> grids, const ConditioningSet& cond) {
    if (grids.empty() || cond.empty()) return 1.0;
    cond.validate(grids[0].nx, grids[0].ny);
    long hits = 0;
    for (const auto& g : grids)
        for (const auto& p : cond.points)
            if (g.at(p.i, p.j) == p.facies) ++hits;
    return static_cast<double>(hits) /
           (static_cast<double>(grids.size()) * static_cast<double>(cond.size()));
}

StabilityCurves interpolation_stability(const diffusion::LdmModel& model,
                                        const vae::LatentField& xi1, const vae::LatentField& xi2,
                                        double step) {
    require(step > 0.0 && step < 1.0, "metrics/bad-step", "step must be in (0, 1)");
    StabilityCurves out;
    std::vector<vae::LatentField> latents;
    for (double d = 0.0; d < 1.0 + 1e-12; d += step) {
        const double delta = std::min(d, 1.0);
        out.deltas.push_back(delta);
        latents.push_back(diffusion::interpolate_latents(xi1, xi2, delta));
        if (delta >= 1.0) break;
    }
    if (out.deltas.back() < 1.0 - 1e-12) {
        out.deltas.push_back(1.0);
        latents.push_back(diffusion::interpolate_latents(xi1, xi2, 1.0));
    }
    const auto grids = model.generate_batch(latents);
    out.anchored_ssim.reserve(grids.size());
    for (const auto& g : grids) out.anchored_ssim.push_back(ssim(grids.front(), g));
    for (std::size_t k = 0; k + 1 < grids.size(); ++k)
        out.consecutive_ssim.push_back(ssim(grids[k], grids[k + 1]));
    return out;
}

std::vector<double> moving_average(std::span<const double> x, int window) {
    require(window >= 1 && window % 2 == 1, "metrics/bad-window", "window must be odd");
    std::vector<double> out(x.size());
    const int half = window / 2;
    for (int k = 0; k < static_cast<int>(x.size()); ++k) {
        const int lo = std::max(0, k - half);
        const int hi = std::min(static_cast<int>(x.size()) - 1, k + half);
        double acc = 0.0;
        for (int m = lo; m <= hi; ++m) acc += x[static_cast<std::size_t>(m)];
        out[static_cast<std::size_t>(k)] = acc / static_cast<double>(hi - lo + 1);
    }
    return out;
}

void write_two_point_csv(const std::filesystem::path& path, const TwoPointEnvelope& env) {
    std::ofstream os(path);
    require(os.good(), "metrics/io", "cannot open " + path.string() + " for writing");
    os << "lag,mean,min,max\n";
    for (std::size_t l = 0; l < env.mean.size(); ++l)
        os << l << ',' << env.mean[l] << ',' << env.lo[l] << ',' << env.hi[l] << '\n';
}

void write_band_csv(const std::filesystem::path& path, const PercentileBand& band) {
    std::ofstream os(path);
    require(os.good(), "metrics/io", "cannot open " + path.string() + " for writing");
    os << "time,p10,p50,p90\n";
    for (std::size_t t = 0; t < band.times.size(); ++t)
        os << band.times[t] << ',' << band.p10[t] << ',' << band.p50[t] << ',' << band.p90[t] << '\n';
}

} // namespace geoldm::metrics
