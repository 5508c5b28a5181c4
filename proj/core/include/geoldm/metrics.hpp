#pragma once

#include "geoldm/diffusion.hpp"
#include "geoldm/facies.hpp"

namespace geoldm::metrics {

/// Same-facies transition probability along one direction:
/// prob[l] = P(facies(p + l*dir) = f | facies(p) = f) over all in-bounds pairs.
/// prob[0] = 1 by construction.
struct TwoPointCurve {
    std::uint8_t facies = 0;
    int dx = 1, dy = 0;
    std::vector<double> prob; // index = lag, 0..max_lag
};

struct TwoPointEnvelope {
    std::vector<TwoPointCurve> per_grid;
    std::vector<double> mean, lo, hi; // across grids, per lag
};

TwoPointCurve two_point_probability(const FaciesGrid& grid, std::uint8_t facies, int dx, int dy,
                                    int max_lag);
TwoPointEnvelope two_point_envelope(std::span<const FaciesGrid> grids, std::uint8_t facies, int dx,
                                    int dy, int max_lag);

/// Mean windowed SSIM over two equal-shape intensity images (values spanning
/// `dynamic_range`), 7x7 uniform window, standard 0.01/0.03 stabilizers.
double ssim(std::span<const float> a, std::span<const float> b, int width, int height,
            double dynamic_range, int window = 7);

/// Facies grids are mapped to continuous levels {-1, 0, 1} first (range 2).
double ssim(const FaciesGrid& a, const FaciesGrid& b);

struct PercentileBand {
    std::vector<double> times;
    std::vector<double> p10, p50, p90;
};

/// Per-timestep empirical percentiles with linear interpolation between order
/// statistics. `series` is one row per realization, equal time grids.
PercentileBand percentile_curves(std::span<const std::vector<double>> series,
                                 std::span<const double> times);

/// Empirical quantile (linear interpolation), q in [0, 1].
double quantile(std::vector<double> values, double q);

/// Fraction of (grid, point) pairs whose facies matches the conditioning.
double hard_data_accuracy(std::span<const FaciesGrid> grids, const ConditioningSet& cond);

struct StabilityCurves {
    std::vector<double> deltas;          // 0, step, ..., 1
    std::vector<double> anchored_ssim;   // SSIM(m(0), m(delta)), size = deltas
    std::vector<double> consecutive_ssim; // SSIM(m(delta_k), m(delta_{k+1})), size = deltas - 1
};

/// Generates models along the linear latent interpolation between xi1 and xi2
/// and reports both SSIM curves.
StabilityCurves interpolation_stability(const diffusion::LdmModel& model,
                                        const vae::LatentField& xi1, const vae::LatentField& xi2,
                                        double step);

/// Centered moving average, window must be odd; edges use the available part
/// of the window.
std::vector<double> moving_average(std::span<const double> x, int window);

void write_two_point_csv(const std::filesystem::path& path, const TwoPointEnvelope& env);
void write_band_csv(const std::filesystem::path& path, const PercentileBand& band);

} // namespace geoldm::metrics
