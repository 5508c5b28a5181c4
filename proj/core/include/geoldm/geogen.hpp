#pragma once

#include <array>
#include <cstdint>

#include "geoldm/facies.hpp"

namespace geoldm::geogen {

struct IntRange {
    int lo = 0;
    int hi = 0;
};

struct RealRange {
    double lo = 0.0;
    double hi = 0.0;
};

/// Object-model parameters for sinuous channel bands. Defaults are calibrated
/// so realizations show a few continuous, gently sinuous, levee-flanked
/// channels crossing the grid; widths are in cells, orientation in radians
/// about the +x axis.
struct ChannelStyle {
    IntRange n_channels{3, 5};
    RealRange width{4.0, 7.0};
    RealRange sinuosity_amplitude{2.0, 6.0};
    RealRange sinuosity_wavelength{24.0, 48.0};
    RealRange orientation{-0.35, 0.35};
    RealRange levee_halfwidth{1.0, 2.0};
    int retry_budget = 1000;

    void validate() const;

    /// Same channel geometry scaled to a grid edge length (defaults above are
    /// for 64-cell grids).
    static ChannelStyle scaled_to(int grid_edge);
};

/// One conditioned realization, a pure function of (style, cond, seed).
/// Throws Error("geogen/conditioning-infeasible", ...) if no channel
/// configuration honoring `cond` is found within the retry budget plus one
/// channel-translation repair pass.
FaciesGrid generate_realization(int nx, int ny, const ChannelStyle& style,
                                const ConditioningSet& cond, std::uint64_t seed);

/// n_total conditioned realizations partitioned train/val/test by `split`
/// (fractions summing to 1). Partition sizes use largest-remainder rounding;
/// assignment is a deterministic function of seed. Sub-seeds that fail
/// conditioning are skipped deterministically.
FaciesDataset build_dataset(int nx, int ny, const ChannelStyle& style, const ConditioningSet& cond,
                            int n_total, std::array<double, 3> split, std::uint64_t seed);

/// Deterministic split sizes for n_total by largest remainder.
std::array<int, 3> split_sizes(int n_total, std::array<double, 3> split);

} // namespace geoldm::geogen
