#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "geoldm/error.hpp"

namespace geoldm {

/// Facies codes. The ordering matches the permeability ordering
/// (mud lowest, channel highest), which downstream property maps rely on.
inline constexpr std::uint8_t kMud = 0;
inline constexpr std::uint8_t kLevee = 1;
inline constexpr std::uint8_t kChannel = 2;
inline constexpr int kNumFacies = 3;

/// Integer-coded 2D facies field. Row-major storage: index = j * nx + i,
/// with i the x (column) index and j the y (row) index.
struct FaciesGrid {
    int nx = 0;
    int ny = 0;
    std::vector<std::uint8_t> codes;

    FaciesGrid() = default;
    FaciesGrid(int nx_, int ny_, std::uint8_t fill = kMud)
        : nx(nx_), ny(ny_), codes(static_cast<std::size_t>(nx_) * ny_, fill) {
        require(nx_ >= 1 && ny_ >= 1, "facies/bad-shape", "grid dims must be >= 1");
    }

    std::uint8_t& at(int i, int j) { return codes[static_cast<std::size_t>(j) * nx + i]; }
    std::uint8_t at(int i, int j) const { return codes[static_cast<std::size_t>(j) * nx + i]; }
    bool in_bounds(int i, int j) const { return i >= 0 && i < nx && j >= 0 && j < ny; }
    std::size_t cell_count() const { return codes.size(); }

    bool operator==(const FaciesGrid&) const = default;
};

struct CondPoint {
    int i = 0;
    int j = 0;
    std::uint8_t facies = kChannel;
};

/// Hard-data locations every realization must honor.
struct ConditioningSet {
    std::vector<CondPoint> points;

    std::size_t size() const { return points.size(); }
    bool empty() const { return points.empty(); }

    /// Bounds + duplicate check against a target grid size.
    void validate(int nx, int ny) const;
};

/// Facies <-> continuous intensity mapping used by the VAE and by SSIM:
/// {mud, levee, channel} -> {-1, 0, +1}. Discretization is nearest-level.
inline float code_to_level(std::uint8_t code) { return static_cast<float>(code) - 1.0f; }

inline std::uint8_t level_to_code(float level) {
    if (level < -0.5f) return kMud;
    if (level < 0.5f) return kLevee;
    return kChannel;
}

/// Dataset container produced by geogen::build_dataset.
struct FaciesDataset {
    int nx = 0;
    int ny = 0;
    std::vector<FaciesGrid> train;
    std::vector<FaciesGrid> val;
    std::vector<FaciesGrid> test;
};

/// Binary grid-stack file ("GGDS"): little-endian header
/// {magic, version u32, count u32, nx u32, ny u32} followed by `count`
/// row-major u8 grids.
void write_grid_file(const std::filesystem::path& path, std::span<const FaciesGrid> grids);
std::vector<FaciesGrid> read_grid_file(const std::filesystem::path& path);

/// Conditioning file: text lines "i j facies", '#' comments allowed.
void write_conditioning_file(const std::filesystem::path& path, const ConditioningSet& cond);
ConditioningSet read_conditioning_file(const std::filesystem::path& path);

} // namespace geoldm
