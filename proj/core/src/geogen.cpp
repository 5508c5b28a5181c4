#include "geoldm/geogen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "geoldm/rng.hpp"

namespace geoldm::geogen {

namespace {

struct ChannelParams {
    double cx, cy;     // anchor the centerline passes through at s = 0
    double theta;      // orientation
    double width;      // full band width, cells
    double amplitude;  // sinuosity amplitude, cells
    double wavelength; // sinuosity wavelength, cells
    double phase;
    double levee_hw;   // levee half-width beyond the channel edge, cells
};

double draw(Rng& rng, const RealRange& r) { return rng.uniform(r.lo, r.hi); }

ChannelParams draw_channel(Rng& rng, int nx, int ny, const ChannelStyle& style) {
    ChannelParams c;
    c.theta = draw(rng, style.orientation);
    c.width = draw(rng, style.width);
    c.amplitude = draw(rng, style.sinuosity_amplitude);
    c.wavelength = draw(rng, style.sinuosity_wavelength);
    c.phase = rng.uniform(0.0, 2.0 * M_PI);
    c.levee_hw = draw(rng, style.levee_halfwidth);
    // Anchor near the grid center, offset along the channel normal so the band
    // always crosses the grid interior.
    const double off = rng.uniform(-0.55, 0.55) * std::min(nx, ny);
    c.cx = 0.5 * nx - off * std::sin(c.theta);
    c.cy = 0.5 * ny + off * std::cos(c.theta);
    return c;
}

/// Stamp a disc of radius r into `mask` around (x, y).
void paint_disc(std::vector<std::uint8_t>& mask, int nx, int ny, double x, double y, double r) {
    const int i0 = std::max(0, static_cast<int>(std::floor(x - r)));
    const int i1 = std::min(nx - 1, static_cast<int>(std::ceil(x + r)));
    const int j0 = std::max(0, static_cast<int>(std::floor(y - r)));
    const int j1 = std::min(ny - 1, static_cast<int>(std::ceil(y + r)));
    const double r2 = r * r;
    for (int j = j0; j <= j1; ++j) {
        const double dy = (j + 0.5) - y;
        for (int i = i0; i <= i1; ++i) {
            const double dx = (i + 0.5) - x;
            if (dx * dx + dy * dy <= r2) mask[static_cast<std::size_t>(j) * nx + i] = 1;
        }
    }
}

/// Rasterize one channel: centerline p(s) = anchor + s*u + A*sin(2*pi*s/wl + phase)*v,
/// swept across the whole grid diagonal, stamped as overlapping discs.
void rasterize(const ChannelParams& c, int nx, int ny, std::vector<std::uint8_t>& channel_mask,
               std::vector<std::uint8_t>& levee_mask) {
    const double ux = std::cos(c.theta), uy = std::sin(c.theta);
    const double vx = -uy, vy = ux;
    const double half = 0.5 * std::hypot(nx, ny) + c.amplitude + c.width;
    const double step = 0.4;
    const double r_ch = 0.5 * c.width;
    const double r_lv = r_ch + c.levee_hw;
    for (double s = -half; s <= half; s += step) {
        const double w = c.amplitude * std::sin(2.0 * M_PI * s / c.wavelength + c.phase);
        const double x = c.cx + s * ux + w * vx;
        const double y = c.cy + s * uy + w * vy;
        paint_disc(channel_mask, nx, ny, x, y, r_ch);
        paint_disc(levee_mask, nx, ny, x, y, r_lv);
    }
}

FaciesGrid compose(int nx, int ny, const std::vector<ChannelParams>& channels) {
    std::vector<std::uint8_t> channel_mask(static_cast<std::size_t>(nx) * ny, 0);
    std::vector<std::uint8_t> levee_mask(channel_mask.size(), 0);
    for (const auto& c : channels) rasterize(c, nx, ny, channel_mask, levee_mask);
    FaciesGrid g(nx, ny, kMud);
    for (std::size_t k = 0; k < g.codes.size(); ++k) {
        if (channel_mask[k])
            g.codes[k] = kChannel;
        else if (levee_mask[k])
            g.codes[k] = kLevee;
    }
    return g;
}

bool honors(const FaciesGrid& g, const ConditioningSet& cond) {
    return std::all_of(cond.points.begin(), cond.points.end(),
                       [&](const CondPoint& p) { return g.at(p.i, p.j) == p.facies; });
}

/// Facies a single cell would get, evaluated against the sampled centerlines
/// directly. Must agree with compose(): same sample spacing, same cell-center
/// distance test.
std::uint8_t facies_at_point(const std::vector<ChannelParams>& channels, int nx, int ny, int pi,
                             int pj) {
    const double px = pi + 0.5, py = pj + 0.5;
    bool levee = false;
    for (const auto& c : channels) {
        const double ux = std::cos(c.theta), uy = std::sin(c.theta);
        const double vx = -uy, vy = ux;
        const double half = 0.5 * std::hypot(nx, ny) + c.amplitude + c.width;
        const double r_ch2 = 0.25 * c.width * c.width;
        const double r_lv = 0.5 * c.width + c.levee_hw;
        const double r_lv2 = r_lv * r_lv;
        for (double s = -half; s <= half; s += 0.4) {
            const double w = c.amplitude * std::sin(2.0 * M_PI * s / c.wavelength + c.phase);
            const double dx = c.cx + s * ux + w * vx - px;
            const double dy = c.cy + s * uy + w * vy - py;
            const double d2 = dx * dx + dy * dy;
            if (d2 <= r_ch2) return kChannel;
            if (d2 <= r_lv2) levee = true;
        }
    }
    return levee ? kLevee : kMud;
}

bool honors_points(const std::vector<ChannelParams>& channels, int nx, int ny,
                   const ConditioningSet& cond) {
    for (const auto& p : cond.points)
        if (facies_at_point(channels, nx, ny, p.i, p.j) != p.facies) return false;
    return true;
}

/// Nearest centerline point of channel `c` to cell center (px, py).
std::pair<double, double> nearest_on_centerline(const ChannelParams& c, int nx, int ny, double px,
                                                double py) {
    const double ux = std::cos(c.theta), uy = std::sin(c.theta);
    const double vx = -uy, vy = ux;
    const double half = 0.5 * std::hypot(nx, ny) + c.amplitude + c.width;
    double best_d2 = 1e300, bx = c.cx, by = c.cy;
    for (double s = -half; s <= half; s += 0.4) {
        const double w = c.amplitude * std::sin(2.0 * M_PI * s / c.wavelength + c.phase);
        const double x = c.cx + s * ux + w * vx;
        const double y = c.cy + s * uy + w * vy;
        const double d2 = (x - px) * (x - px) + (y - py) * (y - py);
        if (d2 < best_d2) {
            best_d2 = d2;
            bx = x;
            by = y;
        }
    }
    return {bx, by};
}

} // namespace

void ChannelStyle::validate() const {
    require(n_channels.lo <= n_channels.hi && n_channels.lo >= 0, "geogen/bad-style",
            "n_channels range invalid");
    auto check = [](const RealRange& r, const char* name, double min_lo) {
        require(r.lo <= r.hi, "geogen/bad-style", std::string(name) + " range has lo > hi");
        require(r.lo >= min_lo, "geogen/bad-style", std::string(name) + " below minimum");
    };
    check(width, "width", 1.0);
    check(sinuosity_amplitude, "sinuosity_amplitude", 0.0);
    check(sinuosity_wavelength, "sinuosity_wavelength", 1.0);
    check(orientation, "orientation", -M_PI);
    check(levee_halfwidth, "levee_halfwidth", 0.0);
    require(retry_budget >= 1, "geogen/bad-style", "retry_budget must be >= 1");
}

ChannelStyle ChannelStyle::scaled_to(int grid_edge) {
    ChannelStyle s; // defaults tuned for 64-cell grids
    const double f = grid_edge / 64.0;
    auto scale = [f](RealRange& r, double min_lo) {
        r.lo = std::max(min_lo, r.lo * f);
        r.hi = std::max(r.lo, r.hi * f);
    };
    scale(s.width, 2.0);
    scale(s.sinuosity_amplitude, 0.5);
    scale(s.sinuosity_wavelength, 8.0);
    scale(s.levee_halfwidth, 1.0);
    return s;
}

FaciesGrid generate_realization(int nx, int ny, const ChannelStyle& style,
                                const ConditioningSet& cond, std::uint64_t seed) {
    style.validate();
    cond.validate(nx, ny);
    Rng rng(splitmix64(seed));

    std::vector<ChannelParams> last;
    for (int attempt = 0; attempt < style.retry_budget; ++attempt) {
        const int n = rng.uniform_int(style.n_channels.lo, style.n_channels.hi);
        std::vector<ChannelParams> channels;
        channels.reserve(n);
        for (int k = 0; k < n; ++k) channels.push_back(draw_channel(rng, nx, ny, style));
        if (honors_points(channels, nx, ny, cond)) {
            FaciesGrid g = compose(nx, ny, channels);
            if (honors(g, cond)) return g;
        }
        last = std::move(channels);
    }

    // Repair pass: for each unmet channel-facies point, translate channels in
    // order of centerline distance and keep the first translation that strictly
    // reduces the number of unmet conditioning points.
    if (!last.empty()) {
        auto unmet_count = [&](const FaciesGrid& g) {
            int n = 0;
            for (const auto& p : cond.points) n += (g.at(p.i, p.j) != p.facies);
            return n;
        };
        FaciesGrid g = compose(nx, ny, last);
        for (const auto& p : cond.points) {
            if (p.facies != kChannel || g.at(p.i, p.j) == kChannel) continue;
            const double px = p.i + 0.5, py = p.j + 0.5;
            std::vector<std::pair<double, std::size_t>> order;
            for (std::size_t k = 0; k < last.size(); ++k) {
                auto [bx, by] = nearest_on_centerline(last[k], nx, ny, px, py);
                order.push_back({(bx - px) * (bx - px) + (by - py) * (by - py), k});
            }
            std::sort(order.begin(), order.end());
            const int before = unmet_count(g);
            for (const auto& [d2, k] : order) {
                auto trial = last;
                auto [bx, by] = nearest_on_centerline(trial[k], nx, ny, px, py);
                trial[k].cx += px - bx;
                trial[k].cy += py - by;
                FaciesGrid g2 = compose(nx, ny, trial);
                if (unmet_count(g2) < before) {
                    last = std::move(trial);
                    g = std::move(g2);
                    break;
                }
            }
        }
        if (honors(g, cond)) return g;
    }

    throw Error("geogen/conditioning-infeasible",
                "no channel configuration honoring all " + std::to_string(cond.size()) +
                    " conditioning points within " + std::to_string(style.retry_budget) + " retries");
}

std::array<int, 3> split_sizes(int n_total, std::array<double, 3> split) {
    const double sum = split[0] + split[1] + split[2];
    require(std::abs(sum - 1.0) <= 1e-9, "geogen/bad-split", "split fractions must sum to 1");
    for (double f : split) require(f >= 0.0, "geogen/bad-split", "split fractions must be >= 0");

    std::array<int, 3> sizes{};
    std::array<double, 3> frac{};
    int assigned = 0;
    for (int k = 0; k < 3; ++k) {
        const double want = split[k] * n_total;
        sizes[k] = static_cast<int>(std::floor(want + 1e-9));
        frac[k] = want - sizes[k];
        assigned += sizes[k];
    }
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b]; });
    for (int r = 0; r < n_total - assigned; ++r) ++sizes[order[r % 3]];
    return sizes;
}

FaciesDataset build_dataset(int nx, int ny, const ChannelStyle& style, const ConditioningSet& cond,
                            int n_total, std::array<double, 3> split, std::uint64_t seed) {
    require(n_total >= 10, "geogen/bad-dataset", "n_total must be >= 10");
    const auto sizes = split_sizes(n_total, split);

    std::vector<FaciesGrid> all;
    all.reserve(n_total);
    const std::uint64_t gen_root = derive_seed(seed, "geogen.realizations");
    std::uint64_t k = 0;
    int failures = 0;
    while (static_cast<int>(all.size()) < n_total) {
        try {
            all.push_back(generate_realization(nx, ny, style, cond, derive_seed(gen_root, k)));
        } catch (const Error&) {
            require(++failures <= 10 * n_total, "geogen/conditioning-infeasible",
                    "dataset generation failing persistently; style cannot honor conditioning");
        }
        ++k;
    }

    // Seeded shuffle, then contiguous train/val/test slices.
    std::vector<int> idx(n_total);
    std::iota(idx.begin(), idx.end(), 0);
    Rng shuffle_rng(derive_seed(seed, "geogen.split"));
    for (int i = n_total - 1; i > 0; --i)
        std::swap(idx[i], idx[shuffle_rng.uniform_int(0, i)]);

    FaciesDataset ds;
    ds.nx = nx;
    ds.ny = ny;
    int pos = 0;
    for (int t = 0; t < sizes[0]; ++t) ds.train.push_back(all[idx[pos++]]);
    for (int t = 0; t < sizes[1]; ++t) ds.val.push_back(all[idx[pos++]]);
    for (int t = 0; t < sizes[2]; ++t) ds.test.push_back(all[idx[pos++]]);
    return ds;
}

} // namespace geoldm::geogen
