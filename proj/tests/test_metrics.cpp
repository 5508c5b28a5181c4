#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "geoldm/geogen.hpp"
#include "geoldm/metrics.hpp"

using namespace geoldm;

namespace {

FaciesGrid checkerboard(int n) {
    FaciesGrid g(n, n);
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) g.at(i, j) = ((i + j) % 2 == 0) ? kMud : kChannel;
    return g;
}

/// Literal windowed SSIM: every window evaluated with the direct formula on
/// doubles, no incremental tricks.
double ssim_oracle(std::span<const float> a, std::span<const float> b, int w, int h, double range,
                   int win) {
    const double c1 = (0.01 * range) * (0.01 * range);
    const double c2 = (0.03 * range) * (0.03 * range);
    double total = 0.0;
    int count = 0;
    for (int y = 0; y + win <= h; ++y)
        for (int x = 0; x + win <= w; ++x) {
            double ma = 0, mb = 0;
            for (int wy = 0; wy < win; ++wy)
                for (int wx = 0; wx < win; ++wx) {
                    ma += a[static_cast<std::size_t>(y + wy) * w + x + wx];
                    mb += b[static_cast<std::size_t>(y + wy) * w + x + wx];
                }
            ma /= win * win;
            mb /= win * win;
            double va = 0, vb = 0, cov = 0;
            for (int wy = 0; wy < win; ++wy)
                for (int wx = 0; wx < win; ++wx) {
                    const double da = a[static_cast<std::size_t>(y + wy) * w + x + wx] - ma;
                    const double db = b[static_cast<std::size_t>(y + wy) * w + x + wx] - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            va /= win * win;
            vb /= win * win;
            cov /= win * win;
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                     ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++count;
        }
    return total / count;
}

} // namespace

TEST_CASE("two-point probability basics") {
    SUBCASE("lag zero is one by construction") {
        const auto g = checkerboard(8);
        const auto c = metrics::two_point_probability(g, kMud, 1, 0, 4);
        CHECK(c.prob[0] == 1.0);
    }
    SUBCASE("uniform channel grid stays at one") {
        FaciesGrid g(6, 6, kChannel);
        const auto c = metrics::two_point_probability(g, kChannel, 1, 0, 5);
        for (double p : c.prob) CHECK(p == 1.0);
    }
    SUBCASE("checkerboard alternates exactly") {
        const auto g = checkerboard(8);
        const auto c = metrics::two_point_probability(g, kMud, 1, 0, 4);
        CHECK(c.prob[1] == 0.0);
        CHECK(c.prob[2] == 1.0);
        CHECK(c.prob[3] == 0.0);
        CHECK(c.prob[4] == 1.0);
        // along the diagonal the same color repeats
        const auto d = metrics::two_point_probability(g, kMud, 1, 1, 3);
        CHECK(d.prob[1] == 1.0);
    }
    SUBCASE("pure function") {
        const auto g = checkerboard(8);
        const auto c1 = metrics::two_point_probability(g, kChannel, 1, 1, 3);
        const auto c2 = metrics::two_point_probability(g, kChannel, 1, 1, 3);
        CHECK(c1.prob == c2.prob);
    }
    SUBCASE("lag-zero facies fractions sum to one") {
        const auto g = geogen::generate_realization(32, 32, geogen::ChannelStyle::scaled_to(32), {}, 4);
        double total = 0.0;
        for (std::uint8_t f = 0; f < kNumFacies; ++f) {
            long n = 0;
            for (auto c : g.codes) n += (c == f);
            total += static_cast<double>(n) / static_cast<double>(g.cell_count());
        }
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("envelope bounds every curve") {
        std::vector<FaciesGrid> grids;
        for (std::uint64_t s = 0; s < 10; ++s)
            grids.push_back(geogen::generate_realization(32, 32, geogen::ChannelStyle::scaled_to(32), {}, s));
        const auto env = metrics::two_point_envelope(grids, kChannel, 1, 0, 12);
        for (const auto& c : env.per_grid)
            for (std::size_t l = 0; l < c.prob.size(); ++l) {
                CHECK(c.prob[l] >= env.lo[l] - 1e-12);
                CHECK(c.prob[l] <= env.hi[l] + 1e-12);
            }
    }
}

TEST_CASE("ssim identities and range") {
    const auto g = geogen::generate_realization(32, 32, geogen::ChannelStyle::scaled_to(32), {}, 7);
    CHECK(metrics::ssim(g, g) == doctest::Approx(1.0).epsilon(1e-12));

    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        FaciesGrid a(16, 16), b(16, 16);
        for (auto& c : a.codes) c = static_cast<std::uint8_t>(rng.uniform_int(0, 2));
        for (auto& c : b.codes) c = static_cast<std::uint8_t>(rng.uniform_int(0, 2));
        const double s = metrics::ssim(a, b);
        CHECK(s >= -1.0);
        CHECK(s <= 1.0);
        CHECK(metrics::ssim(a, b) == doctest::Approx(metrics::ssim(b, a)).epsilon(1e-12));
    }
}

TEST_CASE("ssim matches the direct-formula oracle on fixed 8x8 patterns") {
    std::vector<float> a(64), b(64);
    Rng rng(13);
    for (std::size_t k = 0; k < 64; ++k) {
        a[k] = static_cast<float>(std::sin(0.37 * static_cast<double>(k)));
        b[k] = a[k] * 0.8f + 0.1f * rng.normal_f();
    }
    const double got = metrics::ssim(a, b, 8, 8, 2.0, 5);
    const double want = ssim_oracle(a, b, 8, 8, 2.0, 5);
    CHECK(std::abs(got - want) < 1e-9);
}

TEST_CASE("percentile curves") {
    SUBCASE("identical series collapse the band") {
        std::vector<std::vector<double>> series(5, std::vector<double>{1.0, 2.0, 3.0});
        const std::vector<double> times{0.0, 1.0, 2.0};
        const auto band = metrics::percentile_curves(series, times);
        CHECK(band.p10 == band.p50);
        CHECK(band.p50 == band.p90);
        CHECK(band.p50 == std::vector<double>{1.0, 2.0, 3.0});
    }
    SUBCASE("median of three constants") {
        std::vector<std::vector<double>> series{{1.0}, {2.0}, {3.0}};
        const std::vector<double> times{0.0};
        const auto band = metrics::percentile_curves(series, times);
        CHECK(band.p50[0] == doctest::Approx(2.0));
    }
    SUBCASE("matches the sort-based oracle on 200 random series") {
        Rng rng(6);
        std::vector<std::vector<double>> series(200, std::vector<double>(1));
        for (auto& s : series) s[0] = rng.normal();
        const std::vector<double> times{0.0};
        const auto band = metrics::percentile_curves(series, times);

        std::vector<double> sorted(200);
        for (std::size_t k = 0; k < 200; ++k) sorted[k] = series[k][0];
        std::sort(sorted.begin(), sorted.end());
        auto oracle = [&](double q) {
            const double h = q * 199.0;
            const std::size_t lo = static_cast<std::size_t>(h);
            const double w = h - static_cast<double>(lo);
            return sorted[lo] * (1.0 - w) + sorted[lo + 1] * w;
        };
        CHECK(band.p10[0] == doctest::Approx(oracle(0.10)).epsilon(1e-15));
        CHECK(band.p50[0] == doctest::Approx(oracle(0.50)).epsilon(1e-15));
        CHECK(band.p90[0] == doctest::Approx(oracle(0.90)).epsilon(1e-15));
    }
    SUBCASE("band ordering holds on random inputs") {
        Rng rng(8);
        std::vector<std::vector<double>> series(50, std::vector<double>(20));
        for (auto& s : series)
            for (auto& v : s) v = rng.normal();
        std::vector<double> times(20);
        for (std::size_t k = 0; k < 20; ++k) times[k] = static_cast<double>(k);
        const auto band = metrics::percentile_curves(series, times);
        for (std::size_t k = 0; k < 20; ++k) {
            CHECK(band.p10[k] <= band.p50[k]);
            CHECK(band.p50[k] <= band.p90[k]);
        }
    }
}

TEST_CASE("hard data accuracy counting") {
    ConditioningSet cond;
    cond.points = {{1, 1, kChannel}, {2, 2, kMud}};
    std::vector<FaciesGrid> grids(10, FaciesGrid(4, 4, kMud));
    for (auto& g : grids) g.at(1, 1) = kChannel;
    CHECK(metrics::hard_data_accuracy(grids, cond) == doctest::Approx(1.0));
    grids[0].at(2, 2) = kChannel; // 1 of 2 points wrong in 1 of 10 grids
    CHECK(metrics::hard_data_accuracy(grids, cond) == doctest::Approx(19.0 / 20.0));
}

TEST_CASE("interpolation stability curve shapes") {
    vae::VaeConfig vcfg;
    vcfg.grid_n = 16;
    vcfg.base_channels = 8;
    vae::Vae v(vcfg, 3);
    diffusion::UNetConfig ucfg;
    ucfg.latent_n = 2;
    ucfg.base_channels = 8;
    ucfg.emb_dim = 16;
    diffusion::DenoiserNet net(ucfg, 4);
    diffusion::LdmModel model(v, net, diffusion::make_linear_schedule(50, 1e-4, 0.02), 10);

    Rng rng(5);
    vae::LatentField xi1(2, 2), xi2(2, 2);
    for (auto& x : xi1.v) x = rng.normal_f();
    for (auto& x : xi2.v) x = rng.normal_f();
    const auto curves = metrics::interpolation_stability(model, xi1, xi2, 0.05);
    CHECK(curves.deltas.size() == 21); // 1/step + 1
    CHECK(curves.anchored_ssim.size() == 21);
    CHECK(curves.consecutive_ssim.size() == 20); // 1/step
    CHECK(curves.anchored_ssim[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(curves.deltas.front() == doctest::Approx(0.0));
    CHECK(curves.deltas.back() == doctest::Approx(1.0));
}

TEST_CASE("moving average smooths with edge shrinkage") {
    const std::vector<double> x{1.0, 2.0, 3.0, 4.0, 5.0};
    const auto y = metrics::moving_average(x, 3);
    CHECK(y[0] == doctest::Approx(1.5));
    CHECK(y[1] == doctest::Approx(2.0));
    CHECK(y[4] == doctest::Approx(4.5));
    CHECK_THROWS_AS((void)metrics::moving_average(x, 2), Error);
}
