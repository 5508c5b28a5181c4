#include "doctest.h"

#include <cmath>

#include "geoldm/geogen.hpp"
#include "geoldm/vae.hpp"

using namespace geoldm;
using nn::Tensor;
using vae::LatentDistribution;
using vae::LatentField;

namespace {

vae::VaeConfig tiny_cfg(int grid_n = 16, int base = 8) {
    vae::VaeConfig cfg;
    cfg.grid_n = grid_n;
    cfg.base_channels = base;
    return cfg;
}

FaciesDataset tiny_dataset(int grid_n, int n, std::uint64_t seed) {
    const auto style = geogen::ChannelStyle::scaled_to(grid_n);
    FaciesDataset ds;
    ds.nx = grid_n;
    ds.ny = grid_n;
    for (int k = 0; k < n; ++k)
        ds.train.push_back(geogen::generate_realization(grid_n, grid_n, style, {},
                                                        derive_seed(seed, static_cast<std::uint64_t>(k))));
    return ds;
}

} // namespace

TEST_CASE("encoder maps N x N to N/8 x N/8") {
    SUBCASE("64 to 8") {
        vae::Vae model(tiny_cfg(64, 8), 1);
        const FaciesGrid m(64, 64, kChannel);
        const auto dist = model.encode(m);
        CHECK(dist.mu.nx == 8);
        CHECK(dist.mu.ny == 8);
        CHECK(dist.log_var.nx == 8);
    }
    SUBCASE("32 to 4") {
        vae::Vae model(tiny_cfg(32, 8), 1);
        const FaciesGrid m(32, 32, kMud);
        const auto dist = model.encode(m);
        CHECK(dist.mu.nx == 4);
    }
}

TEST_CASE("encode and decode are deterministic in the parameters") {
    vae::Vae model(tiny_cfg(), 2);
    const FaciesGrid m = geogen::generate_realization(16, 16, geogen::ChannelStyle::scaled_to(16), {}, 3);
    const auto d1 = model.encode(m);
    const auto d2 = model.encode(m);
    CHECK(d1.mu.v == d2.mu.v);
    CHECK(d1.log_var.v == d2.log_var.v);
    const auto g1 = model.decode(d1.mu);
    const auto g2 = model.decode(d1.mu);
    CHECK(g1 == g2);
    CHECK(g1.nx == 16);
    CHECK(g1.ny == 16);
}

TEST_CASE("sample_latent: zero variance returns the mean") {
    LatentDistribution dist;
    dist.mu = LatentField(4, 4, 1.25f);
    dist.log_var = LatentField(4, 4, -60.0f); // sigma ~ 0 (below the clamp floor pre-encode)
    const auto xi = vae::sample_latent(dist, 9);
    for (float v : xi.v) CHECK(v == doctest::Approx(1.25f).epsilon(1e-6));
}

TEST_CASE("sample_latent matches N(0,1) moments over many draws") {
    LatentDistribution dist;
    dist.mu = LatentField(10, 10, 0.0f);
    dist.log_var = LatentField(10, 10, 0.0f); // sigma = 1
    double sum = 0.0, sum2 = 0.0;
    const int draws = 1000; // 1000 fields x 100 cells = 1e5 samples
    for (int k = 0; k < draws; ++k) {
        const auto xi = vae::sample_latent(dist, static_cast<std::uint64_t>(k));
        for (float v : xi.v) {
            sum += v;
            sum2 += static_cast<double>(v) * v;
        }
    }
    const double n = draws * 100.0;
    const double mean = sum / n;
    const double var = sum2 / n - mean * mean;
    CHECK(std::abs(mean) < 0.02);
    CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("sample_latent is deterministic per seed") {
    LatentDistribution dist;
    dist.mu = LatentField(4, 4, 0.0f);
    dist.log_var = LatentField(4, 4, 0.5f);
    CHECK(vae::sample_latent(dist, 77).v == vae::sample_latent(dist, 77).v);
    CHECK(vae::sample_latent(dist, 77).v != vae::sample_latent(dist, 78).v);
}

TEST_CASE("vae loss: zero reconstruction error and closed-form KL values") {
    const FaciesGrid m = geogen::generate_realization(16, 16, geogen::ChannelStyle::scaled_to(16), {}, 5);
    Tensor m_hat = vae::grids_to_tensor(std::span(&m, 1));
    ConditioningSet cond;
    cond.points = {{2, 2, m.at(2, 2)}};

    SUBCASE("m equals m_hat: recon and hard vanish") {
        LatentDistribution dist;
        dist.mu = LatentField(2, 2, 0.0f);
        dist.log_var = LatentField(2, 2, 0.0f);
        const auto rep = vae::vae_loss(m, m_hat, dist, cond, 1e-6f, 10.0f);
        CHECK(rep.recon == doctest::Approx(0.0));
        CHECK(rep.hard == doctest::Approx(0.0));
        CHECK(rep.kl == doctest::Approx(0.0)); // standard normal posterior
    }
    SUBCASE("unit mean, unit variance single cell gives KL = 1/2") {
        LatentDistribution dist;
        dist.mu = LatentField(1, 1, 1.0f);
        dist.log_var = LatentField(1, 1, 0.0f);
        const auto rep = vae::vae_loss(m, m_hat, dist, cond, 1e-6f, 10.0f);
        CHECK(rep.kl == doctest::Approx(0.5).epsilon(1e-6));
    }
}

TEST_CASE("loss report satisfies the decomposition identity") {
    Rng rng(83);
    vae::Vae model(tiny_cfg(), 4);
    const auto ds = tiny_dataset(16, 4, 11);
    Tensor m = vae::grids_to_tensor(ds.train);
    auto [mu, lv] = model.encode_t(m);
    Tensor m_hat = model.decode_t(mu);
    ConditioningSet cond;
    cond.points = {{3, 3, kChannel}, {12, 9, kChannel}};
    Tensor mask = vae::hard_data_mask(cond, 4, 16);
    const auto rep =
        vae::vae_loss_t(m, m_hat, mu, lv, mask, 2, 1e-6f, 10.0f).report(1e-6f, 10.0f);
    CHECK(rep.total ==
          doctest::Approx(rep.recon + rep.lambda_kl * rep.kl + rep.lambda_h * rep.hard)
              .epsilon(1e-6));
    CHECK(rep.kl >= 0.0);
}

TEST_CASE("KL is nonnegative for random encoder outputs") {
    Rng rng(89);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor mu = Tensor::randn({1, 1, 3, 3}, rng, 2.0f);
        Tensor lv = Tensor::randn({1, 1, 3, 3}, rng, 2.0f);
        Tensor kl_terms =
            nn::add_scalar(nn::sub(nn::add(nn::mul(mu, mu), nn::exp(lv)), lv), -1.0f);
        CHECK(nn::scale(nn::sum(kl_terms), 0.5f).item() >= -1e-5f);
    }
}

TEST_CASE("checkpoint round-trip preserves the model function") {
    vae::Vae model(tiny_cfg(), 6);
    const auto ds = tiny_dataset(16, 1, 13);
    const auto before = model.encode(ds.train[0]);
    const auto ckpt = model.to_checkpoint();
    vae::Vae back = vae::Vae::from_checkpoint(ckpt);
    const auto after = back.encode(ds.train[0]);
    CHECK(before.mu.v == after.mu.v);
    CHECK(before.log_var.v == after.log_var.v);
}

// Overfit fixture: 8 realizations, 2000 steps. The 2% recon threshold was
// fixed after the first run of this fixture.
TEST_CASE("training drives reconstruction loss below 2% of its initial value" *
          doctest::timeout(600)) {
    auto ds = tiny_dataset(16, 8, 21);
    ConditioningSet cond;
    cond.points = {{4, 4, ds.train[0].at(4, 4)}, {11, 11, ds.train[0].at(11, 11)}};
    vae::VaeConfig cfg = tiny_cfg();
    cfg.steps = 2000;
    cfg.batch_size = 8;
    cfg.val_every = 500;
    const auto result = vae::train_vae(ds, cond, cfg, 31, nullptr);
    REQUIRE(!result.log.empty());
    const double initial = result.log.front().recon;
    const double final_recon = result.log.back().recon;
    CHECK(final_recon < 0.02 * initial);

    SUBCASE("overfit model reconstructs training grids after discretization") {
        vae::Vae model = vae::Vae::from_checkpoint(result.best);
        long match = 0, total = 0;
        for (const auto& g : ds.train) {
            const auto rec = model.decode(model.encode(g).mu);
            for (std::size_t k = 0; k < g.cell_count(); ++k) {
                match += (rec.codes[k] == g.codes[k]);
                ++total;
            }
        }
        CHECK(static_cast<double>(match) / static_cast<double>(total) >= 0.99);
    }
}

// Statistical check over 3 seeds: the hard-data weight must not hurt the
// hard-data loss at equal step counts.
TEST_CASE("hard-data weighting reduces hard-data loss on the overfit fixture" *
          doctest::timeout(600)) {
    auto ds = tiny_dataset(16, 8, 23);
    ConditioningSet cond;
    cond.points = {{4, 4, ds.train[0].at(4, 4)},
                   {8, 12, ds.train[0].at(8, 12)},
                   {13, 3, ds.train[0].at(13, 3)}};
    double with_weight = 0.0, without_weight = 0.0;
    for (std::uint64_t seed : {101ULL, 102ULL, 103ULL}) {
        vae::VaeConfig cfg = tiny_cfg();
        cfg.steps = 400;
        cfg.batch_size = 8;
        cfg.val_every = 400;
        cfg.lambda_h = 10.0f;
        with_weight += vae::train_vae(ds, cond, cfg, seed, nullptr).log.back().hard;
        cfg.lambda_h = 0.0f;
        without_weight += vae::train_vae(ds, cond, cfg, seed, nullptr).log.back().hard;
    }
    CHECK(with_weight / 3.0 <= without_weight / 3.0 + 1e-9);
}
