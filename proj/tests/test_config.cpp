#include "doctest.h"

#include "geoldm/config.hpp"
#include "geoldm/manifest.hpp"

using namespace geoldm;
using config::PipelineConfig;

TEST_CASE("empty config text yields the reference defaults") {
    const auto cfg = config::parse_config_text("", "<empty>");
    CHECK(cfg.T == 1000);
    CHECK(cfg.beta1 == doctest::Approx(1e-4));
    CHECK(cfg.betaT == doctest::Approx(0.02));
    CHECK(cfg.ddim_steps == 100);
    CHECK(cfg.lambda_kl == doctest::Approx(1e-6));
    CHECK(cfg.lambda_h == doctest::Approx(10.0));
    CHECK(cfg.vae_lr == doctest::Approx(1e-4));
    CHECK(cfg.vae_batch_size == 16);
    CHECK(cfg.ldm_batch_size == 16);
    CHECK(cfg.n_ensemble == 200);
    CHECK(cfg.alphas.size() == 10);
    CHECK(cfg.alphas[0] == doctest::Approx(57.017));
    CHECK(cfg.n_total == 4000);
    CHECK(cfg.split_train == doctest::Approx(0.7));
    CHECK(cfg.nx == 64);
    CHECK(cfg.mu_w == doctest::Approx(0.31));
    CHECK(cfg.mu_o == doctest::Approx(1.09));
    CHECK(cfg.p_init == doctest::Approx(310.0));
    CHECK(cfg.bhp_inj == doctest::Approx(330.0));
    CHECK(cfg.bhp_prod == doctest::Approx(300.0));
    CHECK(cfg.t_end == doctest::Approx(2500.0));
    CHECK(cfg.max_dt == doctest::Approx(50.0));
    CHECK(cfg.obs_every == doctest::Approx(100.0));
    CHECK(cfg.obs_until == doctest::Approx(1000.0));
    CHECK(cfg.obs_rel_std == doctest::Approx(0.02));
}

TEST_CASE("out-of-range values are rejected naming the field") {
    CHECK_THROWS_WITH_AS(config::parse_config_text("[vae]\nlambda_kl = -1\n", "<t>"),
                         doctest::Contains("vae.lambda_kl"), Error);
    CHECK_THROWS_WITH_AS(config::parse_config_text("[diffusion]\nbeta1 = 0\n", "<t>"),
                         doctest::Contains("diffusion.beta1"), Error);
}

TEST_CASE("all violations are reported together") {
    try {
        config::parse_config_text("[vae]\nlambda_kl = -1\n[esmda]\nn_ensemble = 1\n", "<t>");
        FAIL("expected rejection");
    } catch (const Error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("vae.lambda_kl") != std::string::npos);
        CHECK(msg.find("esmda.n_ensemble") != std::string::npos);
    }
}

TEST_CASE("unknown keys and malformed lines are rejected") {
    CHECK_THROWS_WITH_AS(config::parse_config_text("[vae]\nnot_a_key = 3\n", "<t>"),
                         doctest::Contains("unknown key"), Error);
    CHECK_THROWS_AS(config::parse_config_text("[vae]\nlambda_kl\n", "<t>"), Error);
    CHECK_THROWS_AS(config::parse_config_text("[vae\nlambda_kl = 1\n", "<t>"), Error);
}

TEST_CASE("serialize-parse round trip is exact") {
    PipelineConfig cfg;
    cfg.seed = 987654321;
    cfg.nx = 32;
    cfg.ny = 32;
    cfg.n_total = 500;
    cfg.vae_steps = 123;
    cfg.alphas = {4.0, 4.0, 2.0};
    cfg.lambda_h = 12.5;
    cfg.out_dir = "scratch/runs";
    const std::string text = config::serialize_config(cfg);
    const auto back = config::parse_config_text(text, "<serialized>");
    CHECK(back == cfg);
    CHECK(config::serialize_config(back) == text);
}

TEST_CASE("comments and blank lines are ignored") {
    const auto cfg = config::parse_config_text(
        "# leading comment\n\n[diffusion]\nT = 500 ; trailing comment\n", "<t>");
    CHECK(cfg.T == 500);
}

TEST_CASE("run hash is stable for a config and distinguishes commands") {
    PipelineConfig cfg;
    const auto h1 = manifest::run_hash(cfg, "sample", "seed=7");
    const auto h2 = manifest::run_hash(cfg, "sample", "seed=7");
    const auto h3 = manifest::run_hash(cfg, "sample", "seed=8");
    const auto h4 = manifest::run_hash(cfg, "metrics", "seed=7");
    CHECK(h1 == h2);
    CHECK(h1 != h3);
    CHECK(h1 != h4);
    CHECK(h1.size() == 16);
}
