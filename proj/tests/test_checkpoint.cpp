#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "geoldm/checkpoint.hpp"

using namespace geoldm;
using nn::Tensor;

TEST_CASE("checkpoint round-trips parameters and optimizer state") {
    Rng rng(71);
    nn::ParamSet params;
    Tensor a = params.create("block.w", {2, 3});
    Tensor b = params.create("block.b", {3});
    for (auto& v : a.data()) v = rng.normal_f();
    for (auto& v : b.data()) v = rng.normal_f();

    nn::Adam opt(params, {.lr = 1e-3f});
    for (int s = 0; s < 3; ++s) {
        for (auto& g : a.grad()) g = rng.normal_f();
        for (auto& g : b.grad()) g = rng.normal_f();
        opt.step();
    }

    const auto ckpt = nn::Checkpoint::from_params(params, opt);
    const auto path = std::filesystem::temp_directory_path() / "geoldm_test_ckpt.bin";
    nn::save_checkpoint(path, ckpt);
    const auto back = nn::load_checkpoint(path);
    std::filesystem::remove(path);

    REQUIRE(back.tensors.size() == ckpt.tensors.size());
    REQUIRE(back.opt_tensors.size() == ckpt.opt_tensors.size());
    for (std::size_t k = 0; k < ckpt.tensors.size(); ++k) {
        CHECK(back.tensors[k].first == ckpt.tensors[k].first);
        CHECK(back.tensors[k].second.shape() == ckpt.tensors[k].second.shape());
        const auto want = ckpt.tensors[k].second.data();
        const auto got = back.tensors[k].second.data();
        for (std::size_t q = 0; q < want.size(); ++q) CHECK(got[q] == want[q]);
    }

    // load into a fresh model + optimizer and compare moments
    nn::ParamSet params2;
    params2.create("block.w", {2, 3});
    params2.create("block.b", {3});
    back.load_into(params2);
    for (std::size_t q = 0; q < a.numel(); ++q)
        CHECK(params2.at("block.w").data()[q] == a.data()[q]);

    nn::Adam opt2(params2, {.lr = 1e-3f});
    back.load_optimizer(opt2);
    CHECK(opt2.step_count() == 3);
    for (std::size_t s = 0; s < opt2.slots().size(); ++s) {
        for (std::size_t q = 0; q < opt2.slots()[s].m.size(); ++q) {
            CHECK(opt2.slots()[s].m[q] == opt.slots()[s].m[q]);
            CHECK(opt2.slots()[s].v[q] == opt.slots()[s].v[q]);
        }
    }
}

TEST_CASE("checkpoint load reports missing and mismatched tensors") {
    nn::Checkpoint ckpt;
    ckpt.tensors.push_back({"w", Tensor::zeros({2, 2})});
    nn::ParamSet want_missing;
    want_missing.create("other", {2, 2});
    CHECK_THROWS_AS(ckpt.load_into(want_missing), Error);
    nn::ParamSet want_shape;
    want_shape.create("w", {4});
    CHECK_THROWS_AS(ckpt.load_into(want_shape), Error);
}

TEST_CASE("checkpoint rejects foreign files") {
    const auto path = std::filesystem::temp_directory_path() / "geoldm_test_notckpt.bin";
    {
        std::ofstream os(path, std::ios::binary);
        os << "not a checkpoint";
    }
    CHECK_THROWS_AS((void)nn::load_checkpoint(path), Error);
    std::filesystem::remove(path);
}
