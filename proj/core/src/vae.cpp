#include "geoldm/vae.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

namespace geoldm::vae {

using nn::Tensor;

void VaeConfig::validate() const {
    require(grid_n >= 8 && grid_n % 8 == 0, "vae/bad-config", "grid_n must be a positive multiple of 8");
    require(base_channels >= 4, "vae/bad-config", "base_channels too small");
    require(latent_channels >= 1, "vae/bad-config", "latent_channels must be >= 1");
    require(lambda_kl >= 0.0f && lambda_h >= 0.0f, "vae/bad-config", "loss weights must be >= 0");
    require(batch_size >= 1, "vae/bad-config", "batch_size must be >= 1");
}

Tensor grids_to_tensor(std::span<const FaciesGrid> grids) {
    require(!grids.empty(), "vae/empty-batch", "no grids");
    const int nx = grids[0].nx, ny = grids[0].ny;
    Tensor t = Tensor::zeros({static_cast<int>(grids.size()), 1, ny, nx});
    auto d = t.data();
    std::size_t k = 0;
    for (const auto& g : grids) {
        require(g.nx == nx && g.ny == ny, "vae/shape-mismatch", "batch grids must share shape");
        for (auto c : g.codes) d[k++] = code_to_level(c);
    }
    return t;
}

std::vector<FaciesGrid> tensor_to_grids(const Tensor& t) {
    require(t.shape().size() == 4 && t.dim(1) == 1, "vae/shape-mismatch",
            "expected (B,1,H,W) levels");
    const int B = t.dim(0), ny = t.dim(2), nx = t.dim(3);
    std::vector<FaciesGrid> grids;
    grids.reserve(static_cast<std::size_t>(B));
    auto d = t.data();
    std::size_t k = 0;
    for (int b = 0; b < B; ++b) {
        FaciesGrid g(nx, ny);
        for (auto& c : g.codes) c = level_to_code(d[k++]);
        grids.push_back(std::move(g));
    }
    return grids;
}

Tensor hard_data_mask(const ConditioningSet& cond, int batch, int n) {
    Tensor m = Tensor::zeros({batch, 1, n, n});
    auto d = m.data();
    const std::size_t plane = static_cast<std::size_t>(n) * n;
    for (const auto& p : cond.points) {
        const std::size_t at = static_cast<std::size_t>(p.j) * n + p.i;
        for (int b = 0; b < batch; ++b) d[static_cast<std::size_t>(b) * plane + at] = 1.0f;
    }
    return m;
}

// ---------------------------------------------------------------------------
// architecture
// ---------------------------------------------------------------------------

Vae::Vae(const VaeConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(splitmix64(init_seed));
    const int c = cfg_.base_channels;
    const int c2 = 2 * c;
    const int lat = cfg_.latent_channels;

    stem_ = nn::Conv2d(params_, "enc.stem", 1, c, 3, 1, 1, rng);
    enc_res_[0] = nn::ResBlock(params_, "enc.res0", c, c, 0, rng);
    enc_down_[0] = nn::Conv2d(params_, "enc.down0", c, c, 3, 2, 1, rng);
    enc_res_[1] = nn::ResBlock(params_, "enc.res1", c, c2, 0, rng);
    enc_down_[1] = nn::Conv2d(params_, "enc.down1", c2, c2, 3, 2, 1, rng);
    enc_res_[2] = nn::ResBlock(params_, "enc.res2", c2, c2, 0, rng);
    enc_down_[2] = nn::Conv2d(params_, "enc.down2", c2, c2, 3, 2, 1, rng);
    enc_res_[3] = nn::ResBlock(params_, "enc.res3", c2, c2, 0, rng);
    enc_out_norm_ = nn::GroupNorm(params_, "enc.out_norm", c2);
    enc_out_ = nn::Conv2d(params_, "enc.out", c2, 2 * lat, 3, 1, 1, rng);

    dec_in_ = nn::Conv2d(params_, "dec.in", lat, c2, 3, 1, 1, rng);
    dec_res_[0] = nn::ResBlock(params_, "dec.res0", c2, c2, 0, rng);
    dec_up_[0] = nn::Conv2d(params_, "dec.up0", c2, c2, 3, 1, 1, rng);
    dec_res_[1] = nn::ResBlock(params_, "dec.res1", c2, c2, 0, rng);
    dec_up_[1] = nn::Conv2d(params_, "dec.up1", c2, c, 3, 1, 1, rng);
    dec_res_[2] = nn::ResBlock(params_, "dec.res2", c, c, 0, rng);
    dec_up_[2] = nn::Conv2d(params_, "dec.up2", c, c, 3, 1, 1, rng);
    dec_res_[3] = nn::ResBlock(params_, "dec.res3", c, c, 0, rng);
    dec_out_norm_ = nn::GroupNorm(params_, "dec.out_norm", c);
    dec_out_ = nn::Conv2d(params_, "dec.out", c, 1, 3, 1, 1, rng);
}

std::pair<Tensor, Tensor> Vae::encode_t(const Tensor& m) const {
    require(m.shape().size() == 4 && m.dim(2) == cfg_.grid_n && m.dim(3) == cfg_.grid_n,
            "vae/shape-mismatch",
            "encoder expects (B,1," + std::to_string(cfg_.grid_n) + "," + std::to_string(cfg_.grid_n) + ")");
    Tensor h = stem_(m);
    h = enc_res_[0](h);
    h = enc_down_[0](h);
    h = enc_res_[1](h);
    h = enc_down_[1](h);
    h = enc_res_[2](h);
    h = enc_down_[2](h);
    h = enc_res_[3](h);
    h = enc_out_(silu(enc_out_norm_(h)));
    const int lat = cfg_.latent_channels;
    Tensor mu = nn::slice_channels(h, 0, lat);
    Tensor log_var = nn::clamp(nn::slice_channels(h, lat, 2 * lat), -30.0f, 20.0f);
    return {mu, log_var};
}

Tensor Vae::decode_t(const Tensor& xi) const {
    const int n = cfg_.latent_n();
    require(xi.shape().size() == 4 && xi.dim(1) == cfg_.latent_channels && xi.dim(2) == n &&
                xi.dim(3) == n,
            "vae/shape-mismatch", "decoder expects (B," + std::to_string(cfg_.latent_channels) + "," +
                                      std::to_string(n) + "," + std::to_string(n) + ") latents");
    Tensor h = dec_in_(xi);
    h = dec_res_[0](h);
    h = dec_up_[0](nn::upsample_nearest2(h));
    h = dec_res_[1](h);
    h = dec_up_[1](nn::upsample_nearest2(h));
    h = dec_res_[2](h);
    h = dec_up_[2](nn::upsample_nearest2(h));
    h = dec_res_[3](h);
    return dec_out_(silu(dec_out_norm_(h)));
}

namespace {

LatentField plane_to_field(std::span<const float> d, int n) {
    LatentField f(n, n);
    std::copy(d.begin(), d.end(), f.v.begin());
    return f;
}

} // namespace

LatentDistribution Vae::encode(const FaciesGrid& m) const {
    auto [mu_t, lv_t] = encode_t(grids_to_tensor(std::span(&m, 1)));
    const int n = cfg_.latent_n();
    return {plane_to_field(mu_t.data(), n), plane_to_field(lv_t.data(), n)};
}

std::vector<LatentDistribution> Vae::encode_batch(std::span<const FaciesGrid> grids) const {
    auto [mu_t, lv_t] = encode_t(grids_to_tensor(grids));
    const int n = cfg_.latent_n();
    const std::size_t plane = static_cast<std::size_t>(n) * n;
    std::vector<LatentDistribution> out(grids.size());
    for (std::size_t b = 0; b < grids.size(); ++b) {
        out[b].mu = plane_to_field(mu_t.data().subspan(b * plane, plane), n);
        out[b].log_var = plane_to_field(lv_t.data().subspan(b * plane, plane), n);
    }
    return out;
}

FaciesGrid Vae::decode(const LatentField& xi) const {
    std::vector<LatentField> one{xi};
    return decode_batch(one)[0];
}

std::vector<FaciesGrid> Vae::decode_batch(std::span<const LatentField> fields) const {
    require(!fields.empty(), "vae/empty-batch", "no latents");
    const int n = cfg_.latent_n();
    Tensor xi = Tensor::zeros({static_cast<int>(fields.size()), cfg_.latent_channels, n, n});
    auto d = xi.data();
    std::size_t k = 0;
    for (const auto& f : fields) {
        require(f.nx == n && f.ny == n, "vae/shape-mismatch", "latent shape mismatch");
        for (float v : f.v) d[k++] = v;
    }
    Tensor out = nn::clamp(decode_t(xi), -1.0f, 1.0f);
    return tensor_to_grids(out);
}

LatentField sample_latent(const LatentDistribution& dist, std::uint64_t seed) {
    require(dist.mu.nx == dist.log_var.nx && dist.mu.ny == dist.log_var.ny, "vae/shape-mismatch",
            "mu / log_var shape mismatch");
    Rng rng(splitmix64(seed));
    LatentField out(dist.mu.nx, dist.mu.ny);
    for (std::size_t k = 0; k < out.v.size(); ++k) {
        const float sigma = std::exp(0.5f * dist.log_var.v[k]);
        out.v[k] = dist.mu.v[k] + sigma * rng.normal_f();
    }
    return out;
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

VaeLossReport VaeLossTensors::report(float lambda_kl, float lambda_h) const {
    VaeLossReport r;
    r.recon = recon.item();
    r.kl = kl.item();
    r.hard = hard.item();
    r.total = total.item();
    r.lambda_kl = lambda_kl;
    r.lambda_h = lambda_h;
    return r;
}

VaeLossTensors vae_loss_t(const Tensor& m, const Tensor& m_hat, const Tensor& mu,
                          const Tensor& log_var, const Tensor& hard_mask, int n_hard,
                          float lambda_kl, float lambda_h) {
    const float inv_b = 1.0f / static_cast<float>(m.dim(0));

    Tensor diff = nn::sub(m, m_hat);
    Tensor recon = nn::scale(nn::sum(nn::mul(diff, diff)), inv_b);

    // KL[N(mu, sigma^2) || N(0, I)] = 1/2 sum(mu^2 + sigma^2 - 1 - log sigma^2)
    Tensor kl_terms = nn::add_scalar(nn::sub(nn::add(nn::mul(mu, mu), nn::exp(log_var)), log_var), -1.0f);
    Tensor kl = nn::scale(nn::sum(kl_terms), 0.5f * inv_b);

    Tensor hard;
    if (n_hard > 0) {
        Tensor hd = nn::mul(diff, hard_mask);
        hard = nn::scale(nn::sum(nn::mul(hd, hd)), inv_b / static_cast<float>(n_hard));
    } else {
        hard = Tensor::zeros({1});
    }

    Tensor total = nn::add(recon, nn::add(nn::scale(kl, lambda_kl), nn::scale(hard, lambda_h)));
    return {recon, kl, hard, total};
}

VaeLossReport vae_loss(const FaciesGrid& m, const Tensor& m_hat, const LatentDistribution& dist,
                       const ConditioningSet& cond, float lambda_kl, float lambda_h) {
    cond.validate(m.nx, m.ny);
    Tensor mt = grids_to_tensor(std::span(&m, 1));
    require(m_hat.shape() == mt.shape(), "vae/shape-mismatch", "m_hat shape mismatch");
    const int ln = dist.mu.nx;
    Tensor mu = Tensor::from({1, 1, dist.mu.ny, ln}, dist.mu.v);
    Tensor lv = Tensor::from({1, 1, dist.log_var.ny, ln}, dist.log_var.v);
    Tensor mask = hard_data_mask(cond, 1, m.nx);
    return vae_loss_t(mt, m_hat, mu, lv, mask, static_cast<int>(cond.size()), lambda_kl, lambda_h)
        .report(lambda_kl, lambda_h);
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

namespace {

Tensor batch_from(const std::vector<FaciesGrid>& grids, std::span<const int> idx) {
    std::vector<FaciesGrid> sel;
    sel.reserve(idx.size());
    for (int i : idx) sel.push_back(grids[static_cast<std::size_t>(i)]);
    return grids_to_tensor(sel);
}

} // namespace

VaeTrainResult train_vae(const FaciesDataset& data, const ConditioningSet& cond,
                         const VaeConfig& cfg, std::uint64_t seed, std::ostream* progress) {
    cfg.validate();
    require(!data.train.empty(), "vae/empty-dataset", "training split is empty");
    require(data.nx == cfg.grid_n && data.ny == cfg.grid_n, "vae/shape-mismatch",
            "dataset grids do not match configured grid_n");
    cond.validate(data.nx, data.ny);

    Vae model(cfg, derive_seed(seed, "vae.init"));
    nn::Adam opt(model.params(), {.lr = cfg.lr});
    Rng rng(derive_seed(seed, "vae.batches"));
    const int n_hard = static_cast<int>(cond.size());

    // epoch shuffling
    std::vector<int> order(data.train.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size(); // trigger reshuffle on first use

    auto eval_val = [&](const std::vector<FaciesGrid>& split) {
        if (split.empty()) return 0.0;
        double total = 0.0;
        const int eval_bs = 64;
        for (std::size_t at = 0; at < split.size(); at += eval_bs) {
            const std::size_t n = std::min<std::size_t>(eval_bs, split.size() - at);
            Tensor m = grids_to_tensor(std::span(split.data() + at, n));
            auto [mu, lv] = model.encode_t(m);
            Tensor m_hat = model.decode_t(mu); // deterministic eval path
            Tensor mask = hard_data_mask(cond, static_cast<int>(n), cfg.grid_n);
            auto losses = vae_loss_t(m, m_hat, mu, lv, mask, n_hard, cfg.lambda_kl, cfg.lambda_h);
            total += losses.total.item() * static_cast<double>(n);
        }
        return total / static_cast<double>(split.size());
    };

    VaeTrainResult result;
    double best_val = std::numeric_limits<double>::infinity();
    const int bs = std::min<int>(cfg.batch_size, static_cast<int>(data.train.size()));

    for (int step = 1; step <= cfg.steps; ++step) {
        std::vector<int> idx(static_cast<std::size_t>(bs));
        for (auto& i : idx) {
            if (cursor >= order.size()) {
                for (std::size_t k = order.size() - 1; k > 0; --k)
                    std::swap(order[k], order[rng.uniform_int(0, static_cast<int>(k))]);
                cursor = 0;
            }
            i = order[cursor++];
        }
        Tensor m = batch_from(data.train, idx);
        auto [mu, lv] = model.encode_t(m);
        // reparameterized draw
        Tensor z = Tensor::zeros(mu.shape());
        for (auto& v : z.data()) v = rng.normal_f();
        Tensor xi = nn::add(mu, nn::mul(nn::exp(nn::scale(lv, 0.5f)), z));
        Tensor m_hat = model.decode_t(xi);
        Tensor mask = hard_data_mask(cond, bs, cfg.grid_n);
        auto losses = vae_loss_t(m, m_hat, mu, lv, mask, n_hard, cfg.lambda_kl, cfg.lambda_h);
        const auto rep = losses.report(cfg.lambda_kl, cfg.lambda_h);
        require(std::isfinite(rep.total), "vae/non-finite-loss",
                "total loss diverged at step " + std::to_string(step));

        model.params().zero_grad();
        losses.total.backward();
        opt.step();
        result.log.push_back({step, rep.recon, rep.kl, rep.hard, rep.total});

        if (step % cfg.val_every == 0 || step == cfg.steps) {
            const double val = data.val.empty() ? rep.total : eval_val(data.val);
            if (val < best_val) {
                best_val = val;
                result.best = model.to_checkpoint();
            }
            if (progress)
                (*progress) << "vae step " << step << " recon " << rep.recon << " kl " << rep.kl
                            << " hard " << rep.hard << " total " << rep.total << " val " << val
                            << '\n';
        }
    }
    result.best_val = best_val;
    return result;
}

nn::Checkpoint Vae::to_checkpoint() const {
    nn::Checkpoint c = nn::Checkpoint::from_params(params_);
    c.tensors.push_back({"meta.grid_n", Tensor::from({1}, {static_cast<float>(cfg_.grid_n)})});
    c.tensors.push_back(
        {"meta.base_channels", Tensor::from({1}, {static_cast<float>(cfg_.base_channels)})});
    c.tensors.push_back(
        {"meta.latent_channels", Tensor::from({1}, {static_cast<float>(cfg_.latent_channels)})});
    return c;
}

Vae Vae::from_checkpoint(const nn::Checkpoint& ckpt) {
    VaeConfig cfg;
    cfg.grid_n = static_cast<int>(ckpt.scalar("meta.grid_n"));
    cfg.base_channels = static_cast<int>(ckpt.scalar("meta.base_channels"));
    cfg.latent_channels = static_cast<int>(ckpt.scalar("meta.latent_channels"));
    Vae v(cfg, 0);
    ckpt.load_into(v.params_);
    return v;
}

void write_loss_csv(const std::filesystem::path& path, std::span<const TrainLogRow> rows) {
    std::ofstream os(path);
    require(os.good(), "vae/io", "cannot open " + path.string() + " for writing");
    os << "step,recon,kl,hard,total\n";
    for (const auto& r : rows)
        os << r.step << ',' << r.recon << ',' << r.kl << ',' << r.hard << ',' << r.total << '\n';
}

} // namespace geoldm::vae
