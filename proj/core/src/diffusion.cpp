#include "geoldm/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

namespace geoldm::diffusion {

using nn::Tensor;
using vae::LatentField;

SchedulerTable make_linear_schedule(int T, double beta1, double betaT) {
    require(T >= 1, "diffusion/bad-schedule", "T must be >= 1");
    require(beta1 > 0.0 && beta1 <= betaT && betaT < 1.0, "diffusion/bad-schedule",
            "need 0 < beta1 <= betaT < 1");
    SchedulerTable s;
    s.T = T;
    s.beta.resize(static_cast<std::size_t>(T));
    s.alpha.resize(static_cast<std::size_t>(T));
    s.alpha_bar.resize(static_cast<std::size_t>(T));
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double b =
            (T == 1) ? beta1 : beta1 + (betaT - beta1) * static_cast<double>(t - 1) / (T - 1);
        s.beta[static_cast<std::size_t>(t - 1)] = b;
        s.alpha[static_cast<std::size_t>(t - 1)] = 1.0 - b;
        prod *= 1.0 - b;
        s.alpha_bar[static_cast<std::size_t>(t - 1)] = prod;
    }
    return s;
}

namespace {

void check_same_dims(const LatentField& a, const LatentField& b, const char* what) {
    require(a.nx == b.nx && a.ny == b.ny, "diffusion/shape-mismatch",
            std::string(what) + ": latent shape mismatch");
}

} // namespace

LatentField forward_noise(const LatentField& x0, int t, const LatentField& eps,
                          const SchedulerTable& sched) {
    require(t >= 1 && t <= sched.T, "diffusion/t-range",
            "t = " + std::to_string(t) + " outside 1.." + std::to_string(sched.T));
    check_same_dims(x0, eps, "forward_noise");
    const double ab = sched.a_bar(t);
    const float c0 = static_cast<float>(std::sqrt(ab));
    const float ce = static_cast<float>(std::sqrt(1.0 - ab));
    LatentField out(x0.nx, x0.ny);
    for (std::size_t k = 0; k < out.v.size(); ++k) out.v[k] = c0 * x0.v[k] + ce * eps.v[k];
    return out;
}

LatentField ddpm_sample_step(const LatentField& x, int t, const EpsFn& eps_fn,
                             const SchedulerTable& sched, const LatentField& z) {
    require(t >= 1 && t <= sched.T, "diffusion/t-range", "ddpm step t out of range");
    check_same_dims(x, z, "ddpm_sample_step");
    const LatentField eps = eps_fn(x, t);
    check_same_dims(x, eps, "ddpm_sample_step eps");
    const double alpha = sched.alpha_at(t);
    const double ab = sched.a_bar(t);
    const float inv_sqrt_a = static_cast<float>(1.0 / std::sqrt(alpha));
    const float eps_coef = static_cast<float>((1.0 - alpha) / std::sqrt(1.0 - ab));
    const float sigma = static_cast<float>(std::sqrt(sched.beta_at(t)));
    LatentField out(x.nx, x.ny);
    for (std::size_t k = 0; k < out.v.size(); ++k)
        out.v[k] = inv_sqrt_a * (x.v[k] - eps_coef * eps.v[k]) + sigma * z.v[k];
    return out;
}

LatentField ddim_sample_step(const LatentField& x, int t, int t_prev, const EpsFn& eps_fn,
                             const SchedulerTable& sched) {
    require(t >= 1 && t <= sched.T, "diffusion/t-range", "ddim step t out of range");
    require(t_prev >= 0 && t_prev < t, "diffusion/t-range", "ddim t_prev must be in [0, t)");
    const LatentField eps = eps_fn(x, t);
    check_same_dims(x, eps, "ddim_sample_step eps");
    const double ab_t = sched.a_bar(t);
    const double ab_p = sched.a_bar(t_prev);
    const float c_x0 = static_cast<float>(std::sqrt(ab_p / ab_t));
    const float c_eps =
        static_cast<float>(std::sqrt(1.0 - ab_p) - std::sqrt(ab_p / ab_t) * std::sqrt(1.0 - ab_t));
    LatentField out(x.nx, x.ny);
    for (std::size_t k = 0; k < out.v.size(); ++k) out.v[k] = c_x0 * x.v[k] + c_eps * eps.v[k];
    return out;
}

std::vector<int> ddim_substep_schedule(int T, int n_steps) {
    require(n_steps >= 1 && n_steps <= T, "diffusion/bad-substeps",
            "n_steps must be in 1..T");
    std::vector<int> ts(static_cast<std::size_t>(n_steps));
    if (n_steps == 1) {
        ts[0] = 1;
        return ts;
    }
    const double gap = static_cast<double>(T - 1) / (n_steps - 1);
    for (int k = 0; k < n_steps; ++k)
        ts[static_cast<std::size_t>(k)] = 1 + static_cast<int>(std::floor((n_steps - 1 - k) * gap + 0.5));
    for (int k = 1; k < n_steps; ++k)
        require(ts[static_cast<std::size_t>(k)] < ts[static_cast<std::size_t>(k - 1)],
                "diffusion/bad-substeps", "substep schedule not strictly decreasing");
    return ts;
}

LatentField interpolate_latents(const LatentField& xi1, const LatentField& xi2, double delta) {
    require(delta >= 0.0 && delta <= 1.0, "diffusion/bad-delta", "delta must be in [0, 1]");
    check_same_dims(xi1, xi2, "interpolate_latents");
    LatentField out(xi1.nx, xi1.ny);
    const float d = static_cast<float>(delta);
    for (std::size_t k = 0; k < out.v.size(); ++k)
        out.v[k] = xi1.v[k] * (1.0f - d) + xi2.v[k] * d;
    return out;
}

// ---------------------------------------------------------------------------
// denoiser
// ---------------------------------------------------------------------------

void UNetConfig::validate() const {
    require(latent_n >= 1, "diffusion/bad-config", "latent_n must be >= 1");
    require(latent_channels >= 1, "diffusion/bad-config", "latent_channels must be >= 1");
    require(base_channels >= 4, "diffusion/bad-config", "base_channels too small");
    require(emb_dim >= 2 && emb_dim % 2 == 0, "diffusion/bad-config", "emb_dim must be even");
}

DenoiserNet::DenoiserNet(const UNetConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(splitmix64(init_seed));
    const int c1 = cfg_.base_channels;
    const int c2 = 2 * c1;
    const int e = cfg_.emb_dim;

    emb_fc1_ = nn::Linear(params_, "emb.fc1", e, e, rng);
    emb_fc2_ = nn::Linear(params_, "emb.fc2", e, e, rng);
    stem_ = nn::Conv2d(params_, "stem", cfg_.latent_channels, c1, 3, 1, 1, rng);
    down1_ = nn::ResBlock(params_, "down1", c1, c1, e, rng);
    down2_ = nn::ResBlock(params_, "down2", c1, c2, e, rng);
    mid1_ = nn::ResBlock(params_, "mid1", c2, c2, e, rng);
    attn_ = nn::SelfAttention(params_, "mid_attn", c2, rng);
    mid2_ = nn::ResBlock(params_, "mid2", c2, c2, e, rng);
    up2_ = nn::ResBlock(params_, "up2", c2 + c2, c2, e, rng);
    up1_ = nn::ResBlock(params_, "up1", c2 + c1, c1, e, rng);
    head_norm_ = nn::GroupNorm(params_, "head_norm", c1);
    head_ = nn::Conv2d(params_, "head", c1, cfg_.latent_channels, 3, 1, 1, rng, /*zero_init=*/true);
}

Tensor DenoiserNet::forward(const Tensor& x, const std::vector<int>& t) const {
    require(x.shape().size() == 4 && x.dim(1) == cfg_.latent_channels &&
                x.dim(2) == cfg_.latent_n && x.dim(3) == cfg_.latent_n,
            "diffusion/shape-mismatch", "denoiser input shape mismatch");
    require(static_cast<int>(t.size()) == x.dim(0), "diffusion/shape-mismatch",
            "timestep count must match batch");
    Tensor emb = nn::timestep_embedding(t, cfg_.emb_dim);
    emb = emb_fc2_(nn::silu(emb_fc1_(emb)));

    Tensor h0 = stem_(x);
    Tensor h1 = down1_(h0, emb);
    Tensor h2 = down2_(h1, emb);
    Tensor m = mid2_(attn_(mid1_(h2, emb)), emb);
    Tensor u2 = up2_(nn::concat_channels(m, h2), emb);
    Tensor u1 = up1_(nn::concat_channels(u2, h1), emb);
    return head_(nn::silu(head_norm_(u1)));
}

LatentField DenoiserNet::predict(const LatentField& x, int t) const {
    return predict_batch(std::span(&x, 1), t)[0];
}

std::vector<LatentField> DenoiserNet::predict_batch(std::span<const LatentField> x, int t) const {
    require(!x.empty(), "diffusion/empty-batch", "no latents");
    const int n = cfg_.latent_n;
    Tensor xt = Tensor::zeros({static_cast<int>(x.size()), cfg_.latent_channels, n, n});
    auto d = xt.data();
    std::size_t k = 0;
    for (const auto& f : x) {
        require(f.nx == n && f.ny == n, "diffusion/shape-mismatch", "latent shape mismatch");
        for (float v : f.v) d[k++] = v;
    }
    Tensor out = forward(xt, std::vector<int>(x.size(), t));
    std::vector<LatentField> fields(x.size(), LatentField(n, n));
    auto o = out.data();
    k = 0;
    for (auto& f : fields)
        for (auto& v : f.v) v = o[k++];
    return fields;
}

// ---------------------------------------------------------------------------
// training loss
// ---------------------------------------------------------------------------

Tensor ddpm_loss_t(const DenoiserNet& net, std::span<const LatentField> xi0,
                   const SchedulerTable& sched, std::uint64_t seed) {
    require(!xi0.empty(), "diffusion/empty-batch", "ddpm loss needs a nonempty batch");
    const int n = net.config().latent_n;
    const int B = static_cast<int>(xi0.size());
    Rng rng(splitmix64(seed));

    Tensor xt = Tensor::zeros({B, net.config().latent_channels, n, n});
    Tensor target = Tensor::zeros(xt.shape());
    std::vector<int> ts(static_cast<std::size_t>(B));
    auto xd = xt.data();
    auto ed = target.data();
    const std::size_t plane = static_cast<std::size_t>(n) * n;
    for (int b = 0; b < B; ++b) {
        const auto& f = xi0[static_cast<std::size_t>(b)];
        require(f.nx == n && f.ny == n, "diffusion/shape-mismatch", "latent shape mismatch");
        const int t = rng.uniform_int(1, sched.T);
        ts[static_cast<std::size_t>(b)] = t;
        const double ab = sched.a_bar(t);
        const float c0 = static_cast<float>(std::sqrt(ab));
        const float ce = static_cast<float>(std::sqrt(1.0 - ab));
        for (std::size_t k = 0; k < plane; ++k) {
            const float eps = rng.normal_f();
            ed[static_cast<std::size_t>(b) * plane + k] = eps;
            xd[static_cast<std::size_t>(b) * plane + k] = c0 * f.v[k] + ce * eps;
        }
    }
    Tensor pred = net.forward(xt, ts);
    Tensor diff = nn::sub(target, pred);
    Tensor loss = nn::scale(nn::sum(nn::mul(diff, diff)), 1.0f / static_cast<float>(B));
    require(std::isfinite(loss.item()), "diffusion/non-finite-loss", "ddpm loss not finite");
    return loss;
}

double ddpm_loss(const DenoiserNet& net, std::span<const LatentField> xi0,
                 const SchedulerTable& sched, std::uint64_t seed) {
    return ddpm_loss_t(net, xi0, sched, seed).item();
}

// ---------------------------------------------------------------------------
// trained model
// ---------------------------------------------------------------------------

LdmModel::LdmModel(vae::Vae vae, DenoiserNet net, SchedulerTable sched, int ddim_steps)
    : vae_(std::move(vae)), net_(std::move(net)), sched_(std::move(sched)), ddim_steps_(ddim_steps) {
    require(net_.config().latent_n == vae_.config().latent_n(), "diffusion/shape-mismatch",
            "denoiser and VAE latent sizes disagree");
    require(ddim_steps_ >= 1 && ddim_steps_ <= sched_.T, "diffusion/bad-substeps",
            "default DDIM step count out of range");
}

LatentField LdmModel::denoise(const LatentField& xi_T, int n_steps) const {
    if (n_steps == 0) n_steps = ddim_steps_;
    const auto ts = ddim_substep_schedule(sched_.T, n_steps);
    LatentField x = xi_T;
    for (std::size_t k = 0; k < ts.size(); ++k) {
        const int t = ts[k];
        const int t_prev = (k + 1 < ts.size()) ? ts[k + 1] : 0;
        x = ddim_sample_step(
            x, t, t_prev, [this](const LatentField& f, int tt) { return net_.predict(f, tt); },
            sched_);
    }
    return x;
}

FaciesGrid LdmModel::generate(const LatentField& xi_T, int n_steps) const {
    return vae_.decode(denoise(xi_T, n_steps));
}

std::vector<FaciesGrid> LdmModel::generate_batch(std::span<const LatentField> xi_T,
                                                 int n_steps) const {
    require(!xi_T.empty(), "diffusion/empty-batch", "no latents");
    if (n_steps == 0) n_steps = ddim_steps_;
    const auto ts = ddim_substep_schedule(sched_.T, n_steps);
    std::vector<LatentField> x(xi_T.begin(), xi_T.end());
    for (std::size_t k = 0; k < ts.size(); ++k) {
        const int t = ts[k];
        const int t_prev = (k + 1 < ts.size()) ? ts[k + 1] : 0;
        const auto eps = net_.predict_batch(x, t);
        const double ab_t = sched_.a_bar(t);
        const double ab_p = sched_.a_bar(t_prev);
        const float c_x = static_cast<float>(std::sqrt(ab_p / ab_t));
        const float c_e = static_cast<float>(std::sqrt(1.0 - ab_p) -
                                             std::sqrt(ab_p / ab_t) * std::sqrt(1.0 - ab_t));
        for (std::size_t m = 0; m < x.size(); ++m)
            for (std::size_t q = 0; q < x[m].v.size(); ++q)
                x[m].v[q] = c_x * x[m].v[q] + c_e * eps[m].v[q];
    }
    return vae_.decode_batch(x);
}

nn::Checkpoint LdmModel::to_checkpoint() const {
    nn::Checkpoint c;
    for (const auto& [name, t] : vae_.params().entries()) c.tensors.push_back({"vae." + name, t.detach()});
    for (const auto& [name, t] : net_.params().entries())
        c.tensors.push_back({"unet." + name, t.detach()});
    auto scalar = [](float v) { return Tensor::from({1}, {v}); };
    c.tensors.push_back({"meta.grid_n", scalar(static_cast<float>(vae_.config().grid_n))});
    c.tensors.push_back(
        {"meta.vae_base_channels", scalar(static_cast<float>(vae_.config().base_channels))});
    c.tensors.push_back(
        {"meta.latent_channels", scalar(static_cast<float>(vae_.config().latent_channels))});
    c.tensors.push_back(
        {"meta.unet_base_channels", scalar(static_cast<float>(net_.config().base_channels))});
    c.tensors.push_back({"meta.emb_dim", scalar(static_cast<float>(net_.config().emb_dim))});
    c.tensors.push_back({"meta.T", scalar(static_cast<float>(sched_.T))});
    c.tensors.push_back({"meta.beta1", scalar(static_cast<float>(sched_.beta.front()))});
    c.tensors.push_back({"meta.betaT", scalar(static_cast<float>(sched_.beta.back()))});
    c.tensors.push_back({"meta.ddim_steps", scalar(static_cast<float>(ddim_steps_))});
    return c;
}

namespace {

nn::Checkpoint strip_prefix(const nn::Checkpoint& ckpt, const std::string& prefix) {
    nn::Checkpoint out;
    for (const auto& [name, t] : ckpt.tensors)
        if (name.rfind(prefix, 0) == 0) out.tensors.push_back({name.substr(prefix.size()), t});
    return out;
}

} // namespace

LdmModel LdmModel::from_checkpoint(const nn::Checkpoint& ckpt) {
    vae::VaeConfig vcfg;
    vcfg.grid_n = static_cast<int>(ckpt.scalar("meta.grid_n"));
    vcfg.base_channels = static_cast<int>(ckpt.scalar("meta.vae_base_channels"));
    vcfg.latent_channels = static_cast<int>(ckpt.scalar("meta.latent_channels"));
    vae::Vae v(vcfg, 0);
    strip_prefix(ckpt, "vae.").load_into(v.params());

    UNetConfig ucfg;
    ucfg.latent_n = vcfg.latent_n();
    ucfg.latent_channels = vcfg.latent_channels;
    ucfg.base_channels = static_cast<int>(ckpt.scalar("meta.unet_base_channels"));
    ucfg.emb_dim = static_cast<int>(ckpt.scalar("meta.emb_dim"));
    DenoiserNet net(ucfg, 0);
    strip_prefix(ckpt, "unet.").load_into(net.params());

    SchedulerTable sched = make_linear_schedule(static_cast<int>(ckpt.scalar("meta.T")),
                                                ckpt.scalar("meta.beta1"), ckpt.scalar("meta.betaT"));
    return LdmModel(std::move(v), std::move(net), std::move(sched),
                    static_cast<int>(ckpt.scalar("meta.ddim_steps")));
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

LdmTrainResult train_ldm(const nn::Checkpoint& vae_ckpt, const FaciesDataset& data,
                         const LdmConfig& cfg, std::uint64_t seed, std::ostream* progress) {
    require(!data.train.empty(), "diffusion/empty-dataset", "training split is empty");
    vae::Vae v = vae::Vae::from_checkpoint(vae_ckpt);
    require(data.nx == v.config().grid_n && data.ny == v.config().grid_n, "diffusion/shape-mismatch",
            "dataset grids do not match the VAE");

    // Encoder means as the clean latents (deterministic targets).
    auto encode_all = [&](const std::vector<FaciesGrid>& grids) {
        std::vector<LatentField> out;
        out.reserve(grids.size());
        const std::size_t bs = 64;
        for (std::size_t at = 0; at < grids.size(); at += bs) {
            const std::size_t n = std::min(bs, grids.size() - at);
            auto dists = v.encode_batch(std::span(grids.data() + at, n));
            for (auto& d : dists) out.push_back(std::move(d.mu));
        }
        return out;
    };
    const std::vector<LatentField> train_lat = encode_all(data.train);
    const std::vector<LatentField> val_lat = encode_all(data.val);

    UNetConfig ucfg;
    ucfg.latent_n = v.config().latent_n();
    ucfg.latent_channels = v.config().latent_channels;
    ucfg.base_channels = cfg.unet_base_channels;
    ucfg.emb_dim = cfg.emb_dim;
    DenoiserNet net(ucfg, derive_seed(seed, "ldm.init"));
    nn::Adam opt(net.params(), {.lr = cfg.lr});
    SchedulerTable sched = make_linear_schedule(cfg.T, cfg.beta1, cfg.betaT);

    Rng rng(derive_seed(seed, "ldm.batches"));
    std::vector<int> order(train_lat.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    const int bs = std::min<int>(cfg.batch_size, static_cast<int>(train_lat.size()));
    const std::uint64_t loss_root = derive_seed(seed, "ldm.loss");
    const std::uint64_t val_seed = derive_seed(seed, "ldm.val");

    LdmTrainResult result;
    double best_val = std::numeric_limits<double>::infinity();

    for (int step = 1; step <= cfg.steps; ++step) {
        std::vector<LatentField> batch(static_cast<std::size_t>(bs));
        for (auto& f : batch) {
            if (cursor >= order.size()) {
                for (std::size_t k = order.size() - 1; k > 0; --k)
                    std::swap(order[k], order[rng.uniform_int(0, static_cast<int>(k))]);
                cursor = 0;
            }
            f = train_lat[static_cast<std::size_t>(order[cursor++])];
        }
        Tensor loss = ddpm_loss_t(net, batch, sched, derive_seed(loss_root, static_cast<std::uint64_t>(step)));
        const double lv = loss.item();
        net.params().zero_grad();
        loss.backward();
        opt.step();
        result.log.push_back({step, lv, 0.0, 0.0, lv});

        if (step % cfg.val_every == 0 || step == cfg.steps) {
            double val = lv;
            if (!val_lat.empty()) {
                val = 0.0;
                const std::size_t vb = 64;
                for (std::size_t at = 0; at < val_lat.size(); at += vb) {
                    const std::size_t n = std::min(vb, val_lat.size() - at);
                    val += ddpm_loss(net, std::span(val_lat.data() + at, n), sched,
                                     derive_seed(val_seed, at)) *
                           static_cast<double>(n);
                }
                val /= static_cast<double>(val_lat.size());
            }
            if (val < best_val) {
                best_val = val;
                LdmModel model(v, net, sched, cfg.ddim_steps);
                result.best = model.to_checkpoint();
            }
            if (progress)
                (*progress) << "ldm step " << step << " loss " << lv << " val " << val << '\n';
        }
    }
    result.best_val = best_val;
    return result;
}

} // namespace geoldm::diffusion
