#include "geoldm/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace geoldm::config {

geogen::ChannelStyle PipelineConfig::channel_style() const {
    geogen::ChannelStyle s;
    s.n_channels = {n_channels_min, n_channels_max};
    s.width = {width_min, width_max};
    s.sinuosity_amplitude = {amplitude_min, amplitude_max};
    s.sinuosity_wavelength = {wavelength_min, wavelength_max};
    s.orientation = {orientation_min, orientation_max};
    s.levee_halfwidth = {levee_halfwidth_min, levee_halfwidth_max};
    s.retry_budget = retry_budget;
    return s;
}

namespace {

struct Field {
    std::string section, key;
    std::function<std::string(const PipelineConfig&)> get;
    std::function<bool(PipelineConfig&, const std::string&)> set; // false = parse failure
    std::function<std::string(const PipelineConfig&)> check;     // empty = ok
};

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

bool to_double(const std::string& s, double& out) {
    try {
        std::size_t pos = 0;
        out = std::stod(s, &pos);
        while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
        return pos == s.size();
    } catch (...) {
        return false;
    }
}

bool to_int(const std::string& s, int& out) {
    double d;
    if (!to_double(s, d)) return false;
    if (d != std::floor(d) || d < -2e9 || d > 2e9) return false;
    out = static_cast<int>(d);
    return true;
}

bool to_u64(const std::string& s, std::uint64_t& out) {
    try {
        std::size_t pos = 0;
        out = std::stoull(s, &pos);
        return pos == s.size();
    } catch (...) {
        return false;
    }
}

#define FIELD_DOUBLE(sec, name, member, cond, what)                                              \
    fields.push_back({sec, name, [](const PipelineConfig& c) { return fmt_double(c.member); },   \
                      [](PipelineConfig& c, const std::string& v) { return to_double(v, c.member); }, \
                      [](const PipelineConfig& c) -> std::string {                               \
                          const auto& val = c.member;                                            \
                          (void)val;                                                             \
                          return (cond) ? "" : std::string(sec) + "." + name + ": " + what;      \
                      }})

#define FIELD_INT(sec, name, member, cond, what)                                                 \
    fields.push_back({sec, name, [](const PipelineConfig& c) { return std::to_string(c.member); }, \
                      [](PipelineConfig& c, const std::string& v) { return to_int(v, c.member); }, \
                      [](const PipelineConfig& c) -> std::string {                               \
                          const auto& val = c.member;                                            \
                          (void)val;                                                             \
                          return (cond) ? "" : std::string(sec) + "." + name + ": " + what;      \
                      }})

std::vector<Field> config_fields() {
    std::vector<Field> fields;

    fields.push_back({"global", "seed",
                      [](const PipelineConfig& c) { return std::to_string(c.seed); },
                      [](PipelineConfig& c, const std::string& v) { return to_u64(v, c.seed); },
                      [](const PipelineConfig&) { return std::string(); }});
    fields.push_back({"global", "out_dir", [](const PipelineConfig& c) { return c.out_dir; },
                      [](PipelineConfig& c, const std::string& v) {
                          c.out_dir = v;
                          return true;
                      },
                      [](const PipelineConfig& c) {
                          return c.out_dir.empty() ? "global.out_dir: must not be empty" : "";
                      }});
    FIELD_INT("global", "workers", workers, val >= 0, "must be >= 0");
    fields.push_back({"global", "conditioning_file",
                      [](const PipelineConfig& c) { return c.conditioning_file; },
                      [](PipelineConfig& c, const std::string& v) {
                          c.conditioning_file = v;
                          return true;
                      },
                      [](const PipelineConfig&) { return std::string(); }});

    FIELD_INT("geogen", "nx", nx, val >= 8 && val % 8 == 0, "must be a multiple of 8, >= 8");
    FIELD_INT("geogen", "ny", ny, val >= 8 && val % 8 == 0, "must be a multiple of 8, >= 8");
    FIELD_INT("geogen", "n_channels_min", n_channels_min, val >= 0, "must be >= 0");
    FIELD_INT("geogen", "n_channels_max", n_channels_max, val >= c.n_channels_min,
              "must be >= n_channels_min");
    FIELD_DOUBLE("geogen", "width_min", width_min, val >= 1.0, "must be >= 1 cell");
    FIELD_DOUBLE("geogen", "width_max", width_max, val >= c.width_min, "must be >= width_min");
    FIELD_DOUBLE("geogen", "amplitude_min", amplitude_min, val >= 0.0, "must be >= 0");
    FIELD_DOUBLE("geogen", "amplitude_max", amplitude_max, val >= c.amplitude_min,
                 "must be >= amplitude_min");
    FIELD_DOUBLE("geogen", "wavelength_min", wavelength_min, val >= 1.0, "must be >= 1 cell");
    FIELD_DOUBLE("geogen", "wavelength_max", wavelength_max, val >= c.wavelength_min,
                 "must be >= wavelength_min");
    FIELD_DOUBLE("geogen", "orientation_min", orientation_min, val >= -M_PI && val <= M_PI,
                 "must be in [-pi, pi]");
    FIELD_DOUBLE("geogen", "orientation_max", orientation_max,
                 val >= c.orientation_min && val <= M_PI, "must be in [orientation_min, pi]");
    FIELD_DOUBLE("geogen", "levee_halfwidth_min", levee_halfwidth_min, val >= 0.0, "must be >= 0");
    FIELD_DOUBLE("geogen", "levee_halfwidth_max", levee_halfwidth_max,
                 val >= c.levee_halfwidth_min, "must be >= levee_halfwidth_min");
    FIELD_INT("geogen", "retry_budget", retry_budget, val >= 1, "must be >= 1");
    FIELD_INT("geogen", "n_total", n_total, val >= 10, "must be >= 10");
    FIELD_DOUBLE("geogen", "split_train", split_train, val >= 0.0 && val <= 1.0, "must be in [0,1]");
    FIELD_DOUBLE("geogen", "split_val", split_val, val >= 0.0 && val <= 1.0, "must be in [0,1]");
    FIELD_DOUBLE("geogen", "split_test", split_test,
                 val >= 0.0 && val <= 1.0 &&
                     std::abs(c.split_train + c.split_val + c.split_test - 1.0) <= 1e-9,
                 "split fractions must lie in [0,1] and sum to 1");

    FIELD_INT("vae", "base_channels", vae_base_channels, val >= 4, "must be >= 4");
    FIELD_INT("vae", "latent_channels", latent_channels, val >= 1, "must be >= 1");
    FIELD_DOUBLE("vae", "lambda_kl", lambda_kl, val >= 0.0, "must be >= 0");
    FIELD_DOUBLE("vae", "lambda_h", lambda_h, val >= 0.0, "must be >= 0");
    FIELD_DOUBLE("vae", "lr", vae_lr, val > 0.0, "must be > 0");
    FIELD_INT("vae", "batch_size", vae_batch_size, val >= 1, "must be >= 1");
    FIELD_INT("vae", "steps", vae_steps, val >= 1, "must be >= 1");
    FIELD_INT("vae", "val_every", vae_val_every, val >= 1, "must be >= 1");

    FIELD_INT("diffusion", "T", T, val >= 1, "must be >= 1");
    FIELD_DOUBLE("diffusion", "beta1", beta1, val > 0.0 && val < 1.0, "must be in (0,1)");
    FIELD_DOUBLE("diffusion", "betaT", betaT, val >= c.beta1 && val < 1.0,
                 "must be in [beta1, 1)");
    FIELD_INT("diffusion", "ddim_steps", ddim_steps, val >= 1 && val <= c.T, "must be in 1..T");
    FIELD_INT("diffusion", "unet_base_channels", unet_base_channels, val >= 4, "must be >= 4");
    FIELD_INT("diffusion", "emb_dim", emb_dim, val >= 2 && val % 2 == 0, "must be even, >= 2");
    FIELD_DOUBLE("diffusion", "lr", ldm_lr, val > 0.0, "must be > 0");
    FIELD_INT("diffusion", "batch_size", ldm_batch_size, val >= 1, "must be >= 1");
    FIELD_INT("diffusion", "steps", ldm_steps, val >= 1, "must be >= 1");
    FIELD_INT("diffusion", "val_every", ldm_val_every, val >= 1, "must be >= 1");

    FIELD_DOUBLE("flowsim", "phi_mud", phi_mud, val > 0.0 && val < 1.0, "must be in (0,1)");
    FIELD_DOUBLE("flowsim", "phi_levee", phi_levee, val > 0.0 && val < 1.0, "must be in (0,1)");
    FIELD_DOUBLE("flowsim", "phi_channel", phi_channel, val > 0.0 && val < 1.0, "must be in (0,1)");
    FIELD_DOUBLE("flowsim", "k_mud", k_mud, val > 0.0, "must be > 0");
    FIELD_DOUBLE("flowsim", "k_levee", k_levee, val > 0.0, "must be > 0");
    FIELD_DOUBLE("flowsim", "k_channel", k_channel, val > 0.0, "must be > 0");
    FIELD_DOUBLE("flowsim", "mu_w", mu_w, val > 0.0, "must be > 0");
    FIELD_DOUBLE("flowsim", "mu_o", mu_o, val > 0.0, "must be > 0");
    FIELD_DOUBLE("flowsim", "swc", swc, val >= 0.0 && val < 1.0, "must be in [0,1)");
    FIELD_DOUBLE("flowsim", "sor", sor, val >= 0.0 && c.swc < 1.0 - val, "needs Swc < 1 - Sor");
    FIELD_DOUBLE("flowsim", "krw_end", krw_end, val > 0.0, "must be > 0");
    FIELD_DOUBLE("flowsim", "kro_end", kro_end, val > 0.0, "must be > 0");
    FIELD_DOUBLE("flowsim", "corey_nw", corey_nw, val >= 1.0, "must be >= 1");
    FIELD_DOUBLE("flowsim", "corey_no", corey_no, val >= 1.0, "must be >= 1");
    FIELD_DOUBLE("flowsim", "sw_init", sw_init, val >= c.swc && val <= 1.0 - c.sor,
                 "must lie in the mobile range");
    FIELD_DOUBLE("flowsim", "p_init", p_init, val > 0.0, "must be > 0");
    FIELD_DOUBLE("flowsim", "c_w", c_w, val >= 0.0, "must be >= 0");
    FIELD_DOUBLE("flowsim", "c_o", c_o, val >= 0.0, "must be >= 0");
    FIELD_DOUBLE("flowsim", "bhp_inj", bhp_inj, val > c.p_init, "must exceed initial pressure");
    FIELD_DOUBLE("flowsim", "bhp_prod", bhp_prod, val > 0.0 && val < c.p_init,
                 "must be below initial pressure");
    FIELD_DOUBLE("flowsim", "cell_dx", cell_dx, val > 0.0, "must be > 0");
    FIELD_DOUBLE("flowsim", "cell_dy", cell_dy, val > 0.0, "must be > 0");
    FIELD_DOUBLE("flowsim", "cell_dz", cell_dz, val > 0.0, "must be > 0");
    FIELD_DOUBLE("flowsim", "t_end", t_end, val > 0.0, "must be > 0");
    FIELD_DOUBLE("flowsim", "max_dt", max_dt, val > 0.0, "must be > 0");
    FIELD_DOUBLE("flowsim", "report_every", report_every, val > 0.0, "must be > 0");

    FIELD_INT("esmda", "case", hm_case, val == 1 || val == 2, "must be 1 or 2");
    FIELD_INT("esmda", "n_ensemble", n_ensemble, val >= 2, "must be >= 2");
    fields.push_back(
        {"esmda", "alphas",
         [](const PipelineConfig& c) {
             std::string s;
             for (std::size_t k = 0; k < c.alphas.size(); ++k)
                 s += (k ? "," : "") + fmt_double(c.alphas[k]);
             return s;
         },
         [](PipelineConfig& c, const std::string& v) {
             std::vector<double> vals;
             std::stringstream ss(v);
             std::string item;
             while (std::getline(ss, item, ',')) {
                 double d;
                 if (!to_double(item, d)) return false;
                 vals.push_back(d);
             }
             if (vals.empty()) return false;
             c.alphas = std::move(vals);
             return true;
         },
         [](const PipelineConfig& c) -> std::string {
             double inv = 0.0;
             for (double a : c.alphas) {
                 if (a <= 0.0) return "esmda.alphas: inflation factors must be positive";
                 inv += 1.0 / a;
             }
             if (std::abs(inv - 1.0) > 1e-3)
                 return "esmda.alphas: sum of inverses is " + fmt_double(inv) + ", must be 1";
             return "";
         }});
    FIELD_DOUBLE("esmda", "obs_every", obs_every, val > 0.0, "must be > 0");
    FIELD_DOUBLE("esmda", "obs_until", obs_until, val >= 0.0, "must be >= 0");
    FIELD_DOUBLE("esmda", "obs_rel_std", obs_rel_std, val > 0.0, "must be > 0");

    return fields;
}

#undef FIELD_DOUBLE
#undef FIELD_INT

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

} // namespace

PipelineConfig parse_config_text(const std::string& text, const std::string& origin) {
    const auto fields = config_fields();
    std::map<std::string, const Field*> by_name;
    for (const auto& f : fields) by_name[f.section + "." + f.key] = &f;

    PipelineConfig cfg;
    std::vector<std::string> problems;
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto comment = line.find_first_of("#;");
        if (comment != std::string::npos) line.erase(comment);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                problems.push_back(origin + ":" + std::to_string(lineno) + ": malformed section header");
                continue;
            }
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            problems.push_back(origin + ":" + std::to_string(lineno) + ": expected key = value");
            continue;
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const auto it = by_name.find(section + "." + key);
        if (it == by_name.end()) {
            problems.push_back(origin + ":" + std::to_string(lineno) + ": unknown key '" + section +
                               "." + key + "'");
            continue;
        }
        if (!it->second->set(cfg, value))
            problems.push_back(origin + ":" + std::to_string(lineno) + ": cannot parse value '" +
                               value + "' for " + section + "." + key);
    }

    for (const auto& f : fields) {
        const std::string msg = f.check(cfg);
        if (!msg.empty()) problems.push_back(origin + ": " + msg);
    }
    if (!problems.empty()) {
        std::string all;
        for (const auto& p : problems) all += (all.empty() ? "" : "\n") + p;
        throw Error("config/invalid", all);
    }
    return cfg;
}

PipelineConfig parse_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    require(is.good(), "config/io", "cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_config_text(ss.str(), path.string());
}

std::string serialize_config(const PipelineConfig& cfg) {
    const auto fields = config_fields();
    std::string out;
    std::string section;
    for (const auto& f : fields) {
        if (f.section != section) {
            if (!out.empty()) out += "\n";
            out += "[" + f.section + "]\n";
            section = f.section;
        }
        out += f.key + " = " + f.get(cfg) + "\n";
    }
    return out;
}

bool operator==(const PipelineConfig& a, const PipelineConfig& b) {
    return serialize_config(a) == serialize_config(b);
}

} // namespace geoldm::config
