#include "geoldm/manifest.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "geoldm/rng.hpp"

namespace geoldm::manifest {

std::string run_hash(const config::PipelineConfig& cfg, const std::string& command,
                     const std::string& extra_args) {
    const std::string blob = serialize_config(cfg) + "\n" + command + "\n" + extra_args;
    std::ostringstream os;
    os << std::hex << std::setfill('0') << std::setw(16) << fnv1a64(blob);
    return os.str();
}

std::filesystem::path make_run_dir(const config::PipelineConfig& cfg, const std::string& command,
                                   const std::string& extra_args) {
    const std::string hash = run_hash(cfg, command, extra_args);
    std::filesystem::path dir =
        std::filesystem::path(cfg.out_dir) / (command + "-" + hash.substr(0, 12));
    std::filesystem::create_directories(dir);
    return dir;
}

RunManifest make_manifest(const config::PipelineConfig& cfg, const std::string& command,
                          const std::string& extra_args) {
    RunManifest m;
    m.command = command;
    m.config_hash = run_hash(cfg, command, extra_args);
    m.seed = cfg.seed;
    const auto now = std::chrono::system_clock::now();
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    std::ostringstream ts;
    ts << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    m.timestamp = ts.str();
    return m;
}

void write_manifest(const std::filesystem::path& path, const RunManifest& m) {
    std::ofstream os(path);
    require(os.good(), "manifest/io", "cannot open " + path.string() + " for writing");
    os << "command: " << m.command << '\n';
    os << "config_hash: " << m.config_hash << '\n';
    os << "code_version: " << m.code_version << '\n';
    os << "seed: " << m.seed << '\n';
    os << "timestamp: " << m.timestamp << '\n';
    for (const auto& out : m.outputs) os << "output: " << out << '\n';
}

} // namespace geoldm::manifest
