#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "geoldm/config.hpp"

namespace geoldm::manifest {

inline constexpr const char* kCodeVersion = "geoldm 0.1.0";

/// Written into the run directory before any long computation starts.
struct RunManifest {
    std::string command;
    std::string config_hash; // fnv1a-64 hex of the canonical config + command + args
    std::string code_version = kCodeVersion;
    std::uint64_t seed = 0;
    std::string timestamp; // UTC, ISO 8601
    std::vector<std::string> outputs;
};

/// Hash identifying a run: canonical config serialization, the subcommand and
/// any extra determinism-relevant arguments.
std::string run_hash(const config::PipelineConfig& cfg, const std::string& command,
                     const std::string& extra_args);

/// out_dir/<command>-<hash prefix>; created if absent.
std::filesystem::path make_run_dir(const config::PipelineConfig& cfg, const std::string& command,
                                   const std::string& extra_args);

RunManifest make_manifest(const config::PipelineConfig& cfg, const std::string& command,
                          const std::string& extra_args);

void write_manifest(const std::filesystem::path& path, const RunManifest& m);

} // namespace geoldm::manifest
