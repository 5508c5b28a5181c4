#include "geoldm/facies.hpp"

#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace geoldm {

namespace {

constexpr char kGridMagic[4] = {'G', 'G', 'D', 'S'};
constexpr std::uint32_t kGridVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

} // namespace

void ConditioningSet::validate(int nx, int ny) const {
    std::set<std::pair<int, int>> seen;
    for (const auto& p : points) {
        require(p.i >= 0 && p.i < nx && p.j >= 0 && p.j < ny, "facies/cond-out-of-bounds",
                "conditioning point (" + std::to_string(p.i) + "," + std::to_string(p.j) +
                    ") outside " + std::to_string(nx) + "x" + std::to_string(ny) + " grid");
        require(p.facies < kNumFacies, "facies/cond-bad-code",
                "facies code " + std::to_string(p.facies) + " not in {0,1,2}");
        require(seen.insert({p.i, p.j}).second, "facies/cond-duplicate",
                "duplicate conditioning cell (" + std::to_string(p.i) + "," + std::to_string(p.j) + ")");
    }
}

void write_grid_file(const std::filesystem::path& path, std::span<const FaciesGrid> grids) {
    require(!grids.empty(), "facies/empty-write", "no grids to write");
    const int nx = grids[0].nx, ny = grids[0].ny;
    for (const auto& g : grids)
        require(g.nx == nx && g.ny == ny, "facies/mixed-shapes", "grid stack must be uniform shape");

    std::ofstream os(path, std::ios::binary);
    require(os.good(), "facies/io", "cannot open " + path.string() + " for writing");
    os.write(kGridMagic, 4);
    write_u32(os, kGridVersion);
    write_u32(os, static_cast<std::uint32_t>(grids.size()));
    write_u32(os, static_cast<std::uint32_t>(nx));
    write_u32(os, static_cast<std::uint32_t>(ny));
    for (const auto& g : grids)
        os.write(reinterpret_cast<const char*>(g.codes.data()), static_cast<std::streamsize>(g.codes.size()));
    require(os.good(), "facies/io", "write failed for " + path.string());
}

std::vector<FaciesGrid> read_grid_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), "facies/io", "cannot open " + path.string());
    char magic[4];
    is.read(magic, 4);
    require(is.good() && std::memcmp(magic, kGridMagic, 4) == 0, "facies/bad-magic",
            path.string() + " is not a GGDS grid file");
    const std::uint32_t version = read_u32(is);
    require(version == kGridVersion, "facies/bad-version",
            "unsupported GGDS version " + std::to_string(version));
    const std::uint32_t count = read_u32(is);
    const std::uint32_t nx = read_u32(is);
    const std::uint32_t ny = read_u32(is);
    require(nx >= 1 && ny >= 1, "facies/bad-shape", "corrupt header in " + path.string());

    std::vector<FaciesGrid> grids;
    grids.reserve(count);
    for (std::uint32_t k = 0; k < count; ++k) {
        FaciesGrid g(static_cast<int>(nx), static_cast<int>(ny));
        is.read(reinterpret_cast<char*>(g.codes.data()), static_cast<std::streamsize>(g.codes.size()));
        require(is.good(), "facies/io", "truncated grid file " + path.string());
        for (auto c : g.codes)
            require(c < kNumFacies, "facies/bad-code", "facies code out of range in " + path.string());
        grids.push_back(std::move(g));
    }
    return grids;
}

void write_conditioning_file(const std::filesystem::path& path, const ConditioningSet& cond) {
    std::ofstream os(path);
    require(os.good(), "facies/io", "cannot open " + path.string() + " for writing");
    os << "# i j facies\n";
    for (const auto& p : cond.points)
        os << p.i << ' ' << p.j << ' ' << static_cast<int>(p.facies) << '\n';
}

ConditioningSet read_conditioning_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    require(is.good(), "facies/io", "cannot open " + path.string());
    ConditioningSet cond;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        int i, j, f;
        if (!(ls >> i)) continue; // blank / comment-only line
        require(static_cast<bool>(ls >> j >> f), "facies/cond-parse",
                path.string() + ":" + std::to_string(lineno) + ": expected 'i j facies'");
        require(f >= 0 && f < kNumFacies, "facies/cond-bad-code",
                path.string() + ":" + std::to_string(lineno) + ": facies must be 0, 1 or 2");
        cond.points.push_back({i, j, static_cast<std::uint8_t>(f)});
    }
    return cond;
}

} // namespace geoldm
