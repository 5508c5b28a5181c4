#include "geoldm/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace geoldm::nn {

namespace {

constexpr char kMagic[4] = {'L', 'D', 'M', 'C'};
constexpr std::uint32_t kVersion = 1;

void put_u16(std::ostream& os, std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_f32(std::ostream& os, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(os, v);
}

std::uint16_t get_u16(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

float get_f32(std::istream& is) {
    const std::uint32_t v = get_u32(is);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
}

void write_section(std::ostream& os, const std::vector<std::pair<std::string, Tensor>>& tensors) {
    for (const auto& [name, t] : tensors) {
        require(name.size() <= UINT16_MAX, "checkpoint/name", "tensor name too long");
        put_u16(os, static_cast<std::uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        const auto& shape = t.shape();
        require(shape.size() <= UINT8_MAX, "checkpoint/rank", "tensor rank too large");
        os.put(static_cast<char>(shape.size()));
        for (int d : shape) put_u32(os, static_cast<std::uint32_t>(d));
        for (float v : t.data()) put_f32(os, v);
    }
}

std::vector<std::pair<std::string, Tensor>> read_section(std::istream& is, std::uint32_t count,
                                                         const std::string& path) {
    std::vector<std::pair<std::string, Tensor>> tensors;
    tensors.reserve(count);
    for (std::uint32_t k = 0; k < count; ++k) {
        const std::uint16_t nlen = get_u16(is);
        std::string name(nlen, '\0');
        is.read(name.data(), nlen);
        const int rank = is.get();
        require(is.good() && rank >= 0, "checkpoint/io", "truncated checkpoint " + path);
        Shape shape(static_cast<std::size_t>(rank));
        for (auto& d : shape) d = static_cast<int>(get_u32(is));
        Tensor t = Tensor::zeros(shape);
        for (auto& v : t.data()) v = get_f32(is);
        require(is.good(), "checkpoint/io", "truncated checkpoint " + path);
        tensors.push_back({std::move(name), std::move(t)});
    }
    return tensors;
}

} // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return &t;
    return nullptr;
}

float Checkpoint::scalar(const std::string& name) const {
    const Tensor* t = find(name);
    require(t != nullptr, "checkpoint/missing", "checkpoint has no tensor '" + name + "'");
    return t->item();
}

Checkpoint Checkpoint::from_params(const ParamSet& params) {
    Checkpoint c;
    for (const auto& [name, t] : params.entries()) c.tensors.push_back({name, t.detach()});
    return c;
}

Checkpoint Checkpoint::from_params(const ParamSet& params, const Adam& opt) {
    Checkpoint c = from_params(params);
    c.opt_tensors.push_back(
        {"adam.step", Tensor::from({1}, {static_cast<float>(opt.step_count())})});
    for (const auto& slot : opt.slots()) {
        c.opt_tensors.push_back({"adam.m." + slot.name, Tensor::from(slot.param.shape(), slot.m)});
        c.opt_tensors.push_back({"adam.v." + slot.name, Tensor::from(slot.param.shape(), slot.v)});
    }
    return c;
}

void Checkpoint::load_into(ParamSet& params) const {
    for (const auto& [name, p] : params.entries()) {
        const Tensor* src = find(name);
        require(src != nullptr, "checkpoint/missing", "checkpoint lacks parameter '" + name + "'");
        require(src->shape() == p.shape(), "checkpoint/shape",
                "shape mismatch for '" + name + "': file " + shape_str(src->shape()) + " vs model " +
                    shape_str(p.shape()));
        Tensor dst = p; // shared handle
        std::copy(src->data().begin(), src->data().end(), dst.data().begin());
    }
}

void Checkpoint::load_optimizer(Adam& opt) const {
    auto find_opt = [&](const std::string& name) -> const Tensor* {
        for (const auto& [n, t] : opt_tensors)
            if (n == name) return &t;
        return nullptr;
    };
    const Tensor* step = find_opt("adam.step");
    require(step != nullptr, "checkpoint/missing", "checkpoint has no optimizer section");
    opt.set_step_count(static_cast<long>(step->item()));
    for (auto& slot : opt.slots()) {
        const Tensor* m = find_opt("adam.m." + slot.name);
        const Tensor* v = find_opt("adam.v." + slot.name);
        require(m && v, "checkpoint/missing", "optimizer state missing for '" + slot.name + "'");
        slot.m.assign(m->data().begin(), m->data().end());
        slot.v.assign(v->data().begin(), v->data().end());
    }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary);
    require(os.good(), "checkpoint/io", "cannot open " + path.string() + " for writing");
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    put_u32(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
    write_section(os, ckpt.tensors);
    put_u32(os, static_cast<std::uint32_t>(ckpt.opt_tensors.size()));
    write_section(os, ckpt.opt_tensors);
    require(os.good(), "checkpoint/io", "write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), "checkpoint/io", "cannot open " + path.string());
    char magic[4];
    is.read(magic, 4);
    require(is.good() && std::memcmp(magic, kMagic, 4) == 0, "checkpoint/bad-magic",
            path.string() + " is not an LDMC checkpoint");
    const std::uint32_t version = get_u32(is);
    require(version == kVersion, "checkpoint/bad-version",
            "unsupported checkpoint version " + std::to_string(version));
    Checkpoint c;
    c.tensors = read_section(is, get_u32(is), path.string());
    c.opt_tensors = read_section(is, get_u32(is), path.string());
    return c;
}

} // namespace geoldm::nn
