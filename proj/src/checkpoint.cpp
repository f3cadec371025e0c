#include "dti/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace dti::checkpoint {

namespace {

constexpr char kMagic[8] = {'D', 'T', 'I', 'C', 'K', 'P', 'T', '1'};

void write_u64(std::ostream& os, uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

uint64_t read_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

void write_str(std::ostream& os, const std::string& s) {
    write_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_str(std::istream& is) {
    std::string s(read_u64(is), '\0');
    is.read(s.data(), static_cast<std::streamsize>(s.size()));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return s;
}

}  // namespace

void save(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot write " + path);
    os.write(kMagic, sizeof kMagic);
    write_str(os, ckpt.meta.dump());
    write_u64(os, ckpt.tensors.size());
    for (const auto& [name, t] : ckpt.tensors) {
        write_str(os, name);
        write_u64(os, t.shape().size());
        for (int d : t.shape()) write_u64(os, static_cast<uint64_t>(d));
        os.write(reinterpret_cast<const char*>(t.data()),
                 static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot read " + path);
    char magic[8];
    is.read(magic, sizeof magic);
    if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    Checkpoint out;
    out.meta = nlohmann::json::parse(read_str(is));
    uint64_t n = read_u64(is);
    for (uint64_t i = 0; i < n; ++i) {
        std::string name = read_str(is);
        std::vector<int> shape(read_u64(is));
        for (auto& d : shape) d = static_cast<int>(read_u64(is));
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.numel() * sizeof(float)));
        if (!is) throw std::runtime_error("checkpoint: truncated tensor " + name);
        out.tensors.emplace(std::move(name), std::move(t));
    }
    return out;
}

}  // namespace dti::checkpoint
