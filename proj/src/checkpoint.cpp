#include "cvox/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace cvox::ckpt {

namespace {

constexpr char kMagic[8] = {'C', 'V', 'O', 'X', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

// Hard ceilings so a corrupt length field fails fast instead of allocating.
constexpr uint64_t kMaxString = 1ull << 26;   // 64 MiB
constexpr uint64_t kMaxEntries = 1ull << 20;  // 1M map entries
constexpr uint64_t kMaxElems = 1ull << 30;    // 1G tensor elements

void put_u32(std::string& out, uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.append(b, 4);
}

void put_u64(std::string& out, uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.append(b, 8);
}

void put_i64(std::string& out, int64_t v) { put_u64(out, static_cast<uint64_t>(v)); }

void put_f64(std::string& out, double v) {
    static_assert(sizeof(double) == 8);
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

void put_str(std::string& out, const std::string& s) {
    if (s.size() > kMaxString) throw Error::io("checkpoint: string field too large to serialize");
    put_u32(out, static_cast<uint32_t>(s.size()));
    out += s;
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > buf.size()) throw Error::data("checkpoint: truncated file");
    }

    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }

    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }

    int64_t i64() { return static_cast<int64_t>(u64()); }

    double f64() {
        const uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }

    std::string str() {
        const uint32_t n = u32();
        if (n > kMaxString) throw Error::data("checkpoint: corrupt string length");
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

const std::string& Checkpoint::meta_at(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw Error::data("checkpoint: missing metadata key '" + key + "'");
    return it->second;
}

double Checkpoint::scalar_at(const std::string& key) const {
    auto it = scalars.find(key);
    if (it == scalars.end()) throw Error::data("checkpoint: missing scalar '" + key + "'");
    return it->second;
}

std::string serialize(const Checkpoint& c) {
    std::string out;
    out.append(kMagic, 8);
    put_u32(out, kVersion);
    put_u64(out, c.config_hash);
    put_str(out, c.kind);
    put_str(out, c.config_echo);

    put_u32(out, static_cast<uint32_t>(c.meta.size()));
    for (const auto& [k, v] : c.meta) {
        put_str(out, k);
        put_str(out, v);
    }

    put_u32(out, static_cast<uint32_t>(c.scalars.size()));
    for (const auto& [k, v] : c.scalars) {
        put_str(out, k);
        put_f64(out, v);
    }

    put_u32(out, static_cast<uint32_t>(c.blocks.size()));
    for (const auto& [k, t] : c.blocks) {
        put_str(out, k);
        put_u32(out, static_cast<uint32_t>(t.rank()));
        for (int64_t i = 0; i < t.rank(); ++i) put_i64(out, t.dim(i));
        for (int64_t i = 0; i < t.size(); ++i) put_f64(out, t.data()[i]);
    }
    return out;
}

Checkpoint deserialize(const std::string& bytes) {
    Reader r{bytes};
    r.need(8);
    if (std::memcmp(bytes.data(), kMagic, 8) != 0)
        throw Error::data("checkpoint: bad magic (not a checkpoint file)");
    r.pos = 8;
    const uint32_t version = r.u32();
    if (version != kVersion)
        throw Error::data("checkpoint: unsupported version " + std::to_string(version));

    Checkpoint c;
    c.config_hash = r.u64();
    c.kind = r.str();
    c.config_echo = r.str();

    const uint32_t n_meta = r.u32();
    if (n_meta > kMaxEntries) throw Error::data("checkpoint: corrupt metadata count");
    for (uint32_t i = 0; i < n_meta; ++i) {
        std::string k = r.str();
        c.meta[std::move(k)] = r.str();
    }

    const uint32_t n_scalars = r.u32();
    if (n_scalars > kMaxEntries) throw Error::data("checkpoint: corrupt scalar count");
    for (uint32_t i = 0; i < n_scalars; ++i) {
        std::string k = r.str();
        c.scalars[std::move(k)] = r.f64();
    }

    const uint32_t n_blocks = r.u32();
    if (n_blocks > kMaxEntries) throw Error::data("checkpoint: corrupt block count");
    for (uint32_t i = 0; i < n_blocks; ++i) {
        std::string k = r.str();
        const uint32_t rank = r.u32();
        if (rank > 8) throw Error::data("checkpoint: corrupt tensor rank");
        ad::Shape shape(rank);
        uint64_t elems = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            shape[d] = r.i64();
            if (shape[d] < 0) throw Error::data("checkpoint: negative tensor dimension");
            elems *= static_cast<uint64_t>(shape[d]);
            if (elems > kMaxElems) throw Error::data("checkpoint: corrupt tensor size");
        }
        ad::Tensor<double> t(shape);
        for (int64_t e = 0; e < t.size(); ++e) t.data()[e] = r.f64();
        c.blocks.emplace(std::move(k), std::move(t));
    }
    if (r.pos != bytes.size()) throw Error::data("checkpoint: trailing bytes after payload");
    return c;
}

void save_checkpoint(const Checkpoint& c, const std::string& path) {
    const std::string bytes = serialize(c);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw Error::io("cannot open '" + tmp + "' for writing");
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw Error::io("short write to '" + tmp + "'");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw Error::io("cannot move checkpoint into place at '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error::io("cannot open checkpoint file '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return deserialize(ss.str());
}

void require(const Checkpoint& c, const std::string& kind, uint64_t config_hash) {
    if (c.kind != kind)
        throw Error::data("checkpoint kind mismatch: expected '" + kind + "', found '" + c.kind +
                          "'");
    if (c.config_hash != config_hash)
        throw Error::data("checkpoint config hash mismatch: expected " + hex64(config_hash) +
                          ", found " + hex64(c.config_hash) +
                          " (the checkpoint was produced under a different configuration)");
}

}  // namespace cvox::ckpt
