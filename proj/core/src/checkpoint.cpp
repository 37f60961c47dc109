#include "treeground/checkpoint.hpp"

#include <cstdio>

#include <fmt/format.h>

#include "binio.hpp"
#include "treeground/common.hpp"

namespace tg {

namespace binio {

std::vector<uint8_t> read_file(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw DataError(fmt::format("cannot open '{}' for reading", path));
    std::fseek(f, 0, SEEK_END);
    long n = std::ftell(f);
    std::fseek(f, 0, SEEK_SET);
    std::vector<uint8_t> buf(static_cast<size_t>(n < 0 ? 0 : n));
    size_t got = buf.empty() ? 0 : std::fread(buf.data(), 1, buf.size(), f);
    std::fclose(f);
    if (got != buf.size()) throw DataError(fmt::format("short read on '{}'", path));
    return buf;
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw DataError(fmt::format("cannot open '{}' for writing", path));
    size_t put = bytes.empty() ? 0 : std::fwrite(bytes.data(), 1, bytes.size(), f);
    int rc = std::fclose(f);
    if (put != bytes.size() || rc != 0) throw DataError(fmt::format("short write on '{}'", path));
}

}  // namespace binio

namespace {
constexpr char kMagic[4] = {'I', 'T', 'G', 'W'};
constexpr uint16_t kVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& store) {
    binio::Writer w;
    w.bytes(kMagic, 4);
    w.u16(kVersion);
    w.u32(static_cast<uint32_t>(store.size()));
    for (const auto& [name, t] : store) {
        w.str(name);
        w.u32(static_cast<uint32_t>(t.rank()));
        for (int64_t d : t.shape) w.u32(static_cast<uint32_t>(d));
        for (double v : t.data) w.f64(v);
    }
    binio::write_file(path, w.buffer());
}

void load_checkpoint(const std::string& path, ParamStore& store) {
    auto bytes = binio::read_file(path);
    binio::Reader r(bytes.data(), bytes.size(), fmt::format("checkpoint '{}'", path));
    r.expect_magic(kMagic);
    uint16_t version = r.u16();
    if (version != kVersion)
        throw DataError(fmt::format("checkpoint '{}': unsupported version {}", path, version));
    const uint32_t count = r.u32();
    const bool populate = store.size() == 0;
    if (!populate && count != store.size())
        throw DataError(fmt::format("checkpoint '{}': {} parameters, model has {}", path, count, store.size()));
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = r.str();
        uint32_t rank = r.u32();
        Shape shape;
        for (uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<int64_t>(r.u32()));
        Tensor t = Tensor::zeros(shape);
        for (auto& v : t.data) v = r.f64();
        if (populate) {
            store.add(name, std::move(t));
        } else {
            Tensor& dst = store.get(name);
            if (dst.shape != shape)
                throw DataError(fmt::format("checkpoint '{}': parameter '{}' has shape {}, model expects {}", path,
                                            name, shape_str(shape), shape_str(dst.shape)));
            dst.data = std::move(t.data);
            dst.node.reset();
        }
    }
    if (r.remaining() != 0)
        throw DataError(fmt::format("checkpoint '{}': {} trailing bytes", path, r.remaining()));
}

}  // namespace tg
