#include "treeground/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "binio.hpp"
#include "treeground/common.hpp"
#include "treeground/rng.hpp"

namespace tg {

namespace {
// First token id reserved for signatures; ids below are free for future use.
constexpr int64_t kTokenBase = 4;
constexpr int64_t kTokensPerSignature = 4;
}  // namespace

std::vector<int64_t> signature_tokens(int64_t signature) {
    const int64_t len = 2 + signature % 3;
    std::vector<int64_t> out(static_cast<size_t>(len));
    for (int64_t i = 0; i < len; ++i) out[static_cast<size_t>(i)] = kTokenBase + signature * kTokensPerSignature + i;
    return out;
}

std::array<double, 3> signature_color(int64_t signature) {
    static const double base[8][3] = {{0.90, 0.20, 0.20}, {0.20, 0.90, 0.20}, {0.20, 0.20, 0.90},
                                      {0.90, 0.90, 0.20}, {0.90, 0.20, 0.90}, {0.20, 0.90, 0.90},
                                      {0.90, 0.55, 0.20}, {0.55, 0.20, 0.90}};
    const double shade = signature < 8 ? 1.0 : 0.55;
    const auto& b = base[signature % 8];
    return {b[0] * shade, b[1] * shade, b[2] * shade};
}

namespace {

void fill_patch(Tensor& frame, int64_t px, const Box& box, const std::array<double, 3>& color) {
    const auto lo = [&](double v) { return std::clamp<int64_t>(static_cast<int64_t>(std::floor(v * px)), 0, px - 1); };
    const auto hi = [&](double v) { return std::clamp<int64_t>(static_cast<int64_t>(std::ceil(v * px)) - 1, 0, px - 1); };
    const int64_t x0 = lo(box.x_min), x1 = hi(box.x_max), y0 = lo(box.y_min), y1 = hi(box.y_max);
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = y0; y <= y1; ++y)
            for (int64_t x = x0; x <= x1; ++x) frame.at((c * px + y) * px + x) = color[static_cast<size_t>(c)];
}

Box clamped_box(double cx, double cy, double w, double h) {
    cx = std::clamp(cx, w / 2 + 0.01, 1.0 - w / 2 - 0.01);
    cy = std::clamp(cy, h / 2 + 0.01, 1.0 - h / 2 - 0.01);
    return box_from_cxcywh(cx, cy, w, h);
}

VideoSample generate_video(const RunConfig& cfg, uint64_t seed, int64_t global_index, bool eval_split) {
    Rng rng(derive_seed(seed, static_cast<uint64_t>(global_index)));
    const int64_t frames = cfg.data_frames;
    const int64_t px = cfg.data_frame_px;

    VideoSample v;
    v.id = global_index;
    v.frames = frames;
    v.frame_px = px;
    v.eval_split = eval_split;

    const int64_t sig = rng.below(cfg.data_signatures);
    v.tokens = signature_tokens(sig);
    const auto color = signature_color(sig);

    const double w = rng.uniform(0.20, 0.35);
    const double h = rng.uniform(0.20, 0.35);
    const double cx0 = rng.uniform(0.2, 0.8);
    const double cy0 = rng.uniform(0.2, 0.8);
    const double vx = rng.uniform(-0.05, 0.05);
    const double vy = rng.uniform(-0.05, 0.05);

    std::vector<bool> present(static_cast<size_t>(frames));
    bool any = false;
    for (int64_t f = 0; f < frames; ++f) {
        present[static_cast<size_t>(f)] = !rng.coin(cfg.data_irrelevant_prob);
        any = any || present[static_cast<size_t>(f)];
    }
    if (!any) present[static_cast<size_t>(rng.below(frames))] = true;

    std::vector<int64_t> present_frames;
    for (int64_t f = 0; f < frames; ++f)
        if (present[static_cast<size_t>(f)]) present_frames.push_back(f);
    v.one_shot_frame = present_frames[static_cast<size_t>(rng.below(static_cast<int64_t>(present_frames.size())))];

    v.gt.assign(static_cast<size_t>(frames), std::nullopt);
    for (int64_t f = 0; f < frames; ++f) {
        Tensor frame = Tensor::zeros({3, px, px});
        for (auto& p : frame.data) p = rng.uniform(0.0, 0.08);

        const int64_t n_distract =
            cfg.data_signatures > 1 ? rng.between(cfg.data_distractors_min, cfg.data_distractors_max) : 0;
        for (int64_t d = 0; d < n_distract; ++d) {
            int64_t other = rng.below(cfg.data_signatures - 1);
            if (other >= sig) ++other;
            const double dw = rng.uniform(0.15, 0.30);
            const double dh = rng.uniform(0.15, 0.30);
            const Box db = clamped_box(rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85), dw, dh);
            fill_patch(frame, px, db, signature_color(other));
        }
        if (present[static_cast<size_t>(f)]) {
            const double nx = rng.uniform(-0.02, 0.02);
            const double ny = rng.uniform(-0.02, 0.02);
            const Box tb = clamped_box(cx0 + vx * static_cast<double>(f) + nx,
                                       cy0 + vy * static_cast<double>(f) + ny, w, h);
            fill_patch(frame, px, tb, color);
            v.gt[static_cast<size_t>(f)] = tb;
        }
        v.raw.push_back(std::move(frame));
    }
    v.one_shot_box = *v.gt[static_cast<size_t>(v.one_shot_frame)];
    return v;
}

std::string generation_fingerprint(const RunConfig& cfg) {
    const std::string canon = fmt::format(
        "videos_train={};videos_eval={};frames={};frame_px={};signatures={};distractors_min={};distractors_max={};"
        "irrelevant_prob={};vocab={}",
        cfg.data_videos_train, cfg.data_videos_eval, cfg.data_frames, cfg.data_frame_px, cfg.data_signatures,
        cfg.data_distractors_min, cfg.data_distractors_max, cfg.data_irrelevant_prob, cfg.data_vocab);
    return fmt::format("{:016x}", fnv1a(canon.data(), canon.size()));
}

}  // namespace

Dataset generate_dataset(const RunConfig& cfg, uint64_t seed) {
    const int64_t capacity = kTokenBase + cfg.data_signatures * kTokensPerSignature;
    if (capacity > cfg.data_vocab)
        throw DataError(fmt::format("{} signatures need a vocabulary of {}, configured {}", cfg.data_signatures,
                                    capacity, cfg.data_vocab));
    Dataset ds;
    ds.seed = seed;
    ds.config_hash = generation_fingerprint(cfg);
    for (int64_t i = 0; i < cfg.data_videos_train; ++i)
        ds.train.push_back(generate_video(cfg, seed, i, false));
    for (int64_t j = 0; j < cfg.data_videos_eval; ++j)
        ds.eval.push_back(generate_video(cfg, seed, cfg.data_videos_train + j, true));
    return ds;
}

namespace {
constexpr char kMagic[4] = {'I', 'T', 'V', 'D'};
constexpr uint16_t kVersion = 1;

void write_video_block(binio::Writer& w, const VideoSample& v) {
    w.u32(static_cast<uint32_t>(v.id));
    w.u32(static_cast<uint32_t>(v.frames));
    w.u32(static_cast<uint32_t>(v.frame_px));
    w.u32(static_cast<uint32_t>(v.frame_px));
    w.u32(static_cast<uint32_t>(v.tokens.size()));
    w.u32(v.eval_split ? 1u : 0u);
    for (const Tensor& frame : v.raw)
        for (double d : frame.data) w.f64(d);
    for (int64_t t : v.tokens) w.u32(static_cast<uint32_t>(t));
    w.u32(static_cast<uint32_t>(v.one_shot_frame));
    w.f64(v.one_shot_box.x_min);
    w.f64(v.one_shot_box.y_min);
    w.f64(v.one_shot_box.x_max);
    w.f64(v.one_shot_box.y_max);
    std::vector<uint8_t> bitmap(static_cast<size_t>((v.frames + 7) / 8), 0);
    for (int64_t f = 0; f < v.frames; ++f)
        if (v.gt[static_cast<size_t>(f)]) bitmap[static_cast<size_t>(f / 8)] |= static_cast<uint8_t>(1u << (f % 8));
    w.bytes(bitmap.data(), bitmap.size());
    for (int64_t f = 0; f < v.frames; ++f) {
        if (!v.gt[static_cast<size_t>(f)]) continue;
        const Box& b = *v.gt[static_cast<size_t>(f)];
        w.f64(b.x_min);
        w.f64(b.y_min);
        w.f64(b.x_max);
        w.f64(b.y_max);
    }
}

VideoSample read_video_block(binio::Reader& r) {
    VideoSample v;
    v.id = r.u32();
    v.frames = r.u32();
    const int64_t hpx = r.u32();
    const int64_t wpx = r.u32();
    if (hpx != wpx) throw DataError(fmt::format("video {}: non-square frames {}x{}", v.id, hpx, wpx));
    v.frame_px = hpx;
    const uint32_t len = r.u32();
    const uint32_t flags = r.u32();
    v.eval_split = (flags & 1u) != 0;
    for (int64_t f = 0; f < v.frames; ++f) {
        Tensor frame = Tensor::zeros({3, v.frame_px, v.frame_px});
        for (auto& d : frame.data) d = r.f64();
        v.raw.push_back(std::move(frame));
    }
    for (uint32_t i = 0; i < len; ++i) v.tokens.push_back(r.u32());
    v.one_shot_frame = r.u32();
    v.one_shot_box = {r.f64(), r.f64(), r.f64(), r.f64()};
    std::vector<uint8_t> bitmap(static_cast<size_t>((v.frames + 7) / 8));
    r.bytes(bitmap.data(), bitmap.size());
    v.gt.assign(static_cast<size_t>(v.frames), std::nullopt);
    for (int64_t f = 0; f < v.frames; ++f) {
        if (!(bitmap[static_cast<size_t>(f / 8)] >> (f % 8) & 1u)) continue;
        v.gt[static_cast<size_t>(f)] = Box{r.f64(), r.f64(), r.f64(), r.f64()};
    }
    return v;
}
}  // namespace

void write_dataset(const Dataset& ds, const std::string& path) {
    binio::Writer blocks;
    std::vector<size_t> offsets;
    for (const VideoSample* v : [&] {
             std::vector<const VideoSample*> all;
             for (const auto& t : ds.train) all.push_back(&t);
             for (const auto& e : ds.eval) all.push_back(&e);
             return all;
         }()) {
        offsets.push_back(blocks.size());
        write_video_block(blocks, *v);
    }

    std::string manifest = fmt::format("format_version={}\nseed={}\nconfig_hash={}\ncount_train={}\ncount_eval={}\n",
                                       kVersion, ds.seed, ds.config_hash, ds.train.size(), ds.eval.size());
    for (size_t i = 0; i < offsets.size(); ++i) manifest += fmt::format("offset_{}={}\n", i, offsets[i]);

    binio::Writer w;
    w.bytes(kMagic, 4);
    w.u16(kVersion);
    w.str(manifest);
    w.bytes(blocks.buffer().data(), blocks.size());
    binio::write_file(path, w.buffer());
}

Dataset read_dataset(const std::string& path) {
    auto bytes = binio::read_file(path);
    binio::Reader r(bytes.data(), bytes.size(), fmt::format("dataset '{}'", path));
    r.expect_magic(kMagic);
    const uint16_t version = r.u16();
    if (version != kVersion) throw DataError(fmt::format("dataset '{}': unsupported version {}", path, version));

    const std::string manifest = r.str();
    int64_t count_train = -1, count_eval = -1;
    Dataset ds;
    std::vector<size_t> offsets;
    size_t pos = 0;
    while (pos < manifest.size()) {
        size_t nl = manifest.find('\n', pos);
        if (nl == std::string::npos) nl = manifest.size();
        const std::string line = manifest.substr(pos, nl - pos);
        pos = nl + 1;
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) throw DataError(fmt::format("dataset '{}': manifest line '{}'", path, line));
        const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
        if (key == "seed") ds.seed = std::stoull(value);
        else if (key == "config_hash") ds.config_hash = value;
        else if (key == "count_train") count_train = std::stoll(value);
        else if (key == "count_eval") count_eval = std::stoll(value);
        else if (key.rfind("offset_", 0) == 0) offsets.push_back(static_cast<size_t>(std::stoull(value)));
    }
    if (count_train < 0 || count_eval < 0)
        throw DataError(fmt::format("dataset '{}': manifest lacks split counts", path));
    if (static_cast<int64_t>(offsets.size()) != count_train + count_eval)
        throw DataError(fmt::format("dataset '{}': {} offsets for {} videos", path, offsets.size(),
                                    count_train + count_eval));

    const size_t blocks_start = r.pos();
    for (int64_t i = 0; i < count_train + count_eval; ++i) {
        const size_t at = r.pos() - blocks_start;
        if (at != offsets[static_cast<size_t>(i)])
            throw DataError(fmt::format("dataset '{}': video {} starts at block offset {}, manifest says {}", path, i,
                                        at, offsets[static_cast<size_t>(i)]));
        VideoSample v = read_video_block(r);
        (i < count_train ? ds.train : ds.eval).push_back(std::move(v));
    }
    if (r.remaining() != 0) throw DataError(fmt::format("dataset '{}': {} trailing bytes", path, r.remaining()));
    return ds;
}

}  // namespace tg
