#include "treeground/encoders.hpp"

#include <cmath>

#include <fmt/format.h>

#include "treeground/common.hpp"

namespace tg {

void register_encoder_params(ParamStore& ps, const RunConfig& cfg, Rng& rng) {
    const int64_t c = cfg.model_channels;
    ps.add("enc.frame.conv1.w", xavier_init({c, 3, 1, 1}, rng));
    ps.add("enc.frame.conv1.b", Tensor::zeros({c}));
    ps.add("enc.frame.coord.w", xavier_init({c, 2}, rng));
    ps.add("enc.frame.conv2.w", xavier_init({c, c, 3, 3}, rng));
    ps.add("enc.frame.conv2.b", Tensor::zeros({c}));
    ps.add("enc.text.embed", normal_init({cfg.data_vocab, c}, rng, 0.02));
    ps.add("enc.text.pos", normal_init({kMaxQueryLen, c}, rng, 0.02));
    ps.add("enc.text.wq", xavier_init({c, c}, rng));
    ps.add("enc.text.wk", xavier_init({c, c}, rng));
    ps.add("enc.text.wv", xavier_init({c, c}, rng));
    ps.add("enc.text.wo", xavier_init({c, c}, rng));
}

std::vector<Tensor> encode_frames(const std::vector<Tensor>& raw_frames, const ParamStore& ps, const RunConfig& cfg,
                                  Tape* tape) {
    if (raw_frames.empty()) throw DataError("encode_frames: empty video");
    const Shape& s0 = raw_frames.front().shape;
    if (s0.size() != 3 || s0[0] != 3)
        throw ShapeError(fmt::format("encode_frames: frames must be 3 x px x px, got {}", shape_str(s0)));
    if (s0[1] % cfg.model_grid != 0 || s0[2] % cfg.model_grid != 0)
        throw DataError(fmt::format("encode_frames: frame size {}x{} is not a multiple of grid {}", s0[1], s0[2],
                                    cfg.model_grid));
    const int64_t stride = s0[1] / cfg.model_grid;
    const Tensor& w1 = ps.get("enc.frame.conv1.w");
    const Tensor& b1 = ps.get("enc.frame.conv1.b");
    const Tensor& wc = ps.get("enc.frame.coord.w");
    const Tensor& w2 = ps.get("enc.frame.conv2.w");
    const Tensor& b2 = ps.get("enc.frame.conv2.b");

    // fixed normalized x/y maps, mixed in by a learned projection: gives cell
    // features a coordinate basis the box head can aggregate directly
    const int64_t px = s0[1];
    const double denom = px > 1 ? static_cast<double>(px - 1) : 1.0;
    Tensor coords = Tensor::zeros({2, px * px});
    for (int64_t y = 0; y < px; ++y)
        for (int64_t x = 0; x < px; ++x) {
            coords.at(y * px + x) = static_cast<double>(x) / denom;
            coords.at(px * px + y * px + x) = static_cast<double>(y) / denom;
        }

    std::vector<Tensor> grids;
    grids.reserve(raw_frames.size());
    for (const Tensor& raw : raw_frames) {
        if (raw.shape != s0)
            throw ShapeError(fmt::format("encode_frames: frame shape {} differs from {}", shape_str(raw.shape),
                                         shape_str(s0)));
        Tensor pos = ops::reshape(ops::matmul(wc, coords, tape), {cfg.model_channels, px, px}, tape);
        Tensor h = ops::relu(ops::add(ops::conv2d(raw, w1, b1, 1, 0, tape), pos, tape), tape);
        grids.push_back(ops::conv2d(h, w2, b2, stride, 1, tape));
    }
    return grids;
}

QueryFeatures encode_query(const std::vector<int64_t>& token_ids, const ParamStore& ps, const RunConfig& cfg,
                           Tape* tape) {
    if (token_ids.empty()) throw DataError("encode_query: empty query");
    const int64_t len = static_cast<int64_t>(token_ids.size());
    if (len > kMaxQueryLen)
        throw DataError(fmt::format("encode_query: query of {} tokens exceeds the supported {}", len, kMaxQueryLen));
    for (int64_t id : token_ids)
        if (id < 0 || id >= cfg.data_vocab)
            throw DataError(fmt::format("encode_query: token id {} outside vocabulary of {}", id, cfg.data_vocab));

    const int64_t c = cfg.model_channels;
    std::vector<int64_t> positions(token_ids.size());
    for (size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int64_t>(i);

    Tensor x = ops::embed_lookup(ps.get("enc.text.embed"), token_ids, tape);
    x = ops::add(x, ops::embed_lookup(ps.get("enc.text.pos"), positions, tape), tape);
    Tensor q = ops::matmul(x, ps.get("enc.text.wq"), tape);
    Tensor k = ops::matmul(x, ps.get("enc.text.wk"), tape);
    Tensor v = ops::matmul(x, ps.get("enc.text.wv"), tape);
    Tensor attn = ops::softmax_lastdim(
        ops::scale(ops::matmul(q, k, tape, false, true), 1.0 / std::sqrt(static_cast<double>(c)), tape), tape);
    Tensor ctx = ops::matmul(ops::matmul(attn, v, tape), ps.get("enc.text.wo"), tape);
    Tensor per_token = ops::add(x, ctx, tape);

    Tensor ones = Tensor::full({len}, 1.0);
    Tensor pooled = ops::scale(ops::matmul(ones, per_token, tape), 1.0 / static_cast<double>(len), tape);
    return QueryFeatures{token_ids, std::move(per_token), std::move(pooled)};
}

}  // namespace tg
