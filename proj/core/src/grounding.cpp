#include "treeground/grounding.hpp"

#include <cmath>

#include <fmt/format.h>

#include "treeground/common.hpp"

namespace tg {

namespace {

// y = layernorm(x) * g + b, rowwise over the last dim.
Tensor layernorm_affine(const Tensor& x, const Tensor& g, const Tensor& b, Tape* tape) {
    return ops::add(ops::mul(ops::layernorm_lastdim(x, tape), g, tape), b, tape);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b, Tape* tape) {
    return ops::add(ops::matmul(x, w, tape), b, tape);
}

// Multi-head attention of `q_side` over `kv_side` with per-head projections.
Tensor attention(const Tensor& q_side, const Tensor& kv_side, const std::string& prefix, const ParamStore& ps,
                 const RunConfig& cfg, Tape* tape, EncodeDebug* debug) {
    const int64_t head_dim = cfg.model_channels / cfg.model_heads;
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(cfg.model_heads));
    for (int64_t h = 0; h < cfg.model_heads; ++h) {
        const std::string hp = fmt::format("{}.h{}", prefix, h);
        Tensor q = ops::matmul(q_side, ps.get(hp + ".wq"), tape);
        Tensor k = ops::matmul(kv_side, ps.get(hp + ".wk"), tape);
        Tensor v = ops::matmul(kv_side, ps.get(hp + ".wv"), tape);
        Tensor scores = ops::scale(ops::matmul(q, k, tape, false, true),
                                   1.0 / std::sqrt(static_cast<double>(head_dim)), tape);
        Tensor attn = ops::softmax_lastdim(scores, tape);
        if (debug) debug->attentions.push_back(attn.detached());
        heads.push_back(ops::matmul(attn, v, tape));
    }
    std::vector<const Tensor*> parts;
    parts.reserve(heads.size());
    for (const Tensor& h : heads) parts.push_back(&h);
    Tensor merged = ops::concat(parts, 1, tape);
    return linear(merged, ps.get(prefix + ".wo"), ps.get(prefix + ".bo"), tape);
}

Tensor ffn(const Tensor& x, const std::string& prefix, const ParamStore& ps, Tape* tape) {
    Tensor h = ops::relu(linear(x, ps.get(prefix + ".w1"), ps.get(prefix + ".b1"), tape), tape);
    return linear(h, ps.get(prefix + ".w2"), ps.get(prefix + ".b2"), tape);
}

void register_block(ParamStore& ps, const std::string& prefix, int64_t c, int64_t heads, Rng& rng) {
    const int64_t head_dim = c / heads;
    ps.add(prefix + ".ln1.g", Tensor::full({c}, 1.0));
    ps.add(prefix + ".ln1.b", Tensor::zeros({c}));
    for (int64_t h = 0; h < heads; ++h) {
        const std::string hp = fmt::format("{}.attn.h{}", prefix, h);
        ps.add(hp + ".wq", xavier_init({c, head_dim}, rng));
        ps.add(hp + ".wk", xavier_init({c, head_dim}, rng));
        ps.add(hp + ".wv", xavier_init({c, head_dim}, rng));
    }
    ps.add(prefix + ".attn.wo", xavier_init({c, c}, rng));
    ps.add(prefix + ".attn.bo", Tensor::zeros({c}));
    ps.add(prefix + ".ln2.g", Tensor::full({c}, 1.0));
    ps.add(prefix + ".ln2.b", Tensor::zeros({c}));
    ps.add(prefix + ".ffn.w1", xavier_init({c, 2 * c}, rng));
    ps.add(prefix + ".ffn.b1", Tensor::zeros({2 * c}));
    ps.add(prefix + ".ffn.w2", xavier_init({2 * c, c}, rng));
    ps.add(prefix + ".ffn.b2", Tensor::zeros({c}));
}

// One pre-norm block; kv = x for self-attention, encoder output for cross.
Tensor block(const Tensor& x, const Tensor& kv, bool cross, const std::string& prefix, const ParamStore& ps,
             const RunConfig& cfg, Tape* tape, EncodeDebug* debug) {
    Tensor h = layernorm_affine(x, ps.get(prefix + ".ln1.g"), ps.get(prefix + ".ln1.b"), tape);
    Tensor a = attention(h, cross ? kv : h, prefix + ".attn", ps, cfg, tape, debug);
    Tensor y = ops::add(x, a, tape);
    Tensor h2 = layernorm_affine(y, ps.get(prefix + ".ln2.g"), ps.get(prefix + ".ln2.b"), tape);
    return ops::add(y, ffn(h2, prefix + ".ffn", ps, tape), tape);
}

Tensor type_rows(TokenKind kind, int64_t count, const ParamStore& ps, Tape* tape) {
    std::vector<int64_t> ids(static_cast<size_t>(count), static_cast<int64_t>(kind));
    return ops::embed_lookup(ps.get("emb.type"), ids, tape);
}

Tensor frame_row(int64_t frame, const ParamStore& ps, const RunConfig& cfg, Tape* tape) {
    if (frame < 0 || frame >= cfg.data_frames)
        throw DataError(fmt::format("frame index {} outside the embedding table of {}", frame, cfg.data_frames));
    return ops::reshape(ops::embed_lookup(ps.get("emb.frame"), std::vector<int64_t>{frame}, tape),
                        {cfg.model_channels}, tape);
}

// Grid cells of one frame as (H*W) x C rows scaled by `factor` (or unscaled
// when factor is null), plus their row/col/frame/type embeddings. The raw
// rows also become the masked-feature targets.
void append_local_tokens(const Tensor& grid, int64_t frame, const Tensor* factor, std::vector<Tensor>& content,
                         std::vector<Tensor>& targets, std::vector<Tensor>& embeds, std::vector<TokenMeta>& meta,
                         const ParamStore& ps, const RunConfig& cfg, Tape* tape) {
    const int64_t g = cfg.model_grid;
    Tensor cells = ops::transpose2d(ops::reshape(grid, {cfg.model_channels, g * g}, tape), tape);
    targets.push_back(cells);
    content.push_back(factor ? ops::mul(cells, *factor, tape) : cells);

    std::vector<int64_t> rows(static_cast<size_t>(g * g)), cols(static_cast<size_t>(g * g));
    for (int64_t r = 0; r < g; ++r)
        for (int64_t c2 = 0; c2 < g; ++c2) {
            rows[static_cast<size_t>(r * g + c2)] = r;
            cols[static_cast<size_t>(r * g + c2)] = c2;
            meta.push_back({TokenKind::local, frame, r, c2});
        }
    Tensor pos = ops::add(ops::embed_lookup(ps.get("emb.row"), rows, tape),
                          ops::embed_lookup(ps.get("emb.col"), cols, tape), tape);
    pos = ops::add(pos, frame_row(frame, ps, cfg, tape), tape);
    Tensor type = ops::reshape(type_rows(TokenKind::local, 1, ps, tape), {cfg.model_channels}, tape);
    embeds.push_back(ops::add(pos, type, tape));
}

TokenBatch finish_batch(std::vector<Tensor> content, std::vector<Tensor> targets, std::vector<Tensor> embeds,
                        std::vector<TokenMeta> meta, Tape* tape) {
    std::vector<const Tensor*> cp, tp, ep;
    for (const Tensor& t : content) cp.push_back(&t);
    for (const Tensor& t : targets) tp.push_back(&t);
    for (const Tensor& t : embeds) ep.push_back(&t);
    TokenBatch batch;
    batch.content = ops::concat(cp, 0, tape);
    batch.targets = ops::concat(tp, 0, tape);
    batch.embeds = ops::concat(ep, 0, tape);
    batch.meta = std::move(meta);
    return batch;
}

void append_text_tokens(const QueryFeatures& query, std::vector<Tensor>& content, std::vector<Tensor>& targets,
                        std::vector<Tensor>& embeds, std::vector<TokenMeta>& meta, const ParamStore& ps, Tape* tape) {
    const int64_t len = query.per_token.shape[0];
    content.push_back(query.per_token);
    targets.push_back(query.per_token);
    embeds.push_back(type_rows(TokenKind::text, len, ps, tape));
    for (int64_t i = 0; i < len; ++i) meta.push_back({TokenKind::text, -1, -1, -1});
}

void append_cls_token(std::vector<Tensor>& content, std::vector<Tensor>& targets, std::vector<Tensor>& embeds,
                      std::vector<TokenMeta>& meta, const ParamStore& ps, Tape* tape) {
    Tensor row = ops::embed_lookup(ps.get("emb.cls"), std::vector<int64_t>{0}, tape);
    content.push_back(row);
    targets.push_back(row);
    embeds.push_back(type_rows(TokenKind::cls, 1, ps, tape));
    meta.push_back({TokenKind::cls, -1, -1, -1});
}

}  // namespace

void register_grounding_params(ParamStore& ps, const RunConfig& cfg, Rng& rng) {
    const int64_t c = cfg.model_channels;
    ps.add("emb.cls", normal_init({1, c}, rng, 0.02));
    ps.add("emb.type", normal_init({4, c}, rng, 0.02));
    ps.add("emb.row", normal_init({cfg.model_grid, c}, rng, 0.02));
    ps.add("emb.col", normal_init({cfg.model_grid, c}, rng, 0.02));
    ps.add("emb.frame", normal_init({cfg.data_frames, c}, rng, 0.02));
    ps.add("emb.mask", normal_init({1, c}, rng, 0.02));
    for (int64_t l = 0; l < cfg.model_enc_layers; ++l)
        register_block(ps, fmt::format("enc.tf.{}", l), c, cfg.model_heads, rng);
    ps.add("dec.queries", normal_init({cfg.model_queries, c}, rng, 0.02));
    ps.add("dec.frame", normal_init({cfg.data_frames, c}, rng, 0.02));
    for (int64_t l = 0; l < cfg.model_dec_layers; ++l)
        register_block(ps, fmt::format("dec.tf.{}", l), c, cfg.model_heads, rng);
    ps.add("heads.box.w1", xavier_init({c, c}, rng));
    ps.add("heads.box.b1", Tensor::zeros({c}));
    ps.add("heads.box.w2", xavier_init({c, 4}, rng));
    ps.add("heads.box.b2", Tensor::zeros({4}));
    ps.add("heads.p.w", xavier_init({c, 1}, rng));
    ps.add("heads.p.b", Tensor::zeros({1}));
    ps.add("heads.vtm.w", xavier_init({c, 1}, rng));
    ps.add("heads.vtm.b", Tensor::zeros({1}));
    for (const char* head : {"heads.mfm_t", "heads.mfm_v"}) {
        ps.add(fmt::format("{}.w1", head), xavier_init({c, c}, rng));
        ps.add(fmt::format("{}.b1", head), Tensor::zeros({c}));
        ps.add(fmt::format("{}.w2", head), xavier_init({c, c}, rng));
        ps.add(fmt::format("{}.b2", head), Tensor::zeros({c}));
    }
}

TokenBatch assemble_tokens(const InfoTree& tree, const CropResult& crop, const std::vector<Tensor>& frame_grids,
                           const QueryFeatures& query, const ParamStore& ps, const RunConfig& cfg, Tape* tape) {
    if (crop.leaves.empty()) throw DataError("assemble_tokens: branch has no leaves");
    std::vector<Tensor> content, targets, embeds;
    std::vector<TokenMeta> meta;
    append_cls_token(content, targets, embeds, meta, ps, tape);
    for (int32_t leaf_id : crop.leaves) {
        const TreeNode& leaf = tree.node(leaf_id);
        const int64_t frame = leaf.span_lo;
        Tensor factor = ops::scale(leaf.r_tv, leaf.weight, tape);
        append_local_tokens(frame_grids[static_cast<size_t>(frame)], frame, &factor, content, targets, embeds, meta,
                            ps, cfg, tape);
    }
    for (int32_t id : crop.surviving_internal) {
        const TreeNode& n = tree.node(id);
        content.push_back(ops::reshape(reweight_feature(tree, id, tape), {1, cfg.model_channels}, tape));
        targets.push_back(ops::reshape(n.feature, {1, cfg.model_channels}, tape));
        const int64_t center = (n.span_lo + n.span_hi) / 2;
        Tensor emb = ops::add(type_rows(TokenKind::global_node, 1, ps, tape),
                              ops::reshape(frame_row(center, ps, cfg, tape), {1, cfg.model_channels}, tape), tape);
        embeds.push_back(std::move(emb));
        meta.push_back({TokenKind::global_node, center, -1, -1});
    }
    append_text_tokens(query, content, targets, embeds, meta, ps, tape);
    return finish_batch(std::move(content), std::move(targets), std::move(embeds), std::move(meta), tape);
}

TokenBatch assemble_tokens_all_frames(const std::vector<Tensor>& frame_grids, const QueryFeatures& query,
                                      const ParamStore& ps, const RunConfig& cfg, Tape* tape) {
    if (frame_grids.empty()) throw DataError("assemble_tokens_all_frames: no frames");
    std::vector<Tensor> content, targets, embeds;
    std::vector<TokenMeta> meta;
    append_cls_token(content, targets, embeds, meta, ps, tape);
    for (size_t f = 0; f < frame_grids.size(); ++f)
        append_local_tokens(frame_grids[f], static_cast<int64_t>(f), nullptr, content, targets, embeds, meta, ps, cfg,
                            tape);
    append_text_tokens(query, content, targets, embeds, meta, ps, tape);
    return finish_batch(std::move(content), std::move(targets), std::move(embeds), std::move(meta), tape);
}

Tensor combine_tokens(const TokenBatch& batch, Tape* tape) { return ops::add(batch.content, batch.embeds, tape); }

MaskResult mask_tokens(const TokenBatch& batch, double rate, Rng& rng, const ParamStore& ps, Tape* tape) {
    if (rate < 0.0 || rate >= 1.0) throw UsageError(fmt::format("mask rate {} outside [0,1)", rate));
    const int64_t total = batch.content.shape[0];
    const int64_t maskable = total - 1;  // cls is never masked
    const int64_t n = static_cast<int64_t>(rate * static_cast<double>(maskable));
    MaskResult res;
    if (n == 0) {
        res.tokens = combine_tokens(batch, tape);
        return res;
    }
    for (int64_t i : rng.sample_indices(maskable, n)) res.masked.push_back(i + 1);

    Tensor keep = Tensor::full({total, 1}, 1.0);
    Tensor drop = Tensor::zeros({total, 1});
    for (int64_t i : res.masked) {
        keep.at(i) = 0.0;
        drop.at(i) = 1.0;
    }
    Tensor mask_rows = ops::embed_lookup(ps.get("emb.mask"), std::vector<int64_t>(static_cast<size_t>(total), 0), tape);
    Tensor masked_content =
        ops::add(ops::mul(batch.content, keep, tape), ops::mul(mask_rows, drop, tape), tape);
    res.tokens = ops::add(masked_content, batch.embeds, tape);
    return res;
}

Tensor encode(const Tensor& tokens, const ParamStore& ps, const RunConfig& cfg, Tape* tape, EncodeDebug* debug) {
    Tensor x = tokens;
    for (int64_t l = 0; l < cfg.model_enc_layers; ++l)
        x = block(x, x, false, fmt::format("enc.tf.{}", l), ps, cfg, tape, debug);
    return x;
}

Tensor mfm_loss(const Tensor& f_out, const TokenBatch& batch, const MaskResult& mask, const ParamStore& ps,
                Tape* tape) {
    if (mask.masked.empty()) return Tensor::scalar(0.0);
    std::vector<int64_t> text_ids, video_ids;
    for (int64_t i : mask.masked) {
        (batch.meta[static_cast<size_t>(i)].kind == TokenKind::text ? text_ids : video_ids).push_back(i);
    }
    const int64_t c = batch.content.shape[1];
    auto subset_loss = [&](const std::vector<int64_t>& ids, const char* head) -> Tensor {
        Tensor rows = ops::embed_lookup(f_out, ids, tape);
        Tensor h = ops::relu(
            ops::add(ops::matmul(rows, ps.get(fmt::format("{}.w1", head)), tape), ps.get(fmt::format("{}.b1", head)), tape),
            tape);
        Tensor rec =
            ops::add(ops::matmul(h, ps.get(fmt::format("{}.w2", head)), tape), ps.get(fmt::format("{}.b2", head)), tape);
        // the pre-mask rows stay on the graph, so the loss is differentiable end to end
        Tensor target = ops::embed_lookup(batch.content, ids, tape);
        Tensor diff = ops::sub(rec, target, tape);
        Tensor sq = ops::mul(diff, diff, tape);
        // mean over positions of the squared row L2 norm
        return ops::scale(ops::mean_lastdim(ops::mean_lastdim(sq, tape), tape), static_cast<double>(c), tape);
    };
    const double nt = static_cast<double>(text_ids.size()), nv = static_cast<double>(video_ids.size());
    if (text_ids.empty()) return subset_loss(video_ids, "heads.mfm_v");
    if (video_ids.empty()) return subset_loss(text_ids, "heads.mfm_t");
    Tensor lt = subset_loss(text_ids, "heads.mfm_t");
    Tensor lv = subset_loss(video_ids, "heads.mfm_v");
    return ops::scale(ops::add(ops::scale(lt, nt, tape), ops::scale(lv, nv, tape), tape), 1.0 / (nt + nv), tape);
}

Tensor vtm_logit(const Tensor& f_out, const ParamStore& ps, Tape* tape) {
    Tensor cls = ops::embed_lookup(f_out, std::vector<int64_t>{0}, tape);
    return ops::add(ops::matmul(cls, ps.get("heads.vtm.w"), tape), ps.get("heads.vtm.b"), tape);
}

std::vector<FramePredictions> decode_boxes(const Tensor& f_out, const std::vector<int64_t>& frames,
                                           const ParamStore& ps, const RunConfig& cfg, Tape* tape) {
    if (frames.empty()) throw DataError("decode_boxes: no frames");
    const int64_t k = cfg.model_queries;
    std::vector<Tensor> stacks;
    stacks.reserve(frames.size());
    for (int64_t f : frames)
        stacks.push_back(ops::add(ps.get("dec.queries"), frame_row(f, ps, cfg, tape), tape));
    std::vector<const Tensor*> parts;
    for (const Tensor& t : stacks) parts.push_back(&t);
    Tensor q = ops::concat(parts, 0, tape);  // (frames*K) x C
    for (int64_t l = 0; l < cfg.model_dec_layers; ++l)
        q = block(q, f_out, true, fmt::format("dec.tf.{}", l), ps, cfg, tape, nullptr);

    Tensor h = ops::relu(ops::add(ops::matmul(q, ps.get("heads.box.w1"), tape), ps.get("heads.box.b1"), tape), tape);
    Tensor boxes =
        ops::sigmoid(ops::add(ops::matmul(h, ps.get("heads.box.w2"), tape), ps.get("heads.box.b2"), tape), tape);
    Tensor logits = ops::add(ops::matmul(q, ps.get("heads.p.w"), tape), ps.get("heads.p.b"), tape);

    std::vector<FramePredictions> out;
    out.reserve(frames.size());
    for (size_t f = 0; f < frames.size(); ++f) {
        std::vector<int64_t> rows(static_cast<size_t>(k));
        for (int64_t i = 0; i < k; ++i) rows[static_cast<size_t>(i)] = static_cast<int64_t>(f) * k + i;
        out.push_back({frames[f], ops::embed_lookup(boxes, rows, tape), ops::embed_lookup(logits, rows, tape)});
    }
    return out;
}

int64_t select_box(const Tensor& prob_column) {
    if (prob_column.numel() == 0) throw ShapeError("select_box: empty candidate set");
    int64_t best = 0;
    for (int64_t i = 1; i < prob_column.shape[0]; ++i)
        if (prob_column.at(i) > prob_column.at(best)) best = i;
    return best;
}

}  // namespace tg
