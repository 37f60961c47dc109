#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "test_util.hpp"
#include "treeground/common.hpp"
#include "treeground/grounding.hpp"

using namespace tg;
using namespace tgtest;

namespace {

RunConfig tiny_cfg() {
    RunConfig cfg;
    cfg.model_channels = 4;
    cfg.model_grid = 2;
    cfg.model_heads = 2;
    cfg.model_enc_layers = 1;
    cfg.model_dec_layers = 1;
    cfg.model_queries = 3;
    cfg.data_frames = 8;
    cfg.data_vocab = 12;
    return cfg;
}

ParamStore grounding_params(const RunConfig& cfg, uint64_t seed) {
    Rng rng(seed);
    ParamStore ps;
    register_grounding_params(ps, cfg, rng);
    return ps;
}

QueryFeatures fake_query(int64_t len, int64_t c, Rng& rng) {
    QueryFeatures q;
    for (int64_t i = 0; i < len; ++i) q.token_ids.push_back(i + 2);
    q.per_token = rand_tensor({len, c}, rng);
    q.pooled = rand_tensor({c}, rng);
    return q;
}

TreeNode mk_leaf(int32_t id, double rtv, double weight, const Tensor& f) {
    TreeNode n;
    n.id = id;
    n.leaf = true;
    n.span_lo = n.span_hi = id;
    n.r_tv = Tensor::scalar(rtv);
    n.weight = weight;
    n.feature = f;
    return n;
}

struct Fixture {
    RunConfig cfg = tiny_cfg();
    ParamStore ps;
    InfoTree tree;
    CropResult crop;
    std::vector<Tensor> grids;
    QueryFeatures query;

    explicit Fixture(uint64_t seed) {
        Rng rng(seed);
        ps = grounding_params(cfg, seed);
        const int64_t c = cfg.model_channels;
        tree.leaf_count = 2;
        tree.nodes.push_back(mk_leaf(0, 0.8, 1.0, rand_tensor({c}, rng)));
        tree.nodes.push_back(mk_leaf(1, 0.4, 0.5, rand_tensor({c}, rng)));
        TreeNode internal;
        internal.id = 2;
        internal.leaf = false;
        internal.child_a = 0;
        internal.child_b = 1;
        internal.span_lo = 0;
        internal.span_hi = 1;
        internal.r_tv = Tensor::scalar(0.9);
        internal.feature = rand_tensor({c}, rng);
        tree.nodes.push_back(internal);
        tree.root = 2;
        crop.leaves = {0, 1};
        crop.surviving_internal = {2};
        grids.push_back(rand_tensor({c, cfg.model_grid, cfg.model_grid}, rng));
        grids.push_back(rand_tensor({c, cfg.model_grid, cfg.model_grid}, rng));
        query = fake_query(3, c, rng);
    }
};

}  // namespace

TEST_CASE("token batch layout: cls, leaf cells, node tokens, text") {
    Fixture fx(5);
    const int64_t g = fx.cfg.model_grid, c = fx.cfg.model_channels;
    TokenBatch batch = assemble_tokens(fx.tree, fx.crop, fx.grids, fx.query, fx.ps, fx.cfg, nullptr);
    const int64_t t_expect = 1 + 2 * g * g + 1 + 3;
    REQUIRE(batch.content.shape == Shape{t_expect, c});
    REQUIRE(batch.embeds.shape == Shape{t_expect, c});
    REQUIRE(static_cast<int64_t>(batch.meta.size()) == t_expect);

    CHECK(batch.meta[0].kind == TokenKind::cls);
    for (int64_t f = 0; f < 2; ++f)
        for (int64_t r = 0; r < g; ++r)
            for (int64_t col = 0; col < g; ++col) {
                const TokenMeta& m = batch.meta[static_cast<size_t>(1 + f * g * g + r * g + col)];
                CHECK(m.kind == TokenKind::local);
                CHECK(m.frame == f);
                CHECK(m.row == r);
                CHECK(m.col == col);
            }
    const TokenMeta& gm = batch.meta[static_cast<size_t>(1 + 2 * g * g)];
    CHECK(gm.kind == TokenKind::global_node);
    CHECK(gm.frame == 0);  // span [0,1] centers on frame 0
    for (int64_t i = t_expect - 3; i < t_expect; ++i) CHECK(batch.meta[static_cast<size_t>(i)].kind == TokenKind::text);

    // local content = grid cell scaled by r_tv * weight
    for (int64_t r = 0; r < g; ++r)
        for (int64_t col = 0; col < g; ++col)
            for (int64_t ch = 0; ch < c; ++ch) {
                const double cell = fx.grids[1].data[static_cast<size_t>(ch * g * g + r * g + col)];
                const double got = batch.content.at2(1 + g * g + r * g + col, ch);
                CHECK(got == doctest::Approx(cell * 0.4 * 0.5).epsilon(1e-12));
            }

    // node token content = feature * r_tv * weight
    for (int64_t ch = 0; ch < c; ++ch)
        CHECK(batch.content.at2(1 + 2 * g * g, ch) ==
              doctest::Approx(fx.tree.node(2).feature.at(ch) * 0.9).epsilon(1e-12));

    // text rows pass through verbatim
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t ch = 0; ch < c; ++ch)
            CHECK(batch.content.at2(t_expect - 3 + i, ch) == fx.query.per_token.at2(i, ch));

    // a local embed row is the sum of row/col/frame/type embeddings
    const Tensor& er = fx.ps.get("emb.row");
    const Tensor& ec = fx.ps.get("emb.col");
    const Tensor& ef = fx.ps.get("emb.frame");
    const Tensor& et = fx.ps.get("emb.type");
    for (int64_t ch = 0; ch < c; ++ch) {
        const double want = er.at2(1, ch) + ec.at2(0, ch) + ef.at2(1, ch) + et.at2(1, ch);
        CHECK(batch.embeds.at2(1 + g * g + 1 * g + 0, ch) == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("token counts follow the layout formula across random shapes") {
    Rng rng(62);
    for (int trial = 0; trial < 50; ++trial) {
        RunConfig cfg = tiny_cfg();
        cfg.model_grid = 1 + static_cast<int64_t>(rng.below(3));
        cfg.data_frames = 8;
        ParamStore ps = grounding_params(cfg, 100 + trial);
        const int64_t c = cfg.model_channels;
        const int64_t leaves = 1 + static_cast<int64_t>(rng.below(4));
        const int64_t internals = static_cast<int64_t>(rng.below(3));
        const int64_t text = 1 + static_cast<int64_t>(rng.below(5));

        InfoTree tree;
        tree.leaf_count = leaves;
        CropResult crop;
        for (int64_t i = 0; i < leaves; ++i) {
            tree.nodes.push_back(mk_leaf(static_cast<int32_t>(i), 0.5, 1.0, rand_tensor({c}, rng)));
            crop.leaves.push_back(static_cast<int32_t>(i));
        }
        for (int64_t i = 0; i < internals; ++i) {
            TreeNode n;
            n.id = static_cast<int32_t>(leaves + i);
            n.leaf = false;
            n.child_a = 0;
            n.child_b = 1;
            n.span_lo = 0;
            n.span_hi = leaves - 1;
            n.r_tv = Tensor::scalar(0.5);
            n.feature = rand_tensor({c}, rng);
            tree.nodes.push_back(n);
            crop.surviving_internal.push_back(n.id);
        }
        tree.root = static_cast<int32_t>(tree.nodes.size()) - 1;
        std::vector<Tensor> grids;
        for (int64_t i = 0; i < leaves; ++i)
            grids.push_back(rand_tensor({c, cfg.model_grid, cfg.model_grid}, rng));
        QueryFeatures q = fake_query(text, c, rng);
        TokenBatch batch = assemble_tokens(tree, crop, grids, q, ps, cfg, nullptr);
        CHECK(batch.content.shape[0] == 1 + leaves * cfg.model_grid * cfg.model_grid + internals + text);
    }
}

TEST_CASE("tree-ablated layout feeds every frame unweighted with no node tokens") {
    Fixture fx(6);
    const int64_t g = fx.cfg.model_grid, c = fx.cfg.model_channels;
    TokenBatch batch = assemble_tokens_all_frames(fx.grids, fx.query, fx.ps, fx.cfg, nullptr);
    CHECK(batch.content.shape[0] == 1 + 2 * g * g + 3);
    for (const TokenMeta& m : batch.meta) CHECK(m.kind != TokenKind::global_node);
    // unweighted: content equals the raw grid cell
    for (int64_t ch = 0; ch < c; ++ch)
        CHECK(batch.content.at2(1 + 1 * g + 0, ch) ==
              fx.grids[0].data[static_cast<size_t>(ch * g * g + 1 * g + 0)]);
    CHECK_THROWS_AS(assemble_tokens_all_frames({}, fx.query, fx.ps, fx.cfg, nullptr), DataError);
}

TEST_CASE("frame index outside the embedding table is rejected") {
    Fixture fx(7);
    Rng rng(1);
    Tensor f_out = rand_tensor({5, 4}, rng);
    CHECK_THROWS_AS(decode_boxes(f_out, {fx.cfg.data_frames}, fx.ps, fx.cfg, nullptr), DataError);
}

TEST_CASE("masking count, cls exemption, and row identities") {
    Fixture fx(8);
    TokenBatch batch = assemble_tokens(fx.tree, fx.crop, fx.grids, fx.query, fx.ps, fx.cfg, nullptr);
    const int64_t total = batch.content.shape[0];  // 13
    Tensor plain = combine_tokens(batch, nullptr);

    Rng mr(77);
    MaskResult res = mask_tokens(batch, 0.25, mr, fx.ps, nullptr);
    const int64_t want = static_cast<int64_t>(0.25 * static_cast<double>(total - 1));
    REQUIRE(static_cast<int64_t>(res.masked.size()) == want);
    for (size_t i = 0; i < res.masked.size(); ++i) {
        CHECK(res.masked[i] >= 1);  // cls never masked
        if (i > 0) CHECK(res.masked[i] > res.masked[i - 1]);
    }

    std::vector<bool> is_masked(static_cast<size_t>(total), false);
    for (int64_t i : res.masked) is_masked[static_cast<size_t>(i)] = true;
    const Tensor& me = fx.ps.get("emb.mask");
    for (int64_t i = 0; i < total; ++i)
        for (int64_t j = 0; j < batch.content.shape[1]; ++j) {
            if (is_masked[static_cast<size_t>(i)])
                CHECK(res.tokens.at2(i, j) == me.at2(0, j) + batch.embeds.at2(i, j));
            else
                CHECK(res.tokens.at2(i, j) == plain.at2(i, j));  // bit-identical
        }
}

TEST_CASE("mask rate edge cases") {
    Fixture fx(9);
    TokenBatch batch = assemble_tokens(fx.tree, fx.crop, fx.grids, fx.query, fx.ps, fx.cfg, nullptr);
    Rng mr(5);
    MaskResult none = mask_tokens(batch, 0.0, mr, fx.ps, nullptr);
    CHECK(none.masked.empty());
    CHECK(none.tokens.same_values(combine_tokens(batch, nullptr)));

    // rate small enough to round down to zero masks
    MaskResult tiny = mask_tokens(batch, 0.01, mr, fx.ps, nullptr);
    CHECK(tiny.masked.empty());

    CHECK_THROWS_AS(mask_tokens(batch, 1.0, mr, fx.ps, nullptr), UsageError);
    CHECK_THROWS_AS(mask_tokens(batch, -0.1, mr, fx.ps, nullptr), UsageError);
}

TEST_CASE("masked-feature loss against a plain-double oracle") {
    Fixture fx(10);
    const int64_t c = fx.cfg.model_channels;
    TokenBatch batch = assemble_tokens(fx.tree, fx.crop, fx.grids, fx.query, fx.ps, fx.cfg, nullptr);
    Rng mr(13);
    MaskResult res = mask_tokens(batch, 0.5, mr, fx.ps, nullptr);  // 6 of 12 maskable
    REQUIRE(res.masked.size() >= 2);
    Rng fr(14);
    Tensor f_out = rand_tensor({batch.content.shape[0], c}, fr);

    Tensor got = mfm_loss(f_out, batch, res, fx.ps, nullptr);
    REQUIRE(got.is_scalar());

    auto mlp = [&](const char* head, int64_t row, int64_t j) {
        const Tensor& w1 = fx.ps.get(std::string(head) + ".w1");
        const Tensor& b1 = fx.ps.get(std::string(head) + ".b1");
        const Tensor& w2 = fx.ps.get(std::string(head) + ".w2");
        const Tensor& b2 = fx.ps.get(std::string(head) + ".b2");
        std::vector<double> h(static_cast<size_t>(c), 0.0);
        for (int64_t k = 0; k < c; ++k) {
            double s = b1.at(k);
            for (int64_t p = 0; p < c; ++p) s += f_out.at2(row, p) * w1.at2(p, k);
            h[static_cast<size_t>(k)] = s > 0.0 ? s : 0.0;
        }
        double s = b2.at(j);
        for (int64_t p = 0; p < c; ++p) s += h[static_cast<size_t>(p)] * w2.at2(p, j);
        return s;
    };
    double total_err = 0.0;
    for (int64_t id : res.masked) {
        const bool is_text = batch.meta[static_cast<size_t>(id)].kind == TokenKind::text;
        const char* head = is_text ? "heads.mfm_t" : "heads.mfm_v";
        for (int64_t j = 0; j < c; ++j) {
            const double d = mlp(head, id, j) - batch.content.at2(id, j);
            total_err += d * d;
        }
    }
    const double want = total_err / static_cast<double>(res.masked.size());
    CHECK(got.value() == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("masked-feature loss is zero without masks and exact with zeroed heads") {
    Fixture fx(11);
    const int64_t c = fx.cfg.model_channels;
    TokenBatch batch = assemble_tokens(fx.tree, fx.crop, fx.grids, fx.query, fx.ps, fx.cfg, nullptr);
    MaskResult empty;
    empty.tokens = combine_tokens(batch, nullptr);
    Rng er(2);
    Tensor f_any = rand_tensor({batch.content.shape[0], c}, er);
    Tensor z = mfm_loss(f_any, batch, empty, fx.ps, nullptr);
    CHECK(z.value() == 0.0);

    // zeroed reconstruction heads: loss = mean squared norm of the masked content rows
    for (const char* name : {"heads.mfm_t.w1", "heads.mfm_t.b1", "heads.mfm_t.w2", "heads.mfm_t.b2",
                             "heads.mfm_v.w1", "heads.mfm_v.b1", "heads.mfm_v.w2", "heads.mfm_v.b2"}) {
        Tensor& t = fx.ps.get(name);
        std::fill(t.data.begin(), t.data.end(), 0.0);
    }
    Rng mr(15);
    MaskResult res = mask_tokens(batch, 0.4, mr, fx.ps, nullptr);
    REQUIRE_FALSE(res.masked.empty());
    Rng fr(16);
    Tensor f_out = rand_tensor({batch.content.shape[0], c}, fr);
    Tensor got = mfm_loss(f_out, batch, res, fx.ps, nullptr);
    double want = 0.0;
    for (int64_t id : res.masked)
        for (int64_t j = 0; j < c; ++j) want += batch.content.at2(id, j) * batch.content.at2(id, j);
    want /= static_cast<double>(res.masked.size());
    CHECK(got.value() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("matching logit reads only the cls row") {
    Fixture fx(12);
    const int64_t c = fx.cfg.model_channels;
    Rng rng(17);
    Tensor f_out = rand_tensor({5, c}, rng);
    Tensor logit = vtm_logit(f_out, fx.ps, nullptr);
    REQUIRE(logit.shape == Shape{1, 1});
    const Tensor& w = fx.ps.get("heads.vtm.w");
    double want = fx.ps.get("heads.vtm.b").at(0);
    for (int64_t j = 0; j < c; ++j) want += f_out.at2(0, j) * w.at2(j, 0);
    CHECK(logit.value() == doctest::Approx(want).epsilon(1e-12));

    // rows other than cls do not matter
    Tensor other = f_out;
    for (int64_t j = 0; j < c; ++j) other.at2(3, j) += 10.0;
    CHECK(vtm_logit(other, fx.ps, nullptr).value() == logit.value());

    // zeroed head lands at sigma(0) = 0.5
    Tensor& wz = fx.ps.get("heads.vtm.w");
    std::fill(wz.data.begin(), wz.data.end(), 0.0);
    Tensor zl = vtm_logit(f_out, fx.ps, nullptr);
    CHECK(ops::sigmoid(zl, nullptr).value() == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("box decoding emits K bounded candidates per requested frame") {
    Fixture fx(13);
    const int64_t c = fx.cfg.model_channels, k = fx.cfg.model_queries;
    Rng rng(18);
    Tensor f_out = rand_tensor({13, c}, rng);
    auto preds = decode_boxes(f_out, {2, 5}, fx.ps, fx.cfg, nullptr);
    REQUIRE(preds.size() == 2);
    CHECK(preds[0].frame == 2);
    CHECK(preds[1].frame == 5);
    for (const FramePredictions& p : preds) {
        REQUIRE(p.boxes.shape == Shape{k, 4});
        REQUIRE(p.prob_logits.shape == Shape{k, 1});
        for (double v : p.boxes.data) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
        }
    }
    // different frames get different query stacks
    CHECK_FALSE(preds[0].boxes.same_values(preds[1].boxes));
    CHECK_THROWS_AS(decode_boxes(f_out, {}, fx.ps, fx.cfg, nullptr), DataError);
}

TEST_CASE("candidate choice takes the highest confidence, lowest index on ties") {
    Tensor col({3, 1}, {0.3, 0.9, 0.9});
    CHECK(select_box(col) == 1);
    Tensor single({1, 1}, {-4.0});
    CHECK(select_box(single) == 0);
    CHECK_THROWS_AS(select_box(Tensor{}), ShapeError);

    // monotone transforms leave the choice unchanged
    Rng rng(19);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor logits = rand_tensor({5, 1}, rng, -3.0, 3.0);
        Tensor probs = ops::sigmoid(logits, nullptr);
        CHECK(select_box(logits) == select_box(probs));
    }
}

TEST_CASE("zero-depth encoder is the identity; attention rows are stochastic") {
    Fixture fx(14);
    RunConfig cfg0 = fx.cfg;
    cfg0.model_enc_layers = 0;
    Rng rng(20);
    Tensor x = rand_tensor({6, fx.cfg.model_channels}, rng);
    CHECK(encode(x, fx.ps, cfg0, nullptr).same_values(x));

    RunConfig cfg2 = fx.cfg;
    cfg2.model_enc_layers = 1;
    EncodeDebug dbg;
    Tensor y = encode(x, fx.ps, cfg2, nullptr, &dbg);
    CHECK(y.shape == x.shape);
    REQUIRE(static_cast<int64_t>(dbg.attentions.size()) == cfg2.model_enc_layers * cfg2.model_heads);
    for (const Tensor& a : dbg.attentions) {
        REQUIRE(a.shape == Shape{6, 6});
        for (int64_t r = 0; r < 6; ++r) {
            double s = 0.0;
            for (int64_t cc = 0; cc < 6; ++cc) s += a.at2(r, cc);
            CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("grounding path gradients match finite differences") {
    RunConfig cfg = tiny_cfg();
    cfg.model_enc_layers = 1;
    cfg.model_dec_layers = 1;
    ParamStore base = grounding_params(cfg, 23);
    Rng rng(24);
    std::vector<Tensor> grids = {rand_tensor({cfg.model_channels, 2, 2}, rng)};
    QueryFeatures query = fake_query(2, cfg.model_channels, rng);

    const std::vector<std::string> subst = {"emb.mask",      "emb.row",       "enc.tf.0.attn.h0.wq",
                                            "enc.tf.0.ffn.w1", "heads.mfm_v.w2", "heads.vtm.w",
                                            "dec.queries",   "heads.box.w2"};
    std::vector<Tensor> inputs;
    for (const std::string& name : subst) inputs.push_back(base.get(name));

    auto build = [&](Tape* tape, const std::vector<Tensor>& xs) {
        ParamStore ps;
        for (size_t i = 0; i < base.size(); ++i) {
            const auto& [name, t] = base.item(i);
            bool replaced = false;
            for (size_t s = 0; s < subst.size(); ++s)
                if (name == subst[s]) {
                    ps.add(name, xs[s]);
                    replaced = true;
                    break;
                }
            if (!replaced) ps.add(name, t);
        }
        TokenBatch batch = assemble_tokens_all_frames(grids, query, ps, cfg, tape);
        Rng mr(99);
        MaskResult m = mask_tokens(batch, 0.5, mr, ps, tape);
        Tensor f_out = encode(m.tokens, ps, cfg, tape);
        Tensor mfm = mfm_loss(f_out, batch, m, ps, tape);
        Tensor vtm = ops::mean_lastdim(vtm_logit(f_out, ps, tape), tape);
        auto preds = decode_boxes(f_out, {0}, ps, cfg, tape);
        Tensor flat = ops::reshape(preds[0].boxes, {1, cfg.model_queries * 4}, tape);
        Tensor boxes = ops::mean_lastdim(flat, tape);
        Tensor vtm1 = ops::reshape(vtm, {1}, tape);
        return ops::add(ops::add(mfm, vtm1, tape), boxes, tape);
    };
    FdReport rep = fd_check(build, inputs, 1e-5, 40);
    INFO("max rel err ", rep.max_rel, " over ", rep.compared, " coords");
    CHECK(rep.ok());
}
