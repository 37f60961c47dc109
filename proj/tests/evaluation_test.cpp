#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <optional>
#include <vector>

#include "treeground/common.hpp"
#include "treeground/evaluation.hpp"
#include "treeground/training.hpp"

using namespace tg;

namespace {

RunConfig eval_cfg() {
    RunConfig cfg;
    cfg.data_videos_train = 2;
    cfg.data_videos_eval = 3;
    cfg.data_frames = 4;
    cfg.data_frame_px = 8;
    cfg.data_signatures = 2;
    cfg.data_vocab = 16;
    cfg.model_channels = 8;
    cfg.model_grid = 2;
    cfg.model_relevance_dim = 4;
    cfg.model_enc_layers = 1;
    cfg.model_heads = 2;
    cfg.model_dec_layers = 1;
    cfg.model_queries = 2;
    return cfg;
}

}  // namespace

TEST_CASE("per-video accuracy uses strict thresholds on the mean IoU") {
    std::vector<std::optional<Box>> gt = {Box{0.0, 0.0, 0.5, 0.5}, Box{0.0, 0.0, 0.5, 0.5}};

    // both frames at IoU exactly 0.5: mean 0.5 clears 0.4, fails 0.5 (strict) and 0.6
    // overlap: pred shares 2/3 of a box that is 1/3 larger... build exact 0.5:
    // pred {0,0,0.25,0.5} vs gt {0,0,0.5,0.5}: inter 0.125, union 0.25 -> 0.5
    std::vector<Box> preds = {Box{0.0, 0.0, 0.25, 0.5}, Box{0.0, 0.0, 0.25, 0.5}};
    VideoAccuracy va = video_accuracy(preds, gt, false);
    CHECK(va.mean_iou == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(va.evaluable == 2);
    CHECK_FALSE(va.excluded);
    CHECK(va.accurate[0]);        // > 0.4
    CHECK_FALSE(va.accurate[1]);  // not > 0.5
    CHECK_FALSE(va.accurate[2]);

    // mean of perfect and disjoint is 0.5
    std::vector<Box> mixed = {Box{0.0, 0.0, 0.5, 0.5}, Box{0.6, 0.6, 0.9, 0.9}};
    VideoAccuracy vm = video_accuracy(mixed, gt, false);
    CHECK(vm.mean_iou == doctest::Approx(0.5).epsilon(1e-12));

    // nudging one prediction above the boundary flips the 0.5 flag
    std::vector<Box> better = {Box{0.0, 0.0, 0.26, 0.5}, Box{0.0, 0.0, 0.5, 0.5}};
    VideoAccuracy vb = video_accuracy(better, gt, false);
    CHECK(vb.accurate[1]);
}

TEST_CASE("absent frames are skipped by default or scored zero on request") {
    std::vector<std::optional<Box>> gt = {Box{0.0, 0.0, 0.5, 0.5}, std::nullopt};
    std::vector<Box> preds = {Box{0.0, 0.0, 0.5, 0.5}, Box{0.1, 0.1, 0.2, 0.2}};

    VideoAccuracy skip = video_accuracy(preds, gt, false);
    CHECK(skip.evaluable == 1);
    CHECK(skip.mean_iou == doctest::Approx(1.0).epsilon(1e-12));

    VideoAccuracy zero = video_accuracy(preds, gt, true);
    CHECK(zero.evaluable == 2);
    CHECK(zero.mean_iou == doctest::Approx(0.5).epsilon(1e-12));

    // a fully absent video is excluded unless absent counts as zero
    std::vector<std::optional<Box>> none = {std::nullopt, std::nullopt};
    CHECK(video_accuracy(preds, none, false).excluded);
    VideoAccuracy z2 = video_accuracy(preds, none, true);
    CHECK_FALSE(z2.excluded);
    CHECK(z2.mean_iou == 0.0);

    CHECK_THROWS_AS(video_accuracy({Box{}}, gt, false), DataError);  // count mismatch
}

TEST_CASE("prediction emits exactly one box per frame, deterministically") {
    RunConfig cfg = eval_cfg();
    Dataset ds = generate_dataset(cfg, 5);
    ParamStore ps = build_model(cfg);
    const VideoSample& v = ds.eval[0];
    std::vector<Box> a = predict_video(v, ps, cfg);
    REQUIRE(static_cast<int64_t>(a.size()) == v.frames);
    for (const Box& b : a) {
        CHECK(box_valid(b));
        // center and size are sigmoid-bounded, so corners stay in (-0.5, 1.5)
        CHECK(b.x_min > -0.5);
        CHECK(b.y_min > -0.5);
        CHECK(b.x_max < 1.5);
        CHECK(b.y_max < 1.5);
    }
    std::vector<Box> b = predict_video(v, ps, cfg);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].x_min == b[i].x_min);
        CHECK(a[i].y_max == b[i].y_max);
    }

    // the tree-ablated path also covers every frame
    RunConfig flat = cfg;
    flat.train_ablate_tree = true;
    std::vector<Box> c = predict_video(v, ps, flat);
    REQUIRE(static_cast<int64_t>(c.size()) == v.frames);
    for (const Box& bx : c) CHECK(box_valid(bx));
}

TEST_CASE("split evaluation aggregates only non-excluded videos") {
    RunConfig cfg = eval_cfg();
    Dataset ds = generate_dataset(cfg, 6);
    ParamStore ps = build_model(cfg);
    EvalReport rep = evaluate(ds.eval, ps, cfg);
    CHECK(rep.videos.size() == ds.eval.size());
    CHECK(rep.evaluated + rep.excluded == static_cast<int64_t>(ds.eval.size()));
    CHECK(rep.evaluated > 0);  // every video has at least one labeled frame
    CHECK(rep.excluded == 0);
    CHECK(rep.avg == doctest::Approx((rep.acc04 + rep.acc05 + rep.acc06) / 3.0).epsilon(1e-12));
    CHECK(rep.acc04 >= rep.acc05);
    CHECK(rep.acc05 >= rep.acc06);  // monotone in the threshold
    CHECK(rep.mean_iou >= 0.0);
    CHECK(rep.mean_iou <= 1.0);

    // hand-recompute the aggregates from the per-video rows
    int64_t h4 = 0, h5 = 0, h6 = 0;
    double isum = 0.0;
    for (const VideoAccuracy& va : rep.videos) {
        REQUIRE_FALSE(va.excluded);
        h4 += va.accurate[0];
        h5 += va.accurate[1];
        h6 += va.accurate[2];
        isum += va.mean_iou;
    }
    const double n = static_cast<double>(rep.evaluated);
    CHECK(rep.acc04 == doctest::Approx(static_cast<double>(h4) / n).epsilon(1e-12));
    CHECK(rep.acc05 == doctest::Approx(static_cast<double>(h5) / n).epsilon(1e-12));
    CHECK(rep.acc06 == doctest::Approx(static_cast<double>(h6) / n).epsilon(1e-12));
    CHECK(rep.mean_iou == doctest::Approx(isum / n).epsilon(1e-12));

    // evaluation does not mutate parameters
    ParamStore before = ps;
    evaluate(ds.eval, ps, cfg);
    for (size_t i = 0; i < ps.size(); ++i) CHECK(ps.item(i).second.same_values(before.item(i).second));

    // empty split: zero everywhere, no crash
    EvalReport empty = evaluate({}, ps, cfg);
    CHECK(empty.evaluated == 0);
    CHECK(empty.avg == 0.0);
}

TEST_CASE("report table is two aligned rows with the split name") {
    EvalReport rep;
    rep.evaluated = 48;
    rep.excluded = 2;
    rep.acc04 = 0.75;
    rep.acc05 = 0.5;
    rep.acc06 = 0.25;
    rep.avg = 0.5;
    rep.mean_iou = 0.4321;
    std::string s = report_table(rep, "eval");
    CHECK(s.find("split") != std::string::npos);
    CHECK(s.find("Acc@0.4") != std::string::npos);
    CHECK(s.find("Acc@0.5") != std::string::npos);
    CHECK(s.find("Acc@0.6") != std::string::npos);
    CHECK(s.find("mIoU") != std::string::npos);
    CHECK(s.find("eval") != std::string::npos);
    CHECK(s.find("48") != std::string::npos);
    CHECK(s.find("0.7500") != std::string::npos);
    CHECK(s.find("0.4321") != std::string::npos);
    size_t lines = 0;
    for (char c : s)
        if (c == '\n') ++lines;
    CHECK(lines == 2);
    // both rows share the same column layout
    const size_t nl = s.find('\n');
    CHECK(s.substr(0, nl).size() == s.substr(nl + 1, s.size() - nl - 2).size());
}
