#include "treeground/evaluation.hpp"

#include <numeric>

#include <fmt/format.h>

#include "treeground/common.hpp"
#include "treeground/encoders.hpp"
#include "treeground/grounding.hpp"
#include "treeground/info_tree.hpp"

namespace tg {

namespace {

Box frame_box(const FramePredictions& preds) {
    const int64_t k = select_box(preds.prob_logits);
    return box_from_cxcywh(preds.boxes.at2(k, 0), preds.boxes.at2(k, 1), preds.boxes.at2(k, 2),
                           preds.boxes.at2(k, 3));
}

}  // namespace

std::vector<Box> predict_video(const VideoSample& v, const ParamStore& ps, const RunConfig& cfg) {
    std::vector<Box> out(static_cast<size_t>(v.frames));
    std::vector<Tensor> grids = encode_frames(v.raw, ps, cfg, nullptr);
    QueryFeatures query = encode_query(v.tokens, ps, cfg, nullptr);

    if (cfg.train_ablate_tree) {
        TokenBatch batch = assemble_tokens_all_frames(grids, query, ps, cfg, nullptr);
        Tensor f_out = encode(combine_tokens(batch, nullptr), ps, cfg, nullptr);
        std::vector<int64_t> frames(static_cast<size_t>(v.frames));
        std::iota(frames.begin(), frames.end(), 0);
        for (const auto& p : decode_boxes(f_out, frames, ps, cfg, nullptr))
            out[static_cast<size_t>(p.frame)] = frame_box(p);
        return out;
    }

    std::vector<Tensor> pooled;
    pooled.reserve(grids.size());
    for (const Tensor& g : grids) pooled.push_back(pool_node_feature(g, nullptr));
    const TreeConfig tcfg = tree_config(cfg);
    InfoTree tree = build_tree(pooled, query.pooled, ps, tcfg, nullptr);
    for (const Branch& branch : select_branches_inference(tree, tcfg)) {
        const CropResult crop = crop_branch(tree, branch, tcfg);
        TokenBatch batch = assemble_tokens(tree, crop, grids, query, ps, cfg, nullptr);
        Tensor f_out = encode(combine_tokens(batch, nullptr), ps, cfg, nullptr);
        std::vector<int64_t> frames;
        for (int32_t leaf : crop.leaves) frames.push_back(tree.node(leaf).span_lo);
        for (const auto& p : decode_boxes(f_out, frames, ps, cfg, nullptr))
            out[static_cast<size_t>(p.frame)] = frame_box(p);
    }
    return out;
}

VideoAccuracy video_accuracy(const std::vector<Box>& preds, const std::vector<std::optional<Box>>& gt,
                             bool absent_as_zero) {
    if (preds.size() != gt.size())
        throw DataError(fmt::format("{} predictions for {} frames", preds.size(), gt.size()));
    VideoAccuracy va;
    double sum = 0.0;
    for (size_t f = 0; f < gt.size(); ++f) {
        if (gt[f]) {
            sum += iou(preds[f], *gt[f]);
            ++va.evaluable;
        } else if (absent_as_zero) {
            ++va.evaluable;  // scored 0
        }
    }
    if (va.evaluable == 0) {
        va.excluded = true;
        return va;
    }
    va.mean_iou = sum / static_cast<double>(va.evaluable);
    for (size_t t = 0; t < kAccThresholds.size(); ++t) va.accurate[t] = va.mean_iou > kAccThresholds[t];
    return va;
}

EvalReport evaluate(const std::vector<VideoSample>& split, const ParamStore& ps, const RunConfig& cfg) {
    EvalReport rep;
    const bool absent_zero = cfg.eval_absent_frames == "zero";
    std::array<int64_t, 3> hits{};
    double iou_sum = 0.0;
    for (const VideoSample& v : split) {
        VideoAccuracy va = video_accuracy(predict_video(v, ps, cfg), v.gt, absent_zero);
        if (va.excluded) {
            ++rep.excluded;
        } else {
            ++rep.evaluated;
            iou_sum += va.mean_iou;
            for (size_t t = 0; t < hits.size(); ++t) hits[t] += va.accurate[t] ? 1 : 0;
        }
        rep.videos.push_back(va);
    }
    if (rep.evaluated > 0) {
        const double n = static_cast<double>(rep.evaluated);
        rep.acc04 = static_cast<double>(hits[0]) / n;
        rep.acc05 = static_cast<double>(hits[1]) / n;
        rep.acc06 = static_cast<double>(hits[2]) / n;
        rep.mean_iou = iou_sum / n;
    }
    rep.avg = (rep.acc04 + rep.acc05 + rep.acc06) / 3.0;
    return rep;
}

std::string report_table(const EvalReport& rep, const std::string& split_name) {
    std::string out;
    out += fmt::format("{:<8} {:>7} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n", "split", "videos", "excluded", "Acc@0.4",
                       "Acc@0.5", "Acc@0.6", "Avg", "mIoU");
    out += fmt::format("{:<8} {:>7} {:>8} {:>8.4f} {:>8.4f} {:>8.4f} {:>8.4f} {:>8.4f}\n", split_name, rep.evaluated,
                       rep.excluded, rep.acc04, rep.acc05, rep.acc06, rep.avg, rep.mean_iou);
    return out;
}

}  // namespace tg
