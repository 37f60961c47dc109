#include "treeground/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <ostream>

#include <fmt/format.h>

#include "treeground/box.hpp"
#include "treeground/common.hpp"
#include "treeground/encoders.hpp"
#include "treeground/evaluation.hpp"
#include "treeground/info_tree.hpp"

namespace tg {

LabelAccessor::LabelAccessor(const VideoSample& video)
    : video_(&video), counts_(static_cast<size_t>(video.frames), 0) {}

Box LabelAccessor::read_box(int64_t frame) {
    if (frame < 0 || frame >= video_->frames)
        throw DataError(fmt::format("label read for frame {} outside video of {} frames", frame, video_->frames));
    ++counts_[static_cast<size_t>(frame)];
    if (frame != video_->one_shot_frame)
        throw DataError(fmt::format("label read for frame {} but only frame {} is labeled", frame,
                                    video_->one_shot_frame));
    return video_->one_shot_box;
}

TrainSample sample_mismatch(const std::vector<VideoSample>& pool, size_t index, double rate, Rng& rng) {
    if (pool.empty()) throw DataError("mismatch sampling over an empty pool");
    const VideoSample& own = pool[index];
    TrainSample s;
    s.video = &own;
    if (pool.size() == 1) {
        static bool warned = false;
        if (!warned) {
            std::fputs("warning: single-video pool, query mismatch sampling disabled\n", stderr);
            warned = true;
        }
        s.is_matched = true;
        s.query = own.tokens;
        return s;
    }
    if (rng.coin(rate)) {
        int64_t donor = rng.below(static_cast<int64_t>(pool.size()) - 1);
        if (donor >= static_cast<int64_t>(index)) ++donor;
        s.is_matched = false;
        s.query = pool[static_cast<size_t>(donor)].tokens;
    } else {
        s.is_matched = true;
        s.query = own.tokens;
    }
    return s;
}

namespace {

// -ln sigmoid(z), numerically stable for large |z|.
double neg_log_sigmoid(double z) { return std::max(-z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

}  // namespace

int64_t match_predictions(const FramePredictions& preds, const Box& gt) {
    const int64_t k = preds.boxes.shape[0];
    const auto g = box_to_cxcywh(gt);
    int64_t best = 0;
    double best_cost = std::numeric_limits<double>::infinity();
    for (int64_t i = 0; i < k; ++i) {
        const double cx = preds.boxes.at2(i, 0), cy = preds.boxes.at2(i, 1);
        const double w = preds.boxes.at2(i, 2), h = preds.boxes.at2(i, 3);
        const double l1 = std::abs(cx - g[0]) + std::abs(cy - g[1]) + std::abs(w - g[2]) + std::abs(h - g[3]);
        const double cost = l1 + (1.0 - iou(box_from_cxcywh(cx, cy, w, h), gt)) + neg_log_sigmoid(preds.prob_logits.at(i));
        if (cost < best_cost) {
            best_cost = cost;
            best = i;
        }
    }
    return best;
}

namespace {

// max(a, c) and min(a, c) against a constant, built from relu so the
// subgradient at the kink matches relu's (0 on the flat side).
Tensor max_const(const Tensor& a, double c, Tape* t) {
    Tensor cv = Tensor::scalar(c);
    return ops::add(ops::relu(ops::sub(a, cv, t), t), cv, t);
}

Tensor min_const(const Tensor& a, double c, Tape* t) {
    return ops::sub(a, ops::relu(ops::sub(a, Tensor::scalar(c), t), t), t);
}

}  // namespace

DetectionLoss detection_loss(const FramePredictions& preds, int64_t matched, const Box& gt, Tape* tape) {
    const int64_t ids[1] = {matched};
    Tensor row = ops::embed_lookup(preds.boxes, ids, tape);  // 1 x 4 center form
    const auto g = box_to_cxcywh(gt);
    Tensor gt_row({4}, {g[0], g[1], g[2], g[3]});
    Tensor l1 = ops::scale(ops::mean_lastdim(ops::abs_compose(ops::sub(row, gt_row, tape), tape), tape), 4.0, tape);

    Tensor col = ops::transpose2d(row, tape);  // 4 x 1
    const auto coord = [&](int64_t i) {
        const int64_t ci[1] = {i};
        return ops::embed_lookup(col, ci, tape);  // 1 x 1
    };
    Tensor cx = coord(0), cy = coord(1), w = coord(2), h = coord(3);
    Tensor hw = ops::scale(w, 0.5, tape), hh = ops::scale(h, 0.5, tape);
    Tensor x0 = ops::sub(cx, hw, tape), x1 = ops::add(cx, hw, tape);
    Tensor y0 = ops::sub(cy, hh, tape), y1 = ops::add(cy, hh, tape);

    Tensor iw = ops::relu(ops::sub(min_const(x1, gt.x_max, tape), max_const(x0, gt.x_min, tape), tape), tape);
    Tensor ih = ops::relu(ops::sub(min_const(y1, gt.y_max, tape), max_const(y0, gt.y_min, tape), tape), tape);
    Tensor inter = ops::mul(iw, ih, tape);
    // Union stays positive: the ground-truth area is a positive constant.
    Tensor uni = ops::sub(ops::add(ops::mul(w, h, tape), Tensor::scalar(box_area(gt)), tape), inter, tape);
    Tensor iou_term = ops::sub(Tensor::scalar(1.0), ops::div(inter, uni, tape), tape);

    Tensor targets = Tensor::zeros({preds.prob_logits.shape[0], 1});
    targets.at(matched) = 1.0;
    Tensor cls = ops::bce_with_logits(preds.prob_logits, targets, tape);
    return {l1, iou_term, cls};
}

ForwardLosses forward_losses(const RunConfig& cfg, Tape& tape, ParamStore& params, const TrainSample& sample,
                             LabelAccessor& labels, Rng& rng) {
    const VideoSample& v = *sample.video;
    const bool selfsup = !cfg.train_ablate_selfsup;

    std::vector<Tensor> grids = encode_frames(v.raw, params, cfg, &tape);
    QueryFeatures query = encode_query(sample.query, params, cfg, &tape);

    TokenBatch batch;
    std::vector<int64_t> frames;
    if (cfg.train_ablate_tree) {
        batch = assemble_tokens_all_frames(grids, query, params, cfg, &tape);
        frames.resize(static_cast<size_t>(v.frames));
        std::iota(frames.begin(), frames.end(), 0);
    } else {
        std::vector<Tensor> pooled;
        pooled.reserve(grids.size());
        for (const Tensor& g : grids) pooled.push_back(pool_node_feature(g, &tape));
        const TreeConfig tcfg = tree_config(cfg);
        InfoTree tree = build_tree(pooled, query.pooled, params, tcfg, &tape);
        const Branch branch = select_branch_training(tree, labels.labeled_frame(), tcfg);
        const CropResult crop = crop_branch(tree, branch, tcfg);
        batch = assemble_tokens(tree, crop, grids, query, params, cfg, &tape);
        for (int32_t leaf : crop.leaves) frames.push_back(tree.node(leaf).span_lo);
    }

    MaskResult mask;
    Tensor model_in;
    if (selfsup) {
        mask = mask_tokens(batch, cfg.model_mask_rate, rng, params, &tape);
        model_in = mask.tokens;
    } else {
        model_in = combine_tokens(batch, &tape);
    }
    Tensor f_out = encode(model_in, params, cfg, &tape);

    ForwardLosses out;
    out.values.beta_det = cfg.train_beta_det;
    out.values.beta_mfm = cfg.train_beta_mfm;
    out.values.beta_vtm = cfg.train_beta_vtm;

    Tensor det_sum, mfm, vtm;
    bool have_det = false;
    if (sample.is_matched) {
        const auto preds = decode_boxes(f_out, frames, params, cfg, &tape);
        const FramePredictions* labeled = nullptr;
        for (const auto& p : preds)
            if (p.frame == labels.labeled_frame()) labeled = &p;
        if (!labeled) throw DataError("training branch lost the labeled frame");
        const Box gt = labels.read_box(labels.labeled_frame());
        const int64_t m = match_predictions(*labeled, gt);
        DetectionLoss dl = detection_loss(*labeled, m, gt, &tape);
        out.values.detection_l1 = dl.l1.value();
        out.values.detection_iou = dl.iou.value();
        out.values.detection_cls = dl.cls.value();
        det_sum = ops::add(ops::add(dl.l1, dl.iou, &tape), dl.cls, &tape);
        have_det = true;
    }
    if (selfsup) {
        mfm = mfm_loss(f_out, batch, mask, params, &tape);
        Tensor target({1, 1}, {sample.is_matched ? 1.0 : 0.0});
        vtm = ops::bce_with_logits(vtm_logit(f_out, params, &tape), target, &tape);
        out.values.mfm = mfm.value();
        out.values.vtm = vtm.value();
    }

    Tensor total;
    bool have = false;
    const auto accumulate = [&](const Tensor& term, double beta) {
        Tensor scaled = ops::scale(term, beta, &tape);
        total = have ? ops::add(total, scaled, &tape) : scaled;
        have = true;
    };
    if (have_det) accumulate(det_sum, cfg.train_beta_det);
    if (selfsup) {
        accumulate(mfm, cfg.train_beta_mfm);
        accumulate(vtm, cfg.train_beta_vtm);
    }
    out.total = have ? total : Tensor::scalar(0.0);
    out.values.total = out.total.value();

    const double comps[6] = {out.values.detection_l1, out.values.detection_iou, out.values.detection_cls,
                             out.values.mfm,          out.values.vtm,           out.values.total};
    for (double c : comps)
        if (!std::isfinite(c))
            throw NumericError(fmt::format(
                "step aborted, non-finite loss: total={} (l1={} iou={} cls={} mfm={} vtm={})", out.values.total,
                out.values.detection_l1, out.values.detection_iou, out.values.detection_cls, out.values.mfm,
                out.values.vtm));
    return out;
}

LossBreakdown train_step(const RunConfig& cfg, ParamStore& params, Adam& opt, const TrainSample& sample,
                         LabelAccessor& labels, int64_t epoch, Rng& rng) {
    Tape tape;
    const std::vector<int32_t> ids = watch_all(params, tape);
    ForwardLosses fl = forward_losses(cfg, tape, params, sample, labels, rng);
    if (!fl.total.node) return fl.values;  // nothing learnable this step
    GradMap grads = tape.backward(fl.total);
    std::vector<const Tensor*> gptrs(params.size(), nullptr);
    for (size_t i = 0; i < ids.size(); ++i) {
        auto it = grads.find(ids[i]);
        if (it != grads.end()) gptrs[i] = &it->second;
    }
    opt.step(params, gptrs, epoch);
    return fl.values;
}

ParamStore build_model(const RunConfig& cfg) {
    ParamStore ps;
    Rng rng(derive_seed(cfg.train_seed, 0x6d6f64656cULL));  // independent init stream
    register_encoder_params(ps, cfg, rng);
    register_tree_params(ps, cfg, rng);
    register_grounding_params(ps, cfg, rng);
    return ps;
}

AdamConfig adam_config(const RunConfig& cfg) {
    AdamConfig a;
    a.base_lr = cfg.train_base_lr;
    a.decay_factor = cfg.train_decay_factor;
    a.decay_period = cfg.decay_period();
    return a;
}

namespace {

std::string metrics_line(int64_t epochs_done, const std::string& split, const EvalReport& rep,
                         const LossBreakdown& mean) {
    return fmt::format("epoch={} split={} acc@0.4={:.6f} acc@0.5={:.6f} acc@0.6={:.6f} mean_iou={:.6f} "
                       "loss_total={:.6f} loss_det_l1={:.6f} loss_det_iou={:.6f} loss_det_cls={:.6f} "
                       "loss_mfm={:.6f} loss_vtm={:.6f}",
                       epochs_done, split, rep.acc04, rep.acc05, rep.acc06, rep.mean_iou, mean.total,
                       mean.detection_l1, mean.detection_iou, mean.detection_cls, mean.mfm, mean.vtm);
}

ParamStore snapshot(const ParamStore& params) {
    ParamStore copy = params;
    for (size_t i = 0; i < copy.size(); ++i) copy.item(i).second.node.reset();
    return copy;
}

}  // namespace

TrainResult train_loop(const RunConfig& cfg, const Dataset& ds, ParamStore& params, std::ostream* progress) {
    if (ds.train.empty()) throw DataError("training split is empty");
    Adam opt(adam_config(cfg));
    Rng rng(derive_seed(cfg.train_seed, 0x747261696eULL));

    TrainResult res;
    res.best_params = snapshot(params);

    std::vector<size_t> order(ds.train.size());
    for (int64_t epoch = 0; epoch < cfg.train_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), size_t{0});
        rng.shuffle(order);

        LossBreakdown mean;
        for (size_t idx : order) {
            TrainSample sample;
            if (cfg.train_ablate_selfsup) {
                sample.video = &ds.train[idx];
                sample.is_matched = true;
                sample.query = ds.train[idx].tokens;
            } else {
                sample = sample_mismatch(ds.train, idx, cfg.train_mismatch_rate, rng);
            }
            LabelAccessor labels(ds.train[idx]);
            const LossBreakdown lb = train_step(cfg, params, opt, sample, labels, epoch, rng);
            mean.detection_l1 += lb.detection_l1;
            mean.detection_iou += lb.detection_iou;
            mean.detection_cls += lb.detection_cls;
            mean.mfm += lb.mfm;
            mean.vtm += lb.vtm;
            mean.total += lb.total;
        }
        const double n = static_cast<double>(order.size());
        mean.detection_l1 /= n;
        mean.detection_iou /= n;
        mean.detection_cls /= n;
        mean.mfm /= n;
        mean.vtm /= n;
        mean.total /= n;

        const bool eval_now =
            !ds.eval.empty() && ((epoch + 1) % cfg.train_eval_every == 0 || epoch + 1 == cfg.train_epochs);
        if (!eval_now) continue;
        const EvalReport rep = evaluate(ds.eval, params, cfg);
        const std::string line = metrics_line(epoch + 1, "eval", rep, mean);
        res.metrics.push_back(line);
        if (progress) *progress << line << std::endl;
        if (rep.acc05 > res.best_acc05) {
            res.best_acc05 = rep.acc05;
            res.best_epoch = epoch + 1;
            res.best_params = snapshot(params);
        }
    }
    return res;
}

}  // namespace tg
