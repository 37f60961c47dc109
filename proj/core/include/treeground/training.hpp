#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "treeground/config.hpp"
#include "treeground/grounding.hpp"
#include "treeground/optim.hpp"
#include "treeground/params.hpp"
#include "treeground/rng.hpp"
#include "treeground/synthetic.hpp"
#include "treeground/tape.hpp"

namespace tg {

struct LossBreakdown {
    double detection_l1 = 0.0;
    double detection_iou = 0.0;
    double detection_cls = 0.0;
    double mfm = 0.0;
    double vtm = 0.0;
    double total = 0.0;
    double beta_det = 1.0, beta_mfm = 1.0, beta_vtm = 1.0;
};

/// One training draw: the video plus the query actually fed to the model.
/// is_matched false <=> the query was swapped in from another video.
struct TrainSample {
    const VideoSample* video = nullptr;
    bool is_matched = true;
    std::vector<int64_t> query;
};

/// The only path training code has to ground truth. Every read is counted so
/// tests can prove that exactly one frame's label is ever touched; reads off
/// the labeled frame throw.
class LabelAccessor {
public:
    explicit LabelAccessor(const VideoSample& video);
    int64_t labeled_frame() const { return video_->one_shot_frame; }
    Box read_box(int64_t frame);
    const std::vector<int64_t>& read_counts() const { return counts_; }

private:
    const VideoSample* video_;
    std::vector<int64_t> counts_;
};

/// With probability `rate` swap in a uniformly chosen other video's query.
/// A pool of one video always yields a matched sample (warns once).
TrainSample sample_mismatch(const std::vector<VideoSample>& pool, size_t index, double rate, Rng& rng);

/// Index minimizing  |b - gt|_1 (center form)  +  (1 - IoU)  +  (-ln P),
/// ties resolved toward the lower index. Plain values, no tape.
int64_t match_predictions(const FramePredictions& preds, const Box& gt);

struct DetectionLoss {
    Tensor l1;   // center-form L1 on the matched box
    Tensor iou;  // 1 - IoU on the matched box
    Tensor cls;  // confidence BCE, matched target 1, others 0
};

DetectionLoss detection_loss(const FramePredictions& preds, int64_t matched, const Box& gt, Tape* tape);

struct ForwardLosses {
    LossBreakdown values;
    Tensor total;  // scalar on tape; untracked when no learnable term applies
};

/// Full per-sample pipeline: encode -> tree -> training branch -> crop ->
/// assemble -> mask -> transformer -> heads. Detection terms enter the total
/// only for matched samples; masking and MFM/VTM only with self-supervision
/// enabled. Throws NumericError with the breakdown if the loss is not finite.
ForwardLosses forward_losses(const RunConfig& cfg, Tape& tape, ParamStore& params, const TrainSample& sample,
                             LabelAccessor& labels, Rng& rng);

/// forward_losses + backward + one Adam step against a fresh tape.
LossBreakdown train_step(const RunConfig& cfg, ParamStore& params, Adam& opt, const TrainSample& sample,
                         LabelAccessor& labels, int64_t epoch, Rng& rng);

/// Registers every parameter group (encoders, tree, transformer, heads) with
/// seed-derived initialization.
ParamStore build_model(const RunConfig& cfg);

AdamConfig adam_config(const RunConfig& cfg);

struct TrainResult {
    ParamStore best_params;       // highest held-out Acc@0.5 snapshot (init if never evaluated)
    int64_t best_epoch = 0;       // epochs completed at the snapshot
    double best_acc05 = -1.0;
    std::vector<std::string> metrics;  // one key=value record per eval point
};

/// Shuffled single-sample epochs with periodic held-out evaluation.
/// `progress`, when given, receives each metrics record as it is produced.
TrainResult train_loop(const RunConfig& cfg, const Dataset& ds, ParamStore& params, std::ostream* progress);

}  // namespace tg
