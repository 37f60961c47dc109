#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "treeground/box.hpp"
#include "treeground/config.hpp"
#include "treeground/params.hpp"
#include "treeground/synthetic.hpp"

namespace tg {

inline constexpr std::array<double, 3> kAccThresholds{0.4, 0.5, 0.6};

struct VideoAccuracy {
    double mean_iou = 0.0;
    int64_t evaluable = 0;             // frames entering the mean
    bool excluded = false;             // nothing to score against
    std::array<bool, 3> accurate{};    // strict mean > alpha, per threshold
};

struct EvalReport {
    std::vector<VideoAccuracy> videos;  // one row per input video, in order
    int64_t evaluated = 0;
    int64_t excluded = 0;
    double acc04 = 0.0, acc05 = 0.0, acc06 = 0.0;
    double avg = 0.0;       // mean of the three accuracies
    double mean_iou = 0.0;  // mean of per-video means over evaluated videos
};

/// Inference for one video: tree, greedy branch cover, crop, decode, and the
/// per-frame highest-confidence box. Exactly one box per frame.
std::vector<Box> predict_video(const VideoSample& v, const ParamStore& ps, const RunConfig& cfg);

/// Mean IoU over scoreable frames plus the strict >alpha accuracy flags.
/// Frames without ground truth are skipped, or scored 0 when
/// absent_as_zero is set. No scoreable frame at all -> excluded.
VideoAccuracy video_accuracy(const std::vector<Box>& preds, const std::vector<std::optional<Box>>& gt,
                             bool absent_as_zero);

/// Deterministic, read-only sweep over a split.
EvalReport evaluate(const std::vector<VideoSample>& split, const ParamStore& ps, const RunConfig& cfg);

/// Aligned plain-text summary table.
std::string report_table(const EvalReport& rep, const std::string& split_name);

}  // namespace tg
