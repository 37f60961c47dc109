#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "treeground/box.hpp"
#include "treeground/config.hpp"
#include "treeground/tensor.hpp"

namespace tg {

/// One synthetic grounding video: raw frames, a token query naming the target
/// object's signature, a single labeled frame, and (for evaluation) the full
/// per-frame ground truth. Frames without the target have no box.
struct VideoSample {
    int64_t id = 0;
    int64_t frames = 0;
    int64_t frame_px = 0;
    std::vector<Tensor> raw;  // frames x (3 x px x px)
    std::vector<int64_t> tokens;
    int64_t one_shot_frame = -1;
    Box one_shot_box;
    std::vector<std::optional<Box>> gt;  // per frame
    bool eval_split = false;
};

struct Dataset {
    std::vector<VideoSample> train;
    std::vector<VideoSample> eval;
    uint64_t seed = 0;
    std::string config_hash;
};

/// Token sequence (2-4 tokens) that bijectively encodes a signature.
std::vector<int64_t> signature_tokens(int64_t signature);

/// Signature color used when rasterizing (3 channels in (0,1)).
std::array<double, 3> signature_color(int64_t signature);

/// Deterministic per-video generation under seed-derived streams. Every video
/// has exactly one target object on a noisy linear trajectory, distractors
/// with other signatures, and optional target-free frames.
Dataset generate_dataset(const RunConfig& cfg, uint64_t seed);

/// Container: magic "ITVD", version u16, length-prefixed key=value manifest
/// (counts, seed, config hash, per-video offsets relative to the block
/// section), then per-video blocks. Round trips are byte-exact.
void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);

}  // namespace tg
