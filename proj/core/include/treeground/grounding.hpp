#pragma once

#include <cstdint>
#include <vector>

#include "treeground/config.hpp"
#include "treeground/encoders.hpp"
#include "treeground/info_tree.hpp"
#include "treeground/params.hpp"
#include "treeground/tape.hpp"
#include "treeground/tensor.hpp"

namespace tg {

enum class TokenKind : uint8_t { cls = 0, local = 1, global_node = 2, text = 3 };

struct TokenMeta {
    TokenKind kind;
    int64_t frame = -1;  // local: source frame; global: span-center frame
    int64_t row = -1, col = -1;  // local only
};

/// Assembled transformer input, kept as two addends so masking can replace
/// content rows while preserving each token's position/type embeddings.
struct TokenBatch {
    Tensor content;  // T x C: cls + reweighted cells + reweighted node features + text rows
    Tensor embeds;   // T x C: position/type embeddings per token
    Tensor targets;  // T x C: same rows without the relevance/weight scaling (regression targets)
    std::vector<TokenMeta> meta;
};

struct MaskResult {
    Tensor tokens;                // T x C model input (masked content + embeds)
    std::vector<int64_t> masked;  // ascending token indices; never 0 (cls)
};

struct FramePredictions {
    int64_t frame;
    Tensor boxes;        // K x 4 rows of (cx, cy, w, h), each in (0,1)
    Tensor prob_logits;  // K x 1 pre-sigmoid confidence
};

struct EncodeDebug {
    std::vector<Tensor> attentions;  // one softmax matrix per layer*head
};

void register_grounding_params(ParamStore& ps, const RunConfig& cfg, Rng& rng);

/// cls + per-surviving-leaf grid cells (scaled by that leaf's relevance *
/// weight) + one token per surviving internal node + text tokens, with
/// row/column/frame/type embeddings.
TokenBatch assemble_tokens(const InfoTree& tree, const CropResult& crop, const std::vector<Tensor>& frame_grids,
                           const QueryFeatures& query, const ParamStore& ps, const RunConfig& cfg, Tape* tape);

/// Tree-ablated layout: every frame's cells, unweighted, no node tokens.
TokenBatch assemble_tokens_all_frames(const std::vector<Tensor>& frame_grids, const QueryFeatures& query,
                                      const ParamStore& ps, const RunConfig& cfg, Tape* tape);

/// Sum of content and embeds (the unmasked model input).
Tensor combine_tokens(const TokenBatch& batch, Tape* tape);

/// Replace floor(rate * (T-1)) random non-cls content rows with the learned
/// mask embedding; unmasked rows are bit-identical to the unmasked input.
MaskResult mask_tokens(const TokenBatch& batch, double rate, Rng& rng, const ParamStore& ps, Tape* tape);

/// Pre-norm self-attention encoder; zero depth returns the input unchanged.
Tensor encode(const Tensor& tokens, const ParamStore& ps, const RunConfig& cfg, Tape* tape,
              EncodeDebug* debug = nullptr);

/// Masked-feature regression: mean over masked positions of the squared L2
/// distance between the head reconstruction and the token's unweighted
/// target row. Text and video positions go through separate heads.
/// No masks -> 0.
Tensor mfm_loss(const Tensor& f_out, const TokenBatch& batch, const MaskResult& mask, const ParamStore& ps,
                Tape* tape);

/// Video-text matching logit from the cls row (1 x 1).
Tensor vtm_logit(const Tensor& f_out, const ParamStore& ps, Tape* tape);

/// Cross-attention decoder over the fused features: K candidates per frame.
std::vector<FramePredictions> decode_boxes(const Tensor& f_out, const std::vector<int64_t>& frames,
                                           const ParamStore& ps, const RunConfig& cfg, Tape* tape);

/// Index of the highest-confidence candidate; ties take the lowest index.
int64_t select_box(const Tensor& prob_column);

}  // namespace tg
