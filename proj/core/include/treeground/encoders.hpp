#pragma once

#include <vector>

#include "treeground/config.hpp"
#include "treeground/params.hpp"
#include "treeground/tape.hpp"
#include "treeground/tensor.hpp"

namespace tg {

/// Contextualized query features. `per_token` is L x C, `pooled` is the row
/// mean (the dense text feature the tree scores against).
struct QueryFeatures {
    std::vector<int64_t> token_ids;
    Tensor per_token;
    Tensor pooled;
};

/// Longest query the position table supports.
constexpr int64_t kMaxQueryLen = 16;

void register_encoder_params(ParamStore& ps, const RunConfig& cfg, Rng& rng);

/// Raw 3 x px x px frames -> per-frame C x grid x grid feature maps via a
/// pointwise projection, ReLU, and a strided 3x3 same-padding convolution.
std::vector<Tensor> encode_frames(const std::vector<Tensor>& raw_frames, const ParamStore& ps, const RunConfig& cfg,
                                  Tape* tape);

/// Token embeddings + learned positions through one self-attention block.
QueryFeatures encode_query(const std::vector<int64_t>& token_ids, const ParamStore& ps, const RunConfig& cfg,
                           Tape* tape);

}  // namespace tg
