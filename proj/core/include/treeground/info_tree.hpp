#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "treeground/config.hpp"
#include "treeground/params.hpp"
#include "treeground/tape.hpp"
#include "treeground/tensor.hpp"

namespace tg {

enum class RankMode { similarity, literal };

/// Construction knobs, resolved from RunConfig (or set directly in tests).
struct TreeConfig {
    double merge_fraction = 0.6;
    double gamma = 0.3;
    RankMode rank_mode = RankMode::similarity;
    int64_t delta_min = 1;
    int64_t delta_max = 0;  // 0 = ceil(I/2)+1
    double crop_threshold = 0.7;
    double down_weight = 0.5;
};

TreeConfig tree_config(const RunConfig& cfg);

struct TreeNode {
    int32_t id = -1;
    bool leaf = true;
    int32_t child_a = -1, child_b = -1;  // temporal order: child_a precedes child_b
    int64_t span_lo = 0, span_hi = 0;    // inclusive frame range
    Tensor feature;                      // pooled node feature, length C
    Tensor r_tv;                         // scalar semantic relevance, kept on tape
    bool removed = false;
    double weight = 1.0;
};

struct MergeEvent {
    int64_t round;
    int32_t a, b, new_id;
};

struct InfoTree {
    std::vector<TreeNode> nodes;  // arena; node id == index; leaves are 0..I-1
    int32_t root = -1;
    int64_t leaf_count = 0;
    std::vector<MergeEvent> log;

    const TreeNode& node(int32_t id) const { return nodes[static_cast<size_t>(id)]; }
    TreeNode& node(int32_t id) { return nodes[static_cast<size_t>(id)]; }
    /// Node ids of the subtree rooted at `id`, preorder.
    std::vector<int32_t> subtree(int32_t id) const;
};

/// A subtree handle: its root and the contiguous frame span it covers.
struct Branch {
    int32_t root;
    int64_t lo, hi;  // inclusive leaf span
    double r_tv;
};

/// Channelwise spatial max over a C x H x W grid.
Tensor pool_node_feature(const Tensor& grid, Tape* tape);

void register_tree_params(ParamStore& ps, const RunConfig& cfg, Rng& rng);

/// Sigmoid bilinear text-node score: sigma((f_t w_t) . (f_v w_v)).
Tensor semantic_relevance(const Tensor& f_t, const Tensor& f_v, const ParamStore& ps, Tape* tape);

/// Plain-value cosine of two pooled features (merge ranking only).
double visual_relevance(const Tensor& a, const Tensor& b);

/// Merge-ranking score for a candidate pair.
/// literal:    |r_a - r_b| + gamma * r_vv
/// similarity: -|r_a - r_b| + gamma * r_vv
double pair_score(double r_tv_a, double r_tv_b, double r_vv, double gamma, RankMode mode);

/// New internal node over temporally adjacent a, b: feature = w_mg (f_a + f_b) + b_mg,
/// relevance recomputed from the merged feature.
TreeNode merge_pair(const TreeNode& a, const TreeNode& b, int32_t new_id, const Tensor& f_t, const ParamStore& ps,
                    Tape* tape);

/// Round-based construction: pair queue neighbors, score, merge the top
/// ceil(merge_fraction * pairs) pairs (at least one), carry a trailing odd
/// node, repeat until a single root remains.
InfoTree build_tree(const std::vector<Tensor>& leaf_features, const Tensor& f_t, const ParamStore& ps,
                    const TreeConfig& cfg, Tape* tape);

/// Re-run the recorded merges; yields a structurally identical tree.
InfoTree replay_merges(const std::vector<Tensor>& leaf_features, const Tensor& f_t, const ParamStore& ps,
                       const std::vector<MergeEvent>& log, Tape* tape);

/// All nodes whose leaf count n satisfies delta_min < n < delta_max, ascending id.
std::vector<Branch> candidate_branches(const InfoTree& tree, const TreeConfig& cfg);

/// Highest-relevance candidate containing the labeled frame; ties prefer
/// fewer leaves then lower id; no candidate -> the whole-tree root.
Branch select_branch_training(const InfoTree& tree, int64_t labeled_frame, const TreeConfig& cfg);

/// Greedy inference selection: repeatedly take the highest-relevance candidate
/// whose leaves are all still uncovered, then wrap leftover leaves as
/// singleton branches. Leaf sets are disjoint and cover every frame.
std::vector<Branch> select_branches_inference(const InfoTree& tree, const TreeConfig& cfg);

struct CropResult {
    std::vector<int32_t> removed;             // ascending ids, internal only
    std::vector<int32_t> surviving_internal;  // ascending ids
    std::vector<int32_t> leaves;              // frame order
};

/// Mark internal nodes under the branch with relevance < crop_threshold as
/// removed (closed under internal descendants); leaves under any removed node
/// get down_weight, all other branch leaves weight 1. Leaves are never removed.
CropResult crop_branch(InfoTree& tree, const Branch& branch, const TreeConfig& cfg);

/// Node feature scaled by r_tv * weight, on tape.
Tensor reweight_feature(const InfoTree& tree, int32_t id, Tape* tape);

/// One node per line: id kind span=[lo,hi] r_tv=%.6f weight=%.1f removed={0|1} children=(a,b)
std::string dump_tree(const InfoTree& tree);

}  // namespace tg
