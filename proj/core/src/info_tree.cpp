#include "treeground/info_tree.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "treeground/common.hpp"

namespace tg {

TreeConfig tree_config(const RunConfig& cfg) {
    TreeConfig t;
    t.merge_fraction = cfg.tree_merge_fraction;
    t.gamma = cfg.tree_gamma;
    t.rank_mode = cfg.tree_rank_mode == "literal" ? RankMode::literal : RankMode::similarity;
    t.delta_min = cfg.tree_delta_min;
    t.delta_max = cfg.tree_delta_max;
    t.crop_threshold = cfg.tree_crop_threshold;
    t.down_weight = cfg.tree_down_weight;
    return t;
}

std::vector<int32_t> InfoTree::subtree(int32_t id) const {
    std::vector<int32_t> out, stack{id};
    while (!stack.empty()) {
        int32_t cur = stack.back();
        stack.pop_back();
        out.push_back(cur);
        const TreeNode& n = node(cur);
        if (!n.leaf) {
            stack.push_back(n.child_b);
            stack.push_back(n.child_a);
        }
    }
    return out;
}

Tensor pool_node_feature(const Tensor& grid, Tape* tape) { return ops::maxpool_spatial(grid, tape); }

void register_tree_params(ParamStore& ps, const RunConfig& cfg, Rng& rng) {
    const int64_t c = cfg.model_channels;
    const int64_t cp = cfg.model_relevance_dim;
    ps.add("tree.w_t", xavier_init({c, cp}, rng));
    ps.add("tree.w_v", xavier_init({c, cp}, rng));
    ps.add("tree.w_mg", xavier_init({c, c}, rng));
    ps.add("tree.b_mg", Tensor::zeros({c}));
}

Tensor semantic_relevance(const Tensor& f_t, const Tensor& f_v, const ParamStore& ps, Tape* tape) {
    Tensor pt = ops::matmul(f_t, ps.get("tree.w_t"), tape);
    Tensor pv = ops::matmul(f_v, ps.get("tree.w_v"), tape);
    return ops::sigmoid(ops::matmul(pt, pv, tape), tape);
}

double visual_relevance(const Tensor& a, const Tensor& b) {
    return ops::cosine_similarity(a.detached(), b.detached(), nullptr).value();
}

double pair_score(double r_tv_a, double r_tv_b, double r_vv, double gamma, RankMode mode) {
    const double diff = std::abs(r_tv_a - r_tv_b);
    return (mode == RankMode::literal ? diff : -diff) + gamma * r_vv;
}

TreeNode merge_pair(const TreeNode& a, const TreeNode& b, int32_t new_id, const Tensor& f_t, const ParamStore& ps,
                    Tape* tape) {
    if (a.span_hi + 1 != b.span_lo)
        throw DataError(fmt::format("merge_pair: spans [{},{}] and [{},{}] are not adjacent", a.span_lo, a.span_hi,
                                    b.span_lo, b.span_hi));
    TreeNode n;
    n.id = new_id;
    n.leaf = false;
    n.child_a = a.id;
    n.child_b = b.id;
    n.span_lo = a.span_lo;
    n.span_hi = b.span_hi;
    Tensor sum = ops::add(a.feature, b.feature, tape);
    n.feature = ops::add(ops::matmul(ps.get("tree.w_mg"), sum, tape), ps.get("tree.b_mg"), tape);
    n.r_tv = semantic_relevance(f_t, n.feature, ps, tape);
    return n;
}

InfoTree build_tree(const std::vector<Tensor>& leaf_features, const Tensor& f_t, const ParamStore& ps,
                    const TreeConfig& cfg, Tape* tape) {
    const int64_t count = static_cast<int64_t>(leaf_features.size());
    if (count == 0) throw DataError("build_tree: no frames");

    InfoTree tree;
    tree.leaf_count = count;
    tree.nodes.reserve(static_cast<size_t>(2 * count - 1));
    for (int64_t i = 0; i < count; ++i) {
        TreeNode n;
        n.id = static_cast<int32_t>(i);
        n.leaf = true;
        n.span_lo = n.span_hi = i;
        n.feature = leaf_features[static_cast<size_t>(i)];
        n.r_tv = semantic_relevance(f_t, n.feature, ps, tape);
        tree.nodes.push_back(std::move(n));
    }

    std::vector<int32_t> queue(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) queue[static_cast<size_t>(i)] = static_cast<int32_t>(i);

    int64_t round = 1;
    while (queue.size() > 1) {
        const int64_t pairs = static_cast<int64_t>(queue.size()) / 2;
        struct Scored {
            int64_t pair;
            double score;
        };
        std::vector<Scored> scored;
        scored.reserve(static_cast<size_t>(pairs));
        for (int64_t p = 0; p < pairs; ++p) {
            const TreeNode& a = tree.node(queue[static_cast<size_t>(2 * p)]);
            const TreeNode& b = tree.node(queue[static_cast<size_t>(2 * p + 1)]);
            const double rvv = visual_relevance(a.feature, b.feature);
            scored.push_back({p, pair_score(a.r_tv.value(), b.r_tv.value(), rvv, cfg.gamma, cfg.rank_mode)});
        }
        int64_t merges = std::max<int64_t>(
            1, static_cast<int64_t>(std::ceil(cfg.merge_fraction * static_cast<double>(pairs))));
        merges = std::min(merges, pairs);
        std::stable_sort(scored.begin(), scored.end(), [](const Scored& x, const Scored& y) {
            if (x.score != y.score) return x.score > y.score;
            return x.pair < y.pair;
        });
        std::vector<bool> merge_pairs(static_cast<size_t>(pairs), false);
        for (int64_t i = 0; i < merges; ++i) merge_pairs[static_cast<size_t>(scored[static_cast<size_t>(i)].pair)] = true;

        std::vector<int32_t> next;
        next.reserve(queue.size());
        for (int64_t p = 0; p < pairs; ++p) {
            const int32_t a = queue[static_cast<size_t>(2 * p)];
            const int32_t b = queue[static_cast<size_t>(2 * p + 1)];
            if (merge_pairs[static_cast<size_t>(p)]) {
                const int32_t new_id = static_cast<int32_t>(tree.nodes.size());
                tree.nodes.push_back(merge_pair(tree.node(a), tree.node(b), new_id, f_t, ps, tape));
                tree.log.push_back({round, a, b, new_id});
                next.push_back(new_id);
            } else {
                next.push_back(a);
                next.push_back(b);
            }
        }
        if (queue.size() % 2 == 1) next.push_back(queue.back());
        queue = std::move(next);
        ++round;
    }
    tree.root = queue.front();
    return tree;
}

InfoTree replay_merges(const std::vector<Tensor>& leaf_features, const Tensor& f_t, const ParamStore& ps,
                       const std::vector<MergeEvent>& log, Tape* tape) {
    const int64_t count = static_cast<int64_t>(leaf_features.size());
    if (count == 0) throw DataError("replay_merges: no frames");
    InfoTree tree;
    tree.leaf_count = count;
    for (int64_t i = 0; i < count; ++i) {
        TreeNode n;
        n.id = static_cast<int32_t>(i);
        n.leaf = true;
        n.span_lo = n.span_hi = i;
        n.feature = leaf_features[static_cast<size_t>(i)];
        n.r_tv = semantic_relevance(f_t, n.feature, ps, tape);
        tree.nodes.push_back(std::move(n));
    }
    for (const MergeEvent& e : log) {
        if (e.new_id != static_cast<int32_t>(tree.nodes.size()))
            throw DataError(fmt::format("replay_merges: event id {} does not extend the arena of {}", e.new_id,
                                        tree.nodes.size()));
        tree.nodes.push_back(merge_pair(tree.node(e.a), tree.node(e.b), e.new_id, f_t, ps, tape));
        tree.log.push_back(e);
    }
    tree.root = static_cast<int32_t>(tree.nodes.size()) - 1;
    return tree;
}

namespace {
int64_t resolved_delta_max(const TreeConfig& cfg, int64_t leaf_count) {
    return cfg.delta_max > 0 ? cfg.delta_max : (leaf_count + 1) / 2 + 1;
}
}  // namespace

std::vector<Branch> candidate_branches(const InfoTree& tree, const TreeConfig& cfg) {
    const int64_t dmax = resolved_delta_max(cfg, tree.leaf_count);
    std::vector<Branch> out;
    for (const TreeNode& n : tree.nodes) {
        const int64_t leaves = n.span_hi - n.span_lo + 1;
        if (leaves > cfg.delta_min && leaves < dmax) out.push_back({n.id, n.span_lo, n.span_hi, n.r_tv.value()});
    }
    return out;
}

Branch select_branch_training(const InfoTree& tree, int64_t labeled_frame, const TreeConfig& cfg) {
    const Branch* best = nullptr;
    auto candidates = candidate_branches(tree, cfg);
    for (const Branch& b : candidates) {
        if (labeled_frame < b.lo || labeled_frame > b.hi) continue;
        if (!best) {
            best = &b;
            continue;
        }
        const int64_t nb = b.hi - b.lo + 1, nbest = best->hi - best->lo + 1;
        if (b.r_tv > best->r_tv || (b.r_tv == best->r_tv && (nb < nbest || (nb == nbest && b.root < best->root))))
            best = &b;
    }
    if (best) return *best;
    const TreeNode& root = tree.node(tree.root);
    return Branch{root.id, root.span_lo, root.span_hi, root.r_tv.value()};
}

std::vector<Branch> select_branches_inference(const InfoTree& tree, const TreeConfig& cfg) {
    std::vector<bool> covered(static_cast<size_t>(tree.leaf_count), false);
    auto available = [&](const Branch& b) {
        for (int64_t f = b.lo; f <= b.hi; ++f)
            if (covered[static_cast<size_t>(f)]) return false;
        return true;
    };
    std::vector<Branch> out;
    for (;;) {
        const Branch* best = nullptr;
        auto candidates = candidate_branches(tree, cfg);
        for (const Branch& b : candidates) {
            if (!available(b)) continue;
            if (!best || b.r_tv > best->r_tv ||
                (b.r_tv == best->r_tv && (b.lo < best->lo || (b.lo == best->lo && b.root < best->root))))
                best = &b;
        }
        if (!best) break;
        out.push_back(*best);
        for (int64_t f = best->lo; f <= best->hi; ++f) covered[static_cast<size_t>(f)] = true;
    }
    for (int64_t f = 0; f < tree.leaf_count; ++f) {
        if (covered[static_cast<size_t>(f)]) continue;
        const TreeNode& leaf = tree.node(static_cast<int32_t>(f));
        out.push_back({leaf.id, f, f, leaf.r_tv.value()});
    }
    return out;
}

CropResult crop_branch(InfoTree& tree, const Branch& branch, const TreeConfig& cfg) {
    CropResult res;
    std::vector<int32_t> order = tree.subtree(branch.root);  // preorder: parents precede descendants
    std::vector<bool> in_removed(tree.nodes.size(), false);
    for (int32_t id : order) {
        TreeNode& n = tree.node(id);
        if (n.leaf) continue;
        const bool parent_removed = [&] {
            // preorder guarantees ancestors within the branch were decided already
            for (int32_t anc : order) {
                if (anc == id) break;
                const TreeNode& a = tree.node(anc);
                if (!a.leaf && in_removed[static_cast<size_t>(anc)] && n.span_lo >= a.span_lo && n.span_hi <= a.span_hi)
                    return true;
            }
            return false;
        }();
        if (parent_removed || n.r_tv.value() < cfg.crop_threshold) {
            in_removed[static_cast<size_t>(id)] = true;
            n.removed = true;
            res.removed.push_back(id);
        } else {
            n.removed = false;
            res.surviving_internal.push_back(id);
        }
    }
    for (int32_t id : order) {
        TreeNode& n = tree.node(id);
        if (!n.leaf) continue;
        bool under_removed = false;
        for (int32_t r : res.removed) {
            const TreeNode& rn = tree.node(r);
            if (n.span_lo >= rn.span_lo && n.span_hi <= rn.span_hi) {
                under_removed = true;
                break;
            }
        }
        n.removed = false;
        n.weight = under_removed ? cfg.down_weight : 1.0;
        res.leaves.push_back(id);
    }
    std::sort(res.removed.begin(), res.removed.end());
    std::sort(res.surviving_internal.begin(), res.surviving_internal.end());
    std::sort(res.leaves.begin(), res.leaves.end());
    return res;
}

Tensor reweight_feature(const InfoTree& tree, int32_t id, Tape* tape) {
    const TreeNode& n = tree.node(id);
    return ops::scale(ops::mul(n.feature, n.r_tv, tape), n.weight, tape);
}

std::string dump_tree(const InfoTree& tree) {
    std::string out;
    for (const TreeNode& n : tree.nodes) {
        if (n.leaf) {
            out += fmt::format("{} leaf span=[{},{}] r_tv={:.6f} weight={:.1f} removed={} children=(-,-)\n", n.id,
                               n.span_lo, n.span_hi, n.r_tv.value(), n.weight, n.removed ? 1 : 0);
        } else {
            out += fmt::format("{} internal span=[{},{}] r_tv={:.6f} weight={:.1f} removed={} children=({},{})\n",
                               n.id, n.span_lo, n.span_hi, n.r_tv.value(), n.weight, n.removed ? 1 : 0, n.child_a,
                               n.child_b);
        }
    }
    return out;
}

}  // namespace tg
