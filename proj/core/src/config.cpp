#include "treeground/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include <fmt/format.h>

#include "treeground/common.hpp"

namespace tg {

int64_t RunConfig::decay_period() const {
    if (train_decay_period > 0) return train_decay_period;
    const int64_t scaled = (35 * train_epochs + 50) / 100;  // 35 per 100 epochs, rounded
    return std::max<int64_t>(1, scaled);
}

int64_t RunConfig::delta_max_for(int64_t frames) const {
    if (tree_delta_max > 0) return tree_delta_max;
    return (frames + 1) / 2 + 1;  // ceil(frames/2) + 1
}

const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = {
        {"data.videos_train", &RunConfig::data_videos_train, "videos in the training split"},
        {"data.videos_eval", &RunConfig::data_videos_eval, "videos in the held-out split"},
        {"data.frames", &RunConfig::data_frames, "frames per video"},
        {"data.frame_px", &RunConfig::data_frame_px, "raw frame height=width in pixels"},
        {"data.signatures", &RunConfig::data_signatures, "distinct object signatures"},
        {"data.distractors_min", &RunConfig::data_distractors_min, "min distractor objects per frame"},
        {"data.distractors_max", &RunConfig::data_distractors_max, "max distractor objects per frame"},
        {"data.irrelevant_prob", &RunConfig::data_irrelevant_prob, "chance a frame lacks the target"},
        {"data.vocab", &RunConfig::data_vocab, "query vocabulary size"},
        {"model.channels", &RunConfig::model_channels, "feature width C"},
        {"model.grid", &RunConfig::model_grid, "feature grid height=width"},
        {"model.relevance_dim", &RunConfig::model_relevance_dim, "projection width of the relevance score"},
        {"model.enc_layers", &RunConfig::model_enc_layers, "transformer encoder depth"},
        {"model.heads", &RunConfig::model_heads, "attention heads"},
        {"model.dec_layers", &RunConfig::model_dec_layers, "box decoder depth"},
        {"model.queries", &RunConfig::model_queries, "box candidates per frame"},
        {"model.mask_rate", &RunConfig::model_mask_rate, "token masking rate"},
        {"tree.merge_fraction", &RunConfig::tree_merge_fraction, "fraction of pairs merged per round"},
        {"tree.gamma", &RunConfig::tree_gamma, "visual-relevance weight in the pair score"},
        {"tree.rank_mode", &RunConfig::tree_rank_mode, "pair ranking: similarity | literal"},
        {"tree.delta_min", &RunConfig::tree_delta_min, "branch needs more leaves than this"},
        {"tree.delta_max", &RunConfig::tree_delta_max, "branch needs fewer leaves than this (0 = auto)"},
        {"tree.crop_threshold", &RunConfig::tree_crop_threshold, "internal nodes below this relevance are cropped"},
        {"tree.down_weight", &RunConfig::tree_down_weight, "weight for leaves under cropped nodes"},
        {"train.epochs", &RunConfig::train_epochs, "max training epochs"},
        {"train.base_lr", &RunConfig::train_base_lr, "base learning rate"},
        {"train.decay_factor", &RunConfig::train_decay_factor, "lr multiplier per decay step"},
        {"train.decay_period", &RunConfig::train_decay_period, "epochs per lr decay step (0 = auto)"},
        {"train.beta_det", &RunConfig::train_beta_det, "detection loss weight"},
        {"train.beta_mfm", &RunConfig::train_beta_mfm, "masked-feature loss weight"},
        {"train.beta_vtm", &RunConfig::train_beta_vtm, "video-text matching loss weight"},
        {"train.mismatch_rate", &RunConfig::train_mismatch_rate, "chance of swapping in another video's query"},
        {"train.seed", &RunConfig::train_seed, "training RNG seed"},
        {"train.eval_every", &RunConfig::train_eval_every, "epochs between held-out evaluations"},
        {"train.ablate_tree", &RunConfig::train_ablate_tree, "bypass the tree: all frames, unweighted"},
        {"train.ablate_selfsup", &RunConfig::train_ablate_selfsup, "drop masking/matching auxiliary losses"},
        {"eval.absent_frames", &RunConfig::eval_absent_frames, "frames without ground truth: exclude | zero"},
    };
    return keys;
}

namespace {

const ConfigKey& find_key(const std::string& name) {
    for (const auto& k : config_keys())
        if (name == k.name) return k;
    throw UsageError(fmt::format("unknown config key '{}'", name));
}

int64_t parse_i64(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        int64_t v = std::stoll(value, &used);
        if (used != value.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw UsageError(fmt::format("config key '{}': '{}' is not an integer", key, value));
    }
}

double parse_f64(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw UsageError(fmt::format("config key '{}': '{}' is not a number", key, value));
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "1" || value == "true") return true;
    if (value == "0" || value == "false") return false;
    throw UsageError(fmt::format("config key '{}': '{}' is not a boolean (use true/false)", key, value));
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

void config_set(RunConfig& cfg, const std::string& key, const std::string& value) {
    const ConfigKey& k = find_key(key);
    if (auto* pi = std::get_if<int64_t RunConfig::*>(&k.member)) {
        cfg.**pi = parse_i64(key, value);
    } else if (auto* pd = std::get_if<double RunConfig::*>(&k.member)) {
        cfg.**pd = parse_f64(key, value);
    } else if (auto* ps = std::get_if<std::string RunConfig::*>(&k.member)) {
        cfg.**ps = value;
    } else {
        cfg.*std::get<bool RunConfig::*>(k.member) = parse_bool(key, value);
    }
}

std::string config_get(const RunConfig& cfg, const std::string& key) {
    const ConfigKey& k = find_key(key);
    if (auto* pi = std::get_if<int64_t RunConfig::*>(&k.member)) return fmt::format("{}", cfg.**pi);
    if (auto* pd = std::get_if<double RunConfig::*>(&k.member)) return fmt::format("{}", cfg.**pd);
    if (auto* ps = std::get_if<std::string RunConfig::*>(&k.member)) return cfg.**ps;
    return cfg.*std::get<bool RunConfig::*>(k.member) ? "true" : "false";
}

std::string config_echo(const RunConfig& cfg) {
    std::string out;
    for (const auto& k : config_keys()) out += fmt::format("{}={}\n", k.name, config_get(cfg, k.name));
    return out;
}

void load_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError(fmt::format("cannot open config file '{}'", path));
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError(fmt::format("{}:{}: expected key=value, got '{}'", path, lineno, line));
        config_set(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

void validate_config(const RunConfig& cfg) {
    auto fail = [](const std::string& msg) { throw UsageError(fmt::format("config: {}", msg)); };
    if (cfg.data_videos_train < 1) fail("data.videos_train must be >= 1");
    if (cfg.data_videos_eval < 0) fail("data.videos_eval must be >= 0");
    if (cfg.data_frames < 1) fail("data.frames must be >= 1");
    if (cfg.data_frame_px < 4) fail("data.frame_px must be >= 4");
    if (cfg.data_signatures < 1) fail("data.signatures must be >= 1");
    if (cfg.data_distractors_min < 0 || cfg.data_distractors_max < cfg.data_distractors_min)
        fail("distractor bounds must satisfy 0 <= min <= max");
    if (cfg.data_irrelevant_prob < 0.0 || cfg.data_irrelevant_prob > 1.0)
        fail("data.irrelevant_prob must be in [0,1]");
    if (cfg.data_vocab < 8) fail("data.vocab must be >= 8");
    if (cfg.model_channels < 2) fail("model.channels must be >= 2");
    if (cfg.model_grid < 2) fail("model.grid must be >= 2");
    if (cfg.data_frame_px % cfg.model_grid != 0) fail("data.frame_px must be a multiple of model.grid");
    if (cfg.model_relevance_dim < 1) fail("model.relevance_dim must be >= 1");
    if (cfg.model_enc_layers < 0) fail("model.enc_layers must be >= 0");
    if (cfg.model_heads < 1 || cfg.model_channels % cfg.model_heads != 0)
        fail("model.heads must be >= 1 and divide model.channels");
    if (cfg.model_dec_layers < 0) fail("model.dec_layers must be >= 0");
    if (cfg.model_queries < 1) fail("model.queries must be >= 1");
    if (cfg.model_mask_rate < 0.0 || cfg.model_mask_rate >= 1.0) fail("model.mask_rate must be in [0,1)");
    if (cfg.tree_merge_fraction <= 0.0 || cfg.tree_merge_fraction > 1.0)
        fail("tree.merge_fraction must be in (0,1]");
    if (cfg.tree_gamma < 0.0) fail("tree.gamma must be >= 0");
    if (cfg.tree_rank_mode != "similarity" && cfg.tree_rank_mode != "literal")
        fail("tree.rank_mode must be 'similarity' or 'literal'");
    if (cfg.tree_delta_min < 1) fail("tree.delta_min must be >= 1");
    if (cfg.tree_delta_max != 0 && cfg.tree_delta_max <= cfg.tree_delta_min)
        fail("tree.delta_max must be 0 (auto) or > tree.delta_min");
    if (cfg.tree_crop_threshold <= 0.0 || cfg.tree_crop_threshold >= 1.0)
        fail("tree.crop_threshold must be in (0,1)");
    if (cfg.tree_down_weight < 0.0 || cfg.tree_down_weight > 1.0) fail("tree.down_weight must be in [0,1]");
    if (cfg.train_epochs < 0) fail("train.epochs must be >= 0");
    if (cfg.train_base_lr <= 0.0) fail("train.base_lr must be > 0");
    if (cfg.train_decay_factor <= 0.0 || cfg.train_decay_factor > 1.0)
        fail("train.decay_factor must be in (0,1]");
    if (cfg.train_decay_period < 0) fail("train.decay_period must be >= 0");
    if (cfg.train_beta_det < 0.0 || cfg.train_beta_mfm < 0.0 || cfg.train_beta_vtm < 0.0)
        fail("loss weights must be >= 0");
    if (cfg.train_mismatch_rate < 0.0 || cfg.train_mismatch_rate >= 1.0)
        fail("train.mismatch_rate must be in [0,1)");
    if (cfg.train_eval_every < 1) fail("train.eval_every must be >= 1");
    if (cfg.eval_absent_frames != "exclude" && cfg.eval_absent_frames != "zero")
        fail("eval.absent_frames must be 'exclude' or 'zero'");
}

}  // namespace tg
