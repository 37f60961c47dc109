#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

namespace tg {

/// Every tunable in one flat, namespaced key set. Serialized as plain-text
/// key=value lines; unknown keys are rejected; the resolved config is echoed
/// next to every output.
struct RunConfig {
    // data generation
    int64_t data_videos_train = 200;
    int64_t data_videos_eval = 50;
    int64_t data_frames = 8;        // frames per video
    int64_t data_frame_px = 16;     // raw frame height = width in pixels
    int64_t data_signatures = 4;    // distinct object signatures
    int64_t data_distractors_min = 1;
    int64_t data_distractors_max = 2;
    double data_irrelevant_prob = 0.25;  // chance a frame lacks the target
    int64_t data_vocab = 64;

    // model
    int64_t model_channels = 32;       // feature width C
    int64_t model_grid = 8;            // feature grid height = width
    int64_t model_relevance_dim = 32;  // projection width of the relevance score
    int64_t model_enc_layers = 2;
    int64_t model_heads = 4;
    int64_t model_dec_layers = 2;
    int64_t model_queries = 4;  // box candidates per frame
    double model_mask_rate = 0.15;

    // information tree
    double tree_merge_fraction = 0.6;  // fraction of pairs merged per round
    double tree_gamma = 0.3;           // visual-relevance weight in the pair score
    std::string tree_rank_mode = "similarity";  // similarity | literal
    int64_t tree_delta_min = 1;                 // branch must have more leaves than this
    int64_t tree_delta_max = 0;                 // and fewer than this; 0 = ceil(I/2)+1
    double tree_crop_threshold = 0.7;
    double tree_down_weight = 0.5;

    // training
    int64_t train_epochs = 100;
    double train_base_lr = 5e-5;
    double train_decay_factor = 0.1;
    int64_t train_decay_period = 0;  // epochs per lr decay; 0 = 35 scaled by epochs/100
    double train_beta_det = 1.0;
    double train_beta_mfm = 1.0;
    double train_beta_vtm = 1.0;
    double train_mismatch_rate = 0.5;
    int64_t train_seed = 42;
    int64_t train_eval_every = 10;
    bool train_ablate_tree = false;     // feed all frames unweighted, no tree
    bool train_ablate_selfsup = false;  // drop masking, matching, and their losses

    // evaluation
    std::string eval_absent_frames = "exclude";  // exclude | zero: frames without ground truth

    /// Resolved lr decay period (the 0 = auto rule).
    int64_t decay_period() const;
    /// Resolved delta_max for a given video length.
    int64_t delta_max_for(int64_t frames) const;
};

using ConfigMember = std::variant<int64_t RunConfig::*, double RunConfig::*, std::string RunConfig::*, bool RunConfig::*>;

struct ConfigKey {
    const char* name;  // dotted key, e.g. "tree.merge_fraction"
    ConfigMember member;
    const char* help;
};

const std::vector<ConfigKey>& config_keys();

void config_set(RunConfig& cfg, const std::string& key, const std::string& value);
std::string config_get(const RunConfig& cfg, const std::string& key);

/// One key=value line per registered key, in registry order.
std::string config_echo(const RunConfig& cfg);

/// key=value lines; '#' starts a comment; blank lines ignored.
void load_config_file(RunConfig& cfg, const std::string& path);

/// Range/consistency checks. Throws UsageError naming the offending key.
void validate_config(const RunConfig& cfg);

}  // namespace tg
