// treeground: one-shot spatial video grounding over an information tree.
//
// Subcommands: gen-data, train, eval, tree-dump, predict, render.
// Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "treeground/checkpoint.hpp"
#include "treeground/common.hpp"
#include "treeground/config.hpp"
#include "treeground/encoders.hpp"
#include "treeground/evaluation.hpp"
#include "treeground/info_tree.hpp"
#include "treeground/render.hpp"
#include "treeground/synthetic.hpp"
#include "treeground/training.hpp"

namespace fs = std::filesystem;
using namespace tg;

namespace {

struct CommonOpts {
    std::string config_path;
    // Key overrides in argv order; applied after the config file.
    std::vector<std::pair<std::string, std::string>> overrides;
};

void add_config_options(CLI::App* sub, CommonOpts& opts) {
    sub->add_option("--config", opts.config_path, "key=value config file applied before flag overrides");
    for (const ConfigKey& key : config_keys()) {
        sub->add_option(
               std::string("--") + key.name,
               [&opts, name = key.name](const CLI::results_t& vals) {
                   for (const auto& v : vals) opts.overrides.emplace_back(name, v);
                   return true;
               },
               key.help)
            ->type_name("VALUE");
    }
}

RunConfig resolve_config(const CommonOpts& opts) {
    RunConfig cfg;
    if (!opts.config_path.empty()) load_config_file(cfg, opts.config_path);
    for (const auto& [k, v] : opts.overrides) config_set(cfg, k, v);
    validate_config(cfg);
    return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(fmt::format("cannot write '{}'", path.string()));
    out << text;
    if (!out.flush()) throw DataError(fmt::format("short write to '{}'", path.string()));
}

void echo_config_into(const fs::path& dir, const RunConfig& cfg) { write_text(dir / "config.txt", config_echo(cfg)); }

ParamStore load_model(const RunConfig& cfg, const std::string& weights) {
    ParamStore ps = build_model(cfg);
    if (!weights.empty()) load_checkpoint(weights, ps);
    return ps;
}

const VideoSample& pick_video(const Dataset& ds, const std::string& split, int64_t index) {
    const auto& vec = split == "train" ? ds.train : ds.eval;
    if (index < 0 || index >= static_cast<int64_t>(vec.size()))
        throw UsageError(fmt::format("--video {} out of range, {} split has {} videos", index, split, vec.size()));
    return vec[static_cast<size_t>(index)];
}

int run(int argc, char** argv) {
    CLI::App app{"one-shot spatial video grounding via a query-guided information tree"};
    app.require_subcommand(1);

    CommonOpts gen_opts, train_opts, eval_opts, dump_opts, pred_opts, render_opts;
    uint64_t gen_seed = RunConfig{}.train_seed;
    std::string gen_out;
    std::string train_data, train_out;
    std::string eval_data, eval_weights, eval_out, eval_split = "eval";
    std::string dump_data, dump_weights, dump_split = "train";
    int64_t dump_video = 0;
    std::string pred_data, pred_weights, pred_split = "eval";
    int64_t pred_video = 0;
    std::string render_data, render_weights, render_out, render_split = "eval";
    int64_t render_video = 0;

    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic grounding dataset (ITVD)");
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--out", gen_out, "output .itvd path")->required();
    add_config_options(gen, gen_opts);

    CLI::App* train = app.add_subcommand("train", "train on a dataset; writes checkpoint + metrics log");
    train->add_option("--data", train_data, "input .itvd dataset")->required();
    train->add_option("--out", train_out, "output directory")->required();
    add_config_options(train, train_opts);

    CLI::App* evalc = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    evalc->add_option("--data", eval_data, "input .itvd dataset")->required();
    evalc->add_option("--weights", eval_weights, "checkpoint .itgw")->required();
    evalc->add_option("--split", eval_split, "train|eval")->check(CLI::IsMember({"train", "eval"}));
    evalc->add_option("--out", eval_out, "optional output directory for the report");
    add_config_options(evalc, eval_opts);

    CLI::App* dump = app.add_subcommand("tree-dump", "print a video's information tree, one node per line");
    dump->add_option("--data", dump_data, "input .itvd dataset")->required();
    dump->add_option("--weights", dump_weights, "checkpoint .itgw (defaults to seeded init)");
    dump->add_option("--split", dump_split, "train|eval")->check(CLI::IsMember({"train", "eval"}));
    dump->add_option("--video", dump_video, "video index within the split");
    add_config_options(dump, dump_opts);

    CLI::App* pred = app.add_subcommand("predict", "print per-frame selected boxes for one video");
    pred->add_option("--data", pred_data, "input .itvd dataset")->required();
    pred->add_option("--weights", pred_weights, "checkpoint .itgw")->required();
    pred->add_option("--split", pred_split, "train|eval")->check(CLI::IsMember({"train", "eval"}));
    pred->add_option("--video", pred_video, "video index within the split");
    add_config_options(pred, pred_opts);

    CLI::App* rend = app.add_subcommand("render", "write per-frame SVG overlays (prediction vs ground truth)");
    rend->add_option("--data", render_data, "input .itvd dataset")->required();
    rend->add_option("--weights", render_weights, "checkpoint .itgw")->required();
    rend->add_option("--out", render_out, "output directory")->required();
    rend->add_option("--split", render_split, "train|eval")->check(CLI::IsMember({"train", "eval"}));
    rend->add_option("--video", render_video, "video index within the split");
    add_config_options(rend, render_opts);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // help on stdout, exit 0
    } catch (const CLI::ParseError& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 1;
    }

    if (gen->parsed()) {
        const RunConfig cfg = resolve_config(gen_opts);
        Dataset ds = generate_dataset(cfg, gen_seed);
        write_dataset(ds, gen_out);
        write_text(gen_out + ".config", config_echo(cfg));
        fmt::print(stderr, "wrote {} ({} train / {} eval videos, seed {})\n", gen_out, ds.train.size(),
                   ds.eval.size(), gen_seed);
    } else if (train->parsed()) {
        const RunConfig cfg = resolve_config(train_opts);
        const Dataset ds = read_dataset(train_data);
        fs::create_directories(train_out);
        echo_config_into(train_out, cfg);
        ParamStore params = build_model(cfg);
        TrainResult res = train_loop(cfg, ds, params, &std::cerr);
        save_checkpoint((fs::path(train_out) / "checkpoint.itgw").string(), res.best_params);
        std::string log;
        for (const auto& line : res.metrics) log += line + "\n";
        write_text(fs::path(train_out) / "metrics.log", log);
        fmt::print(stderr, "best acc@0.5 {:.4f} at epoch {}; checkpoint + metrics.log in {}\n",
                   std::max(res.best_acc05, 0.0), res.best_epoch, train_out);
    } else if (evalc->parsed()) {
        const RunConfig cfg = resolve_config(eval_opts);
        const Dataset ds = read_dataset(eval_data);
        const ParamStore params = load_model(cfg, eval_weights);
        const EvalReport rep = evaluate(eval_split == "train" ? ds.train : ds.eval, params, cfg);
        const std::string table = report_table(rep, eval_split);
        fmt::print("{}", table);
        if (!eval_out.empty()) {
            fs::create_directories(eval_out);
            echo_config_into(eval_out, cfg);
            write_text(fs::path(eval_out) / "report.txt", table);
        }
    } else if (dump->parsed()) {
        const RunConfig cfg = resolve_config(dump_opts);
        const Dataset ds = read_dataset(dump_data);
        const ParamStore params = load_model(cfg, dump_weights);
        const VideoSample& v = pick_video(ds, dump_split, dump_video);
        std::vector<Tensor> grids = encode_frames(v.raw, params, cfg, nullptr);
        std::vector<Tensor> pooled;
        for (const Tensor& g : grids) pooled.push_back(pool_node_feature(g, nullptr));
        QueryFeatures query = encode_query(v.tokens, params, cfg, nullptr);
        InfoTree tree = build_tree(pooled, query.pooled, params, tree_config(cfg), nullptr);
        fmt::print("{}", dump_tree(tree));
    } else if (pred->parsed()) {
        const RunConfig cfg = resolve_config(pred_opts);
        const Dataset ds = read_dataset(pred_data);
        const ParamStore params = load_model(cfg, pred_weights);
        const VideoSample& v = pick_video(ds, pred_split, pred_video);
        const std::vector<Box> boxes = predict_video(v, params, cfg);
        for (size_t f = 0; f < boxes.size(); ++f)
            fmt::print("frame={} x_min={:.6f} y_min={:.6f} x_max={:.6f} y_max={:.6f}\n", f, boxes[f].x_min,
                       boxes[f].y_min, boxes[f].x_max, boxes[f].y_max);
    } else if (rend->parsed()) {
        const RunConfig cfg = resolve_config(render_opts);
        const Dataset ds = read_dataset(render_data);
        const ParamStore params = load_model(cfg, render_weights);
        const VideoSample& v = pick_video(ds, render_split, render_video);
        const std::vector<Box> boxes = predict_video(v, params, cfg);
        fs::create_directories(render_out);
        echo_config_into(render_out, cfg);
        for (int64_t f = 0; f < v.frames; ++f) {
            const std::string svg = render_overlay_svg(v.raw[static_cast<size_t>(f)],
                                                       boxes[static_cast<size_t>(f)], v.gt[static_cast<size_t>(f)]);
            write_text(fs::path(render_out) / fmt::format("frame_{}.svg", f), svg);
        }
        fmt::print(stderr, "wrote {} overlays to {}\n", v.frames, render_out);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const UsageError& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 1;
    } catch (const NumericError& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 3;
    } catch (const Error& e) {  // DataError, ShapeError
        fmt::print(stderr, "error: {}\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 2;
    }
}
