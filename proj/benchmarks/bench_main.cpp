#include <benchmark/benchmark.h>

#include "treeground/encoders.hpp"
#include "treeground/evaluation.hpp"
#include "treeground/grounding.hpp"
#include "treeground/info_tree.hpp"
#include "treeground/synthetic.hpp"
#include "treeground/tape.hpp"
#include "treeground/training.hpp"

using namespace tg;

namespace {

RunConfig bench_config() {
    RunConfig cfg;
    cfg.data_videos_train = 4;
    cfg.data_videos_eval = 2;
    return cfg;
}

void BM_matmul(benchmark::State& state) {
    const int64_t n = state.range(0);
    Rng rng(1);
    Tensor a = Tensor::zeros({n, n}), b = Tensor::zeros({n, n});
    for (auto& v : a.data) v = rng.uniform01();
    for (auto& v : b.data) v = rng.uniform01();
    for (auto _ : state) {
        Tensor c = ops::matmul(a, b, nullptr);
        benchmark::DoNotOptimize(c.data.data());
    }
}
BENCHMARK(BM_matmul)->Arg(64)->Arg(256);

void BM_softmax(benchmark::State& state) {
    const int64_t n = state.range(0);
    Rng rng(2);
    Tensor a = Tensor::zeros({n, n});
    for (auto& v : a.data) v = rng.uniform(-4.0, 4.0);
    for (auto _ : state) {
        Tensor s = ops::softmax_lastdim(a, nullptr);
        benchmark::DoNotOptimize(s.data.data());
    }
}
BENCHMARK(BM_softmax)->Arg(256);

void BM_conv_frame(benchmark::State& state) {
    const RunConfig cfg = bench_config();
    Rng rng(3);
    ParamStore ps;
    register_encoder_params(ps, cfg, rng);
    Tensor frame = Tensor::zeros({3, cfg.data_frame_px, cfg.data_frame_px});
    for (auto& v : frame.data) v = rng.uniform01();
    std::vector<Tensor> raw{frame};
    for (auto _ : state) {
        auto grids = encode_frames(raw, ps, cfg, nullptr);
        benchmark::DoNotOptimize(grids[0].data.data());
    }
}
BENCHMARK(BM_conv_frame);

void BM_build_tree(benchmark::State& state) {
    const RunConfig cfg = bench_config();
    Rng rng(4);
    ParamStore ps;
    register_encoder_params(ps, cfg, rng);
    register_tree_params(ps, cfg, rng);
    std::vector<Tensor> leaves;
    for (int64_t i = 0; i < cfg.data_frames; ++i) {
        Tensor f = Tensor::zeros({cfg.model_channels});
        for (auto& v : f.data) v = rng.uniform(-1.0, 1.0);
        leaves.push_back(f);
    }
    Tensor f_t = Tensor::zeros({cfg.model_channels});
    for (auto& v : f_t.data) v = rng.uniform(-1.0, 1.0);
    const TreeConfig tcfg = tree_config(cfg);
    for (auto _ : state) {
        InfoTree tree = build_tree(leaves, f_t, ps, tcfg, nullptr);
        benchmark::DoNotOptimize(tree.nodes.data());
    }
}
BENCHMARK(BM_build_tree);

void BM_train_step(benchmark::State& state) {
    RunConfig cfg = bench_config();
    const Dataset ds = generate_dataset(cfg, 7);
    ParamStore params = build_model(cfg);
    Adam opt(adam_config(cfg));
    Rng rng(5);
    for (auto _ : state) {
        TrainSample sample = sample_mismatch(ds.train, 0, cfg.train_mismatch_rate, rng);
        LabelAccessor labels(ds.train[0]);
        LossBreakdown lb = train_step(cfg, params, opt, sample, labels, 0, rng);
        benchmark::DoNotOptimize(lb.total);
    }
}
BENCHMARK(BM_train_step);

void BM_predict_video(benchmark::State& state) {
    RunConfig cfg = bench_config();
    const Dataset ds = generate_dataset(cfg, 8);
    const ParamStore params = build_model(cfg);
    for (auto _ : state) {
        auto boxes = predict_video(ds.eval[0], params, cfg);
        benchmark::DoNotOptimize(boxes.data());
    }
}
BENCHMARK(BM_predict_video);

}  // namespace

BENCHMARK_MAIN();
