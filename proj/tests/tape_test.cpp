#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "treeground/common.hpp"

using namespace tg;
using namespace tgtest;

TEST_CASE("sigmoid of scalar zero is one half") {
    Tensor x = Tensor::scalar(0.0);
    CHECK(ops::sigmoid(x, nullptr).value() == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("cosine similarity of a vector with itself is one") {
    Rng rng(3);
    Tensor v = rand_tensor({7}, rng);
    CHECK(ops::cosine_similarity(v, v, nullptr).value() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("cosine similarity rejects a zero vector") {
    Tensor z = Tensor::zeros({4});
    Tensor v = Tensor::full({4}, 1.0);
    CHECK_THROWS_AS(ops::cosine_similarity(z, v, nullptr), NumericError);
}

TEST_CASE("maxpool over a 1x2x2 grid picks the max cell") {
    Tensor g({1, 2, 2}, {1, 3, 2, 0});
    Tensor p = ops::maxpool_spatial(g, nullptr);
    CHECK(p.shape == Shape{1});
    CHECK(p.value() == 3.0);
}

TEST_CASE("shape mismatch diagnostics name the primitive and both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    try {
        ops::add(a, b, nullptr);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("add") != std::string::npos);
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,2]") != std::string::npos);
    }
}

TEST_CASE("non-finite outputs are a hard error") {
    Tensor a = Tensor::scalar(1e308);
    CHECK_THROWS_AS(ops::add(a, a, nullptr), NumericError);
}

TEST_CASE("gradient of a linear map is the fixed factor") {
    Tape tape;
    Tensor w = Tensor({3}, {0.5, -1.0, 2.0});
    Tensor x = Tensor({3}, {1.0, 2.0, 3.0});
    tape.watch(w);
    Tensor loss = ops::scale(ops::mean_lastdim(ops::mul(w, x, &tape), &tape), 3.0, &tape);  // sum(w*x)
    GradMap g = tape.backward(loss);
    const Tensor& gw = g.at(w.node->node);
    for (int64_t i = 0; i < 3; ++i) CHECK(gw.at(i) == doctest::Approx(x.at(i)).epsilon(1e-12));
}

TEST_CASE("gradient of sigmoid at zero is one quarter") {
    Tape tape;
    Tensor z = Tensor::scalar(0.0);
    tape.watch(z);
    GradMap g = tape.backward(ops::sigmoid(z, &tape));
    CHECK(g.at(z.node->node).value() == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("backward rejects a non-scalar loss") {
    Tape tape;
    Tensor x = Tensor::zeros({2, 2});
    tape.watch(x);
    Tensor y = ops::relu(x, &tape);
    CHECK_THROWS_AS(tape.backward(y), ShapeError);
}

TEST_CASE("backward rejects an untracked loss") {
    Tape tape;
    Tensor x = Tensor::scalar(1.0);
    CHECK_THROWS_AS(tape.backward(x), ShapeError);
}

TEST_CASE("unreached watched parameters get zero gradients") {
    Tape tape;
    Tensor used = Tensor::scalar(2.0), unused = Tensor::scalar(5.0);
    tape.watch(used);
    tape.watch(unused);
    GradMap g = tape.backward(ops::sigmoid(used, &tape));
    CHECK(g.at(unused.node->node).value() == 0.0);
}

TEST_CASE("backward touches each recorded op exactly once") {
    Tape tape;
    Rng rng(11);
    Tensor a = rand_tensor({4, 4}, rng), b = rand_tensor({4, 4}, rng);
    tape.watch(a);
    tape.watch(b);
    Tensor y = ops::mean_lastdim(ops::mean_lastdim(ops::sigmoid(ops::matmul(a, b, &tape), &tape), &tape), &tape);
    const size_t recorded = tape.recorded_ops();
    tape.backward(y);
    CHECK(tape.backward_visits() == recorded);
}

TEST_CASE("stale tape references are treated as untracked") {
    Tensor x = Tensor::scalar(1.0);
    {
        Tape old;
        old.watch(x);
    }
    Tape fresh;
    Tensor y = ops::sigmoid(x, &fresh);  // x's ref points at a dead tape
    CHECK_FALSE(y.node.has_value());
}

TEST_CASE("matmul handles transpose flags and vector promotion") {
    Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor v({3}, {1, 0, -1});
    Tensor av = ops::matmul(a, v, nullptr);  // 2x3 . 3 -> 2
    CHECK(av.shape == Shape{2});
    CHECK(av.at(0) == doctest::Approx(-2.0));
    CHECK(av.at(1) == doctest::Approx(-2.0));
    Tensor at_a = ops::matmul(a, a, nullptr, true, false);  // (3x2).(2x3) -> 3x3
    CHECK(at_a.shape == Shape{3, 3});
    CHECK(at_a.at2(0, 0) == doctest::Approx(17.0));
    Tensor w({2}, {1, 1});
    Tensor wv = ops::matmul(w, a, nullptr);  // 2 . 2x3 -> 3 (column sums)
    CHECK(wv.shape == Shape{3});
    CHECK(wv.at(0) == doctest::Approx(5.0));
}

TEST_CASE("embed lookup rejects out-of-range rows") {
    Tensor table = Tensor::zeros({4, 2});
    const int64_t bad[1] = {4};
    CHECK_THROWS_AS(ops::embed_lookup(table, bad, nullptr), DataError);
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(5);
    Tensor x = rand_tensor({3, 6}, rng, -4.0, 4.0);
    Tensor s = ops::softmax_lastdim(x, nullptr);
    for (int64_t r = 0; r < 3; ++r) {
        double sum = 0.0;
        for (int64_t c = 0; c < 6; ++c) sum += s.at2(r, c);
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("bce with logits matches the closed form at p=0.5") {
    Tensor z = Tensor::zeros({1, 1});
    Tensor y({1, 1}, {1.0});
    CHECK(ops::bce_with_logits(z, y, nullptr).value() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("per-primitive gradients match finite differences") {
    Rng rng(23);
    const auto check = [&](const char* what, const std::function<Tensor(Tape*, std::vector<Tensor>&)>& f,
                           std::vector<Tensor> inputs) {
        const FdReport rep = fd_check(f, std::move(inputs));
        INFO(what, " max_rel=", rep.max_rel, " compared=", rep.compared);
        CHECK(rep.ok());
    };
    const auto to_scalar = [](Tensor t, Tape* tp) {
        while (t.numel() > 1) t = ops::mean_lastdim(t, tp);
        return t;
    };

    check("matmul", [&](Tape* t, std::vector<Tensor>& in) { return to_scalar(ops::matmul(in[0], in[1], t), t); },
          {rand_tensor({3, 4}, rng), rand_tensor({4, 2}, rng)});
    check("matmul transposed",
          [&](Tape* t, std::vector<Tensor>& in) { return to_scalar(ops::matmul(in[0], in[1], t, true, true), t); },
          {rand_tensor({4, 3}, rng), rand_tensor({2, 4}, rng)});
    check("add row broadcast",
          [&](Tape* t, std::vector<Tensor>& in) { return to_scalar(ops::add(in[0], in[1], t), t); },
          {rand_tensor({3, 4}, rng), rand_tensor({4}, rng)});
    check("sub scalar broadcast",
          [&](Tape* t, std::vector<Tensor>& in) { return to_scalar(ops::sub(in[0], in[1], t), t); },
          {rand_tensor({3, 4}, rng), rand_tensor({1}, rng)});
    check("mul column broadcast",
          [&](Tape* t, std::vector<Tensor>& in) { return to_scalar(ops::mul(in[0], in[1], t), t); },
          {rand_tensor({3, 4}, rng), rand_tensor({3, 1}, rng)});
    check("div",
          [&](Tape* t, std::vector<Tensor>& in) { return to_scalar(ops::div(in[0], in[1], t), t); },
          {rand_tensor({2, 3}, rng), rand_tensor({2, 3}, rng, 0.5, 2.0)});
    check("sigmoid/scale",
          [&](Tape* t, std::vector<Tensor>& in) { return to_scalar(ops::sigmoid(ops::scale(in[0], 1.7, t), t), t); },
          {rand_tensor({5}, rng)});
    check("relu", [&](Tape* t, std::vector<Tensor>& in) { return to_scalar(ops::relu(in[0], t), t); },
          {rand_tensor({4, 4}, rng)});
    check("softmax",
          [&](Tape* t, std::vector<Tensor>& in) {
              Tensor s = ops::softmax_lastdim(in[0], t);
              return to_scalar(ops::mul(s, s, t), t);
          },
          {rand_tensor({3, 5}, rng, -2.0, 2.0)});
    check("layernorm",
          [&](Tape* t, std::vector<Tensor>& in) {
              Tensor s = ops::layernorm_lastdim(in[0], t);
              return to_scalar(ops::mul(s, s, t), t);
          },
          {rand_tensor({2, 6}, rng)});
    check("maxpool", [&](Tape* t, std::vector<Tensor>& in) { return to_scalar(ops::maxpool_spatial(in[0], t), t); },
          {rand_tensor({3, 4, 4}, rng)});
    check("concat axis 0",
          [&](Tape* t, std::vector<Tensor>& in) {
              const Tensor* parts[2] = {&in[0], &in[1]};
              Tensor c = ops::concat(parts, 0, t);
              return to_scalar(ops::mul(c, c, t), t);
          },
          {rand_tensor({2, 3}, rng), rand_tensor({4, 3}, rng)});
    check("concat axis 1",
          [&](Tape* t, std::vector<Tensor>& in) {
              const Tensor* parts[2] = {&in[0], &in[1]};
              Tensor c = ops::concat(parts, 1, t);
              return to_scalar(ops::mul(c, c, t), t);
          },
          {rand_tensor({3, 2}, rng), rand_tensor({3, 5}, rng)});
    check("embed lookup with repeats",
          [&](Tape* t, std::vector<Tensor>& in) {
              const int64_t ids[3] = {1, 1, 0};
              return to_scalar(ops::embed_lookup(in[0], ids, t), t);
          },
          {rand_tensor({3, 4}, rng)});
    check("l2 distance",
          [&](Tape* t, std::vector<Tensor>& in) { return to_scalar(ops::l2_distance(in[0], in[1], t), t); },
          {rand_tensor({6}, rng), rand_tensor({6}, rng)});
    check("cosine",
          [&](Tape* t, std::vector<Tensor>& in) { return to_scalar(ops::cosine_similarity(in[0], in[1], t), t); },
          {rand_tensor({5}, rng, 0.2, 1.0), rand_tensor({5}, rng, 0.2, 1.0)});
    check("bce",
          [&](Tape* t, std::vector<Tensor>& in) {
              Tensor targets({4, 1}, {1.0, 0.0, 1.0, 0.0});
              return to_scalar(ops::bce_with_logits(in[0], targets, t), t);
          },
          {rand_tensor({4, 1}, rng, -2.0, 2.0)});
    check("bce target gradient",
          [&](Tape* t, std::vector<Tensor>& in) {
              Tensor logits({3}, {0.3, -0.8, 1.2});
              return to_scalar(ops::bce_with_logits(logits, in[0], t), t);
          },
          {rand_tensor({3}, rng, 0.1, 0.9)});
    check("conv2d",
          [&](Tape* t, std::vector<Tensor>& in) {
              return to_scalar(ops::conv2d(in[0], in[1], in[2], 2, 1, t), t);
          },
          {rand_tensor({2, 4, 4}, rng), rand_tensor({3, 2, 3, 3}, rng), rand_tensor({3}, rng)});
    check("reshape/transpose",
          [&](Tape* t, std::vector<Tensor>& in) {
              Tensor r = ops::transpose2d(ops::reshape(in[0], {3, 4}, t), t);
              return to_scalar(ops::mul(r, r, t), t);
          },
          {rand_tensor({12}, rng)});
    check("abs composite", [&](Tape* t, std::vector<Tensor>& in) { return to_scalar(ops::abs_compose(in[0], t), t); },
          {rand_tensor({7}, rng)});
}

TEST_CASE("identical inputs give bit-identical forward results") {
    Rng rng(29);
    Tensor a = rand_tensor({4, 4}, rng), b = rand_tensor({4, 4}, rng);
    Tensor y1 = ops::softmax_lastdim(ops::matmul(a, b, nullptr), nullptr);
    Tensor y2 = ops::softmax_lastdim(ops::matmul(a, b, nullptr), nullptr);
    CHECK(y1.same_values(y2));
}
