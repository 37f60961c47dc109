#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "treeground/common.hpp"
#include "treeground/optim.hpp"

using namespace tg;
using namespace tgtest;

namespace {

ParamStore one_param(double v) {
    ParamStore ps;
    ps.add("p", Tensor::scalar(v));
    return ps;
}

}  // namespace

TEST_CASE("zero gradient leaves parameters unchanged") {
    ParamStore ps = one_param(1.25);
    Adam opt;
    Tensor zero = Tensor::scalar(0.0);
    opt.step(ps, {&zero}, 0);
    opt.step(ps, {nullptr}, 0);  // null entry means zero gradient
    CHECK(ps.get("p").value() == 1.25);
    CHECK(opt.step_count() == 2);
}

TEST_CASE("effective lr drops by exactly the decay factor per period") {
    AdamConfig cfg;
    cfg.base_lr = 5e-5;
    cfg.decay_factor = 0.1;
    cfg.decay_period = 35;
    Adam opt(cfg);
    CHECK(opt.effective_lr(0) == 5e-5);
    CHECK(opt.effective_lr(34) == 5e-5);
    CHECK(opt.effective_lr(35) / opt.effective_lr(0) == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(opt.effective_lr(70) / opt.effective_lr(0) == doctest::Approx(0.01).epsilon(1e-12));
}

TEST_CASE("two steps of constant gradient match a hand-stepped reference") {
    AdamConfig cfg;
    cfg.base_lr = 1e-2;
    Adam opt(cfg);
    ParamStore ps = one_param(0.0);
    Tensor g = Tensor::scalar(1.0);

    double p = 0.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 2; ++t) {
        m = cfg.beta1 * m + (1 - cfg.beta1) * 1.0;
        v = cfg.beta2 * v + (1 - cfg.beta2) * 1.0;
        const double mhat = m / (1 - std::pow(cfg.beta1, t));
        const double vhat = v / (1 - std::pow(cfg.beta2, t));
        p -= cfg.base_lr * mhat / (std::sqrt(vhat) + cfg.eps);
        opt.step(ps, {&g}, 0);
        CHECK(ps.get("p").value() == doctest::Approx(p).epsilon(1e-14));
    }
}

TEST_CASE("non-finite gradients abort the step without mutating") {
    ParamStore ps = one_param(3.0);
    Adam opt;
    Tensor bad = Tensor::scalar(std::nan(""));
    CHECK_THROWS_AS(opt.step(ps, {&bad}, 0), NumericError);
    CHECK(ps.get("p").value() == 3.0);
    CHECK(opt.step_count() == 0);
}

TEST_CASE("gradient shape mismatch names the parameter") {
    ParamStore ps;
    ps.add("enc.w", Tensor::zeros({2, 2}));
    Adam opt;
    Tensor wrong = Tensor::zeros({3});
    try {
        opt.step(ps, {&wrong}, 0);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("enc.w") != std::string::npos);
    }
}

TEST_CASE("a descent step reduces a convex quadratic") {
    ParamStore ps = one_param(2.0);
    AdamConfig cfg;
    cfg.base_lr = 0.05;
    Adam opt(cfg);
    double prev = 4.0;
    for (int i = 0; i < 200; ++i) {
        const double x = ps.get("p").value();
        Tensor g = Tensor::scalar(2.0 * x);
        opt.step(ps, {&g}, 0);
    }
    const double x = ps.get("p").value();
    CHECK(x * x < prev);
    CHECK(std::abs(x) < 0.5);
}
