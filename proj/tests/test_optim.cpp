#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ddjscc/autodiff.hpp"
#include "ddjscc/optim.hpp"

using namespace ddjscc;

namespace {

// runs backward over loss = sum(g .* p) so p's gradient is exactly g
void set_grad(ParamStore& ps, const std::string& name, const Tensor& g) {
    ps.accumulate_grad(ps.index_of(name), g);
}

}  // namespace

TEST_CASE("adam: zero gradient leaves parameter and moments untouched") {
    ParamStore ps;
    ps.add("p", Tensor::full({3}, 1.5));
    set_grad(ps, "p", Tensor::zeros({3}));
    adam_step(ps, 0.1);
    for (std::size_t i = 0; i < 3; ++i) CHECK(ps.value("p")[i] == 1.5);
    CHECK(ps.entry(0).m1[0] == 0.0);
    CHECK(ps.entry(0).m2[0] == 0.0);
}

TEST_CASE("adam: constant positive gradient decreases the parameter monotonically") {
    ParamStore ps;
    ps.add("p", Tensor::scalar(1.0));
    double prev = 1.0;
    for (int i = 0; i < 50; ++i) {
        set_grad(ps, "p", Tensor::scalar(0.3));
        adam_step(ps, 1e-2);
        CHECK(ps.value("p")[0] < prev);
        prev = ps.value("p")[0];
    }
}

TEST_CASE("adam: bias-corrected first step moves by ~lr") {
    // p=1, g=1, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8:
    // mhat=1, vhat=1 -> p' = 1 - 1e-4/(1+1e-8)
    ParamStore ps;
    ps.add("p", Tensor::scalar(1.0));
    set_grad(ps, "p", Tensor::scalar(1.0));
    adam_step(ps, 1e-4, 0.9, 0.999, 1e-8);
    CHECK(std::abs(ps.value("p")[0] - (1.0 - 1e-4)) <= 1e-8);
}

TEST_CASE("adam: step without populated gradients is a usage error") {
    ParamStore ps;
    ps.add("p", Tensor::scalar(1.0));
    CHECK_THROWS_AS(adam_step(ps, 0.1), UsageError);
    // and gradients are cleared after a step
    set_grad(ps, "p", Tensor::scalar(1.0));
    adam_step(ps, 0.1);
    CHECK_THROWS_AS(adam_step(ps, 0.1), UsageError);
}

TEST_CASE("adam: shared step counter bumps once per step") {
    ParamStore ps;
    ps.add("a", Tensor::scalar(1.0));
    ps.add("b", Tensor::scalar(1.0));
    set_grad(ps, "a", Tensor::scalar(1.0));
    set_grad(ps, "b", Tensor::scalar(1.0));
    adam_step(ps, 1e-3);
    CHECK(ps.step_count() == 1);
    set_grad(ps, "a", Tensor::scalar(1.0));
    adam_step(ps, 1e-3);
    CHECK(ps.step_count() == 2);
}

TEST_CASE("param store: gradient shape must match parameter shape") {
    ParamStore ps;
    ps.add("p", Tensor::zeros({2, 2}));
    CHECK_THROWS_AS(ps.accumulate_grad(0, Tensor::zeros({4})), DimensionError);
    CHECK_THROWS_AS(ps.add("p", Tensor::zeros({1})), UsageError);
    CHECK_THROWS_AS(ps.value("nope"), UsageError);
}
