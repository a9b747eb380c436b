#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ddjscc/gradcheck.hpp"

using namespace ddjscc;

TEST_CASE("rel_err floors the denominator for near-zero gradients") {
    CHECK(gradcheck::rel_err(0.0, 1e-9) <= 1e-4);
    CHECK(gradcheck::rel_err(0.5, -0.5) > 1.0);
    CHECK(gradcheck::rel_err(2.0, 2.0) == 0.0);
}

TEST_CASE("op suite: every operation matches finite differences at 3 shapes") {
    auto results = gradcheck::run_op_checks(1234);
    CHECK(results.size() >= 24);  // 8 op families x 3 shapes
    for (const auto& r : results) {
        CHECK_MESSAGE(r.pass, r.name, " max_rel_err=", r.max_rel_err);
        CHECK(r.checked > 0);
    }
}

TEST_CASE("op filter restricts the scope") {
    auto results = gradcheck::run_op_checks(99, "conv2d");
    CHECK(results.size() == 3);
    for (const auto& r : results) CHECK(r.name.substr(0, 7) == "conv2d/");
}

TEST_CASE("end-to-end pipeline gradients match finite differences") {
    auto r = gradcheck::run_pipeline_check(2024);
    CHECK_MESSAGE(r.pass, r.name, " max_rel_err=", r.max_rel_err);
    CHECK(r.checked > 500);  // every parameter element was exercised
}

TEST_CASE("negative control: an injected wrong gradient is flagged") {
    // same loss, but the 'analytic' gradient is reported from a scaled loss;
    // the checker must fail it
    Rng rng(7);
    Tensor x({6});
    for (std::size_t i = 0; i < 6; ++i) x[i] = rng.uniform(-1, 1);
    auto broken = gradcheck::check_inputs(
        "broken-op",
        [](Tape& t, const std::vector<VarId>& in) {
            // gradient path sees 1.3x the loss the value path reports
            VarId honest = t.mse(in[0], in[1]);
            return t.scale(honest, 1.0 + 0.3 * static_cast<double>(t.needs_grad(in[0])));
        },
        {x, Tensor::zeros({6})});
    // value path (leaves without grad) evaluates scale(1.0); analytic path
    // (leaves with grad) evaluates scale(1.3): a deliberate 30% mismatch
    CHECK_FALSE(broken.pass);
    CHECK(broken.max_rel_err > 0.1);
}

TEST_CASE("full report aggregates pass/fail") {
    auto rep = gradcheck::run_all(5);
    CHECK(rep.all_pass());
    gradcheck::Report bad;
    gradcheck::Result r;
    r.name = "x";
    r.pass = false;
    bad.results.push_back(r);
    CHECK_FALSE(bad.all_pass());
}
