#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "rectattn/error.hpp"
#include "rectattn/gradcheck.hpp"
#include "rectattn/gradsuite.hpp"
#include "rectattn/ops.hpp"

using namespace rectattn;

namespace {

Tensor random_point(std::uint64_t seed, Shape shape) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = uniform(rng, -2.0, 2.0);
    return t;
}

} // namespace

TEST(GradCheck, SumOfSquares) {
    const ScalarFn f = [](Graph&, Var x) { return op::sum(op::mul(x, x)); };
    for (std::uint64_t s = 0; s < 10; ++s) EXPECT_LE(grad_check(f, random_point(s, {3, 2})), 1e-6);
}

TEST(GradCheck, TanhGradientAtZeroIsOne) {
    Graph g;
    Var x = g.leaf(Tensor({5}, 0.0));
    g.backward(op::sum(op::tanh(x)));
    for (double v : x.grad()) EXPECT_EQ(v, 1.0);
    EXPECT_LE(grad_check([](Graph&, Var v) { return op::sum(op::tanh(v)); }, Tensor({5}, 0.0)), 1e-6);
}

TEST(GradCheck, MatmulBackwardOnNonSquareShapes) {
    const Tensor b = random_point(7, {4, 3});
    const Tensor a = random_point(8, {2, 4});
    const Tensor w = probe_weights({2, 3});
    EXPECT_LE(grad_check([&](Graph& g, Var x) { return weighted_sum(op::matmul(x, g.constant(b)), w); }, a), 1e-7);
    EXPECT_LE(grad_check([&](Graph& g, Var x) { return weighted_sum(op::matmul(g.constant(a), x), w); }, b), 1e-7);
}

TEST(GradCheck, RejectsStepOutsideRange) {
    const ScalarFn f = [](Graph&, Var x) { return op::sum(x); };
    EXPECT_THROW(grad_check(f, Tensor({2}, 1.0), 0.0), DomainError);
    EXPECT_THROW(grad_check(f, Tensor({2}, 1.0), 1e-2), DomainError);
}

TEST(GradCheck, NonFiniteValueIsNumericError) {
    const ScalarFn f = [](Graph&, Var x) { return op::sum(op::exp(op::scale(x, 1e4))); };
    EXPECT_THROW(grad_check(f, Tensor({2}, 1.0)), NumericError);
}

TEST(GradSuite, EveryRegisteredOpPasses) {
    GradSuiteOptions opts;
    const GradSuiteReport report = run_grad_suite(default_grad_cases(), opts);
    for (const auto& c : report.cases) {
        EXPECT_TRUE(c.passed) << c.name << " worst=" << c.worst_error << " " << c.failure;
        EXPECT_EQ(c.points, opts.points) << c.name;
    }
    EXPECT_TRUE(report.passed());
}

TEST(GradSuite, CaseNamesAreUnique) {
    std::set<std::string> names;
    for (const GradCase& c : default_grad_cases()) EXPECT_TRUE(names.insert(c.name).second) << c.name;
}

TEST(GradSuite, WrongBackwardRuleIsCaught) {
    GradCase bad;
    bad.name = "tanh_with_wrong_backward";
    bad.sample = [](Rng& rng) {
        Tensor t({4});
        for (double& v : t.values()) v = uniform(rng, -2.0, 2.0);
        return std::vector<Tensor>{t};
    };
    bad.f = [](Graph&, const std::vector<Var>& xs) {
        // Value tanh(x) but derivative 1 - tanh(x), a sign slip.
        Var y = op::unary(xs[0], [](std::span<const double> x, std::span<double> out, std::span<double> d) {
            for (std::size_t i = 0; i < x.size(); ++i) {
                out[i] = std::tanh(x[i]);
                d[i] = 1.0 - out[i];
            }
        });
        return op::sum(y);
    };
    GradSuiteOptions opts;
    opts.points = 5;
    const GradSuiteReport report = run_grad_suite({bad}, opts);
    EXPECT_FALSE(report.passed());
    EXPECT_GT(report.cases[0].worst_error, 1e-2);
}

TEST(Ops, LogsumexpMatchesDirectEvaluation) {
    Graph g;
    Var a = g.constant(Tensor::vector({0.3, -700.0, 5.0}));
    Var b = g.constant(Tensor::vector({-1.2, -700.0, 800.0}));
    Var z = g.constant(Tensor::vector({0.0, 0.0, 0.0}));
    const Tensor& y = op::logsumexp({a, b, z}).value();
    EXPECT_NEAR(y[0], std::log(std::exp(0.3) + std::exp(-1.2) + 1.0), 1e-14);
    EXPECT_NEAR(y[1], std::log(2.0 * std::exp(-700.0) + 1.0), 1e-14);
    EXPECT_NEAR(y[2], 800.0, 1e-12);
}

TEST(Ops, CrossEntropyOfUniformLogitsIsLogClasses) {
    Graph g;
    Var logits = g.constant(Tensor({3, 7}, 0.25));
    const std::vector<int> targets = {0, 6, -1};
    EXPECT_NEAR(op::cross_entropy(logits, targets).value().item(), std::log(7.0), 1e-14);
}

TEST(Ops, GatherRowsRejectsOutOfRangeIds) {
    Graph g;
    Var table = g.constant(Tensor({3, 2}));
    const std::vector<int> ids = {0, 3};
    EXPECT_THROW(op::gather_rows(table, ids), VocabularyError);
}
