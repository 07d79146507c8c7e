#pragma once

#include <functional>
#include <string>
#include <vector>

#include "rectattn/graph.hpp"
#include "rectattn/rng.hpp"

namespace rectattn {

// Builds a scalar from a leaf holding the evaluation point.
using ScalarFn = std::function<Var(Graph&, Var)>;
// Same, for ops with several differentiable inputs.
using MultiScalarFn = std::function<Var(Graph&, const std::vector<Var>&)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

// Compares the reverse-mode gradient of f at `point` with central differences
// (f(x+h) - f(x-h)) / 2h, coordinate by coordinate. Relative error uses the
// denominator max(|analytic|, |numeric|, 1e-8).
//
// Throws DomainError if step is outside (0, 1e-3] and NumericError on any
// non-finite value or gradient.
GradCheckResult grad_check_detailed(const ScalarFn& f, const Tensor& point, double step = 1e-6);
double grad_check(const ScalarFn& f, const Tensor& point, double step = 1e-6);
// Checks every input; worst_index counts through the inputs in order.
GradCheckResult grad_check_inputs(const MultiScalarFn& f, const std::vector<Tensor>& points,
                                  double step = 1e-6);

// One registered op in a gradient suite.
struct GradCase {
    std::string name;
    // Draws the op's inputs.
    std::function<std::vector<Tensor>(Rng&)> sample;
    MultiScalarFn f;
    // Optional. Returns f shifted by a constant chosen at the check point, so
    // the value near that point is small and its double rounding no longer
    // swamps the finite difference. Used instead of f when set.
    std::function<MultiScalarFn(const std::vector<Tensor>&)> centered_at;
    // Points for which this returns true sit too close to a kink and are
    // redrawn. May be empty.
    std::function<bool(const std::vector<Tensor>&)> near_kink;
    // Finite-difference step; 0 uses the suite default.
    double step = 0.0;
};

struct GradCaseReport {
    std::string name;
    std::size_t points = 0;
    std::size_t redrawn = 0;
    double step = 0.0;
    double worst_error = 0.0;
    bool passed = false;
    std::string failure;  // non-empty when a check threw
};

struct GradSuiteReport {
    std::vector<GradCaseReport> cases;
    double tolerance = 0.0;
    bool passed() const;
};

struct GradSuiteOptions {
    std::size_t points = 100;
    double step = 1e-6;
    double tolerance = 1e-5;
    std::uint64_t seed = 0;
};

GradSuiteReport run_grad_suite(const std::vector<GradCase>& cases, const GradSuiteOptions& opts);

// Fixed-weight contraction sum(y * w): turns a tensor-valued op into the
// scalar grad_check needs while keeping every output coordinate in play.
Var weighted_sum(Var y, const Tensor& weights);

} // namespace rectattn
