#include "rectattn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "rectattn/error.hpp"
#include "rectattn/ops.hpp"

namespace rectattn {

namespace {

double evaluate(const MultiScalarFn& f, const std::vector<Tensor>& points) {
    Graph g;
    std::vector<Var> xs;
    xs.reserve(points.size());
    for (const Tensor& p : points) xs.push_back(g.constant(p));
    const Var y = f(g, xs);
    const double v = y.value().item();
    if (!std::isfinite(v)) throw NumericError("non-finite function value during finite differencing");
    return v;
}

} // namespace

GradCheckResult grad_check_inputs(const MultiScalarFn& f, const std::vector<Tensor>& points, double step) {
    if (!(step > 0.0 && step <= 1e-3)) throw DomainError("grad_check step must lie in (0, 1e-3]");

    Graph g;
    std::vector<Var> xs;
    for (const Tensor& p : points) xs.push_back(g.leaf(p, true));
    Var y = f(g, xs);
    if (!std::isfinite(y.value().item())) throw NumericError("non-finite function value at the check point");
    g.backward(y);

    GradCheckResult res;
    std::vector<Tensor> probe = points;
    std::size_t flat = 0;
    for (std::size_t k = 0; k < points.size(); ++k) {
        const auto gx = xs[k].grad();
        for (std::size_t i = 0; i < points[k].size(); ++i, ++flat) {
            const double analytic = gx.empty() ? 0.0 : gx[i];
            if (!std::isfinite(analytic)) throw NumericError("non-finite analytic gradient");
            const double orig = probe[k][i];
            probe[k][i] = orig + step;
            const double fp = evaluate(f, probe);
            probe[k][i] = orig - step;
            const double fm = evaluate(f, probe);
            probe[k][i] = orig;
            const double numeric = (fp - fm) / (2.0 * step);
            const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            const double rel = std::abs(analytic - numeric) / denom;
            if (rel >= res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_index = flat;
                res.analytic = analytic;
                res.numeric = numeric;
            }
        }
    }
    return res;
}

GradCheckResult grad_check_detailed(const ScalarFn& f, const Tensor& point, double step) {
    return grad_check_inputs([&f](Graph& g, const std::vector<Var>& xs) { return f(g, xs[0]); }, {point},
                             step);
}

double grad_check(const ScalarFn& f, const Tensor& point, double step) {
    return grad_check_detailed(f, point, step).max_rel_error;
}

bool GradSuiteReport::passed() const {
    return std::all_of(cases.begin(), cases.end(), [](const GradCaseReport& c) { return c.passed; });
}

GradSuiteReport run_grad_suite(const std::vector<GradCase>& cases, const GradSuiteOptions& opts) {
    GradSuiteReport report;
    report.tolerance = opts.tolerance;
    for (const GradCase& gc : cases) {
        GradCaseReport r;
        r.name = gc.name;
        r.step = gc.step > 0.0 ? gc.step : opts.step;
        Rng rng(derive_seed(opts.seed, gc.name));
        try {
            while (r.points < opts.points) {
                std::vector<Tensor> p = gc.sample(rng);
                if (gc.near_kink && gc.near_kink(p)) {
                    ++r.redrawn;
                    if (r.redrawn > 100 * opts.points) throw NumericError("could not draw points away from kinks");
                    continue;
                }
                r.worst_error = std::max(r.worst_error, grad_check_inputs(gc.centered_at ? gc.centered_at(p) : gc.f, p, r.step).max_rel_error);
                ++r.points;
            }
            r.passed = r.worst_error <= opts.tolerance;
        } catch (const Error& e) {
            r.passed = false;
            r.failure = e.what();
        }
        report.cases.push_back(std::move(r));
    }
    return report;
}

// Fused contraction accumulated in extended precision. Finite differences
// subtract two nearly equal sums, and plain double accumulation leaves
// roundoff of order 1e-16 * |f| / step in the numeric gradient.
Var weighted_sum(Var y, const Tensor& weights) {
    const auto yv = y.value().values();
    const auto wv = weights.values();
    if (yv.size() != wv.size()) throw DimensionError("weighted_sum: weight count does not match tensor size");
    long double acc = 0.0L;
    for (std::size_t i = 0; i < yv.size(); ++i) acc += static_cast<long double>(yv[i]) * wv[i];
    const std::uint32_t iy = y.id();
    std::vector<double> w(wv.begin(), wv.end());
    return y.graph().record(Tensor::scalar(static_cast<double>(acc)), {iy},
                            [iy, w = std::move(w)](Graph& g, std::uint32_t self) {
                                const double gs = g.grad(self)[0];
                                auto gy = g.grad(iy);
                                for (std::size_t i = 0; i < w.size(); ++i) gy[i] += gs * w[i];
                            });
}

} // namespace rectattn
