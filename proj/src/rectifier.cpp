#include "rectattn/rectifier.hpp"

#include <algorithm>
#include <cmath>

#include "rectattn/error.hpp"
#include "rectattn/ops.hpp"

namespace rectattn {

std::string to_string(RectifierVariant v) {
    switch (v) {
        case RectifierVariant::ExactMaxMin: return "EXACT_MAXMIN";
        case RectifierVariant::SmoothLse: return "SMOOTH_LSE";
        case RectifierVariant::TanhOnly: return "TANH_ONLY";
        case RectifierVariant::TanhPlusX: return "TANH_PLUS_X";
        case RectifierVariant::SigmoidMaxMin: return "SIGMOID_MAXMIN";
        case RectifierVariant::Identity: return "IDENTITY";
    }
    return "UNKNOWN";
}

RectifierVariant parse_variant(std::string_view name) {
    for (RectifierVariant v : kAllVariants) {
        if (to_string(v) == name) return v;
    }
    throw ConfigError("unknown rectifier variant '" + std::string(name) + "'");
}

void RectifierConfig::validate() const {
    if (!(xi_max >= 0.0) || !std::isfinite(xi_max)) throw ConfigError("rectifier.xi_max must be finite and >= 0");
    if (!(ramp_fraction >= 0.0 && ramp_fraction <= 1.0)) throw ConfigError("rectifier.ramp_fraction must lie in [0, 1]");
    if (!(sigmoid_scale > 0.0)) throw ConfigError("rectifier.sigmoid_scale must be > 0");
}

namespace {

struct ValueSlope {
    double value;
    double slope;
};

// Saturating branch of the max/min variants.
ValueSlope saturating(double x, const RectifierConfig& cfg, double xi) {
    if (cfg.variant == RectifierVariant::SigmoidMaxMin) {
        // k xi (sigmoid(x) - 1/2) == (k xi / 2) tanh(x / 2), written in the
        // tanh form so the result is exactly odd.
        const double t = std::tanh(0.5 * x);
        const double amp = 0.5 * cfg.sigmoid_scale * xi;
        return {amp * t, 0.5 * amp * (1.0 - t * t)};
    }
    const double t = std::tanh(x);
    return {xi * t, xi * (1.0 - t * t)};
}

ValueSlope max_min(double x, const RectifierConfig& cfg, double xi) {
    const ValueSlope s = saturating(x, cfg, xi);
    const bool take_saturating = x >= 0.0 ? s.value > x : s.value < x;
    return take_saturating ? s : ValueSlope{x, 1.0};
}

// log(e^p + e^q + 1) and its weights on p and q.
struct Lse3 {
    double value;
    double wp;
    double wq;
};

Lse3 lse3(double p, double q) {
    const double m = std::max({p, q, 0.0});
    const double ep = std::exp(p - m), eq = std::exp(q - m), e0 = std::exp(-m);
    const double s = ep + eq + e0;
    return {m + std::log(s), ep / s, eq / s};
}

ValueSlope evaluate(double x, const RectifierConfig& cfg, double xi) {
    switch (cfg.variant) {
        case RectifierVariant::ExactMaxMin:
        case RectifierVariant::SigmoidMaxMin:
            return max_min(x, cfg, xi);
        case RectifierVariant::SmoothLse: {
            const double t = std::tanh(x);
            const double a = xi * t;
            const double da = xi * (1.0 - t * t);
            const Lse3 hi = lse3(a, x);
            const Lse3 lo = lse3(-a, -x);
            return {hi.value - lo.value, hi.wp * da + hi.wq + lo.wp * da + lo.wq};
        }
        case RectifierVariant::TanhOnly: {
            const double t = std::tanh(x);
            return {xi * t, xi * (1.0 - t * t)};
        }
        case RectifierVariant::TanhPlusX: {
            const double t = std::tanh(x);
            return {xi * t + x, xi * (1.0 - t * t) + 1.0};
        }
        case RectifierVariant::Identity:
            return {x, 1.0};
    }
    return {x, 1.0};
}

void check_xi(const RectifierConfig& cfg, double xi) {
    if (cfg.variant == RectifierVariant::Identity) return;
    if (!(xi >= 0.0) || xi > cfg.xi_max * (1.0 + 1e-12)) {
        throw DomainError("xi " + std::to_string(xi) + " outside [0, " + std::to_string(cfg.xi_max) + "]");
    }
}

} // namespace

double rectify(double x, const RectifierConfig& cfg, double xi) { return evaluate(x, cfg, xi).value; }

double rectify_derivative(double x, const RectifierConfig& cfg, double xi) {
    return evaluate(x, cfg, xi).slope;
}

void rectify(std::span<const double> x, std::span<double> y, std::span<double> dy,
             const RectifierConfig& cfg, double xi) {
    for (std::size_t i = 0; i < x.size(); ++i) {
        const ValueSlope r = evaluate(x[i], cfg, xi);
        y[i] = r.value;
        if (!dy.empty()) dy[i] = r.slope;
    }
}

Var rectify(Var x, const RectifierConfig& cfg, double xi) {
    check_xi(cfg, xi);
    return op::unary(x, [cfg, xi](std::span<const double> in, std::span<double> out, std::span<double> d) {
        rectify(in, out, d, cfg, xi);
    });
}

double xi_at(long step, long total_steps, const RectifierConfig& cfg) {
    if (total_steps <= 0) throw ConfigError("xi_at: total_steps must be positive");
    if (step < 0 || step > total_steps) throw DomainError("xi_at: step outside [0, total_steps]");
    const double ramp = cfg.ramp_fraction * static_cast<double>(total_steps);
    if (ramp <= 0.0) return cfg.xi_max;
    return cfg.xi_max * std::min(1.0, static_cast<double>(step) / ramp);
}

std::vector<double> kink_points(const RectifierConfig& cfg, double xi) {
    if (cfg.variant != RectifierVariant::ExactMaxMin && cfg.variant != RectifierVariant::SigmoidMaxMin) return {};
    // The saturating branch crosses the identity away from 0 only when its
    // slope at the origin exceeds 1.
    const double slope0 = saturating(0.0, cfg, xi).slope;
    if (slope0 <= 1.0) return {};
    double lo = 0.0;
    double hi = std::max(1.0, 2.0 * slope0);
    while (saturating(hi, cfg, xi).value > hi) hi *= 2.0;
    lo = 1e-300;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (saturating(mid, cfg, xi).value > mid) lo = mid; else hi = mid;
    }
    const double k = 0.5 * (lo + hi);
    return {-k, k};
}

} // namespace rectattn
