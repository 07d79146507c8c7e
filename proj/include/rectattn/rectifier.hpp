#pragma once

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rectattn/graph.hpp"

namespace rectattn {

// Nonlinearity applied to the low-rank attention update before it is added
// to the frozen base logit. All variants but Identity saturate near +-xi.
enum class RectifierVariant {
    ExactMaxMin,    // max(xi tanh x, x) for x >= 0, min(xi tanh x, x) otherwise
    SmoothLse,      // log(e^a + e^b + 1) - log(e^-a + e^-b + 1), a = xi tanh x, b = x
    TanhOnly,       // xi tanh x
    TanhPlusX,      // xi tanh x + x
    SigmoidMaxMin,  // ExactMaxMin with xi tanh x replaced by k xi (sigmoid(x) - 1/2)
    Identity,
};

inline constexpr std::array<RectifierVariant, 6> kAllVariants = {
    RectifierVariant::ExactMaxMin, RectifierVariant::SmoothLse,     RectifierVariant::TanhOnly,
    RectifierVariant::TanhPlusX,   RectifierVariant::SigmoidMaxMin, RectifierVariant::Identity,
};

std::string to_string(RectifierVariant v);
// Accepts the upper-case names (EXACT_MAXMIN, ...). Throws ConfigError.
RectifierVariant parse_variant(std::string_view name);

struct RectifierConfig {
    RectifierVariant variant = RectifierVariant::ExactMaxMin;
    double xi_max = 3.0;
    // Fraction of training over which xi ramps linearly from 0 to xi_max.
    double ramp_fraction = 0.8;
    // Multiplier k on (sigmoid(x) - 1/2) for SigmoidMaxMin; 2 gives limits +-xi.
    double sigmoid_scale = 2.0;

    void validate() const;
};

// g(x) for the configured variant at saturation threshold xi.
double rectify(double x, const RectifierConfig& cfg, double xi);
// dg/dx; at max/min crossovers the linear branch (slope 1) is taken.
double rectify_derivative(double x, const RectifierConfig& cfg, double xi);
// Vectorized value and derivative.
void rectify(std::span<const double> x, std::span<double> y, std::span<double> dy,
             const RectifierConfig& cfg, double xi);
// Graph op. Throws DomainError if xi is outside [0, cfg.xi_max].
Var rectify(Var x, const RectifierConfig& cfg, double xi);

// Ramp schedule: xi_max * min(1, step / (ramp_fraction * total_steps)).
// Throws ConfigError when total_steps == 0, DomainError when step > total.
double xi_at(long step, long total_steps, const RectifierConfig& cfg);

// Points where g is continuous but not differentiable (branch crossovers of
// the max/min variants). Empty for smooth variants.
std::vector<double> kink_points(const RectifierConfig& cfg, double xi);

} // namespace rectattn
