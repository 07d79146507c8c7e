#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rectattn/rectifier.hpp"
#include "rectattn/serialize.hpp"
#include "rectattn/tensor.hpp"

namespace rectattn {

struct TheoryInstance {
    Tensor X;  // n x m token embeddings
    Tensor W;  // m x m base bilinear form
    std::vector<int> r;  // 1 relevant, 0 noise
    // Rows whose attention pattern is scored; empty means every row.
    std::vector<std::size_t> query_rows;

    std::size_t n() const { return X.rows(); }
    std::vector<std::size_t> rows() const;
    // n >= 3, shapes agree, r holds both values.
    void validate() const;
};

// x_i^T W x_j for every pair.
Tensor base_scores(const TheoryInstance& inst);

// Base softmax restricted to the relevant columns, zero on noise columns.
// Throws DegenerateError if no column is relevant.
Tensor build_target(const TheoryInstance& inst);

struct EpsilonResult {
    double epsilon = 0.0;
    double noise_mass = 0.0;
    // Relevant entries skipped because T < 1e-15.
    std::size_t excluded = 0;
};

// epsilon = max |P/T - 1| over relevant entries, noise_mass = max row sum of
// P over noise columns. `rows` empty means every row.
EpsilonResult epsilon_of(const Tensor& P, const Tensor& T, const std::vector<int>& r,
                         const std::vector<std::size_t>& rows = {});

// Max over scored rows of the spread of `scores` over relevant columns.
double xi_r_of(const TheoryInstance& inst, const Tensor& scores);

// ln(1 / (1 - epsilon)); DomainError unless 0 <= epsilon < 1.
double bound_value(double epsilon);

enum class FitKind { Linear, Rectified };
std::string to_string(FitKind k);

struct FitConfig {
    FitKind kind = FitKind::Rectified;
    int rank = 2;
    int restarts = 20;
    int steps = 2000;
    double xi = 3.0;
    double lambda = 10.0;
    double learning_rate = 0.05;
    double init_scale = 0.5;
    RectifierVariant variant = RectifierVariant::ExactMaxMin;
    std::uint64_t seed = 0;
};

struct FitReport {
    std::uint64_t seed = 0;
    FitKind kind = FitKind::Rectified;
    int rank = 0;
    double xi = 0.0;
    double epsilon = 0.0;
    double noise_mass = 0.0;
    double xi_r = 0.0;
    double bound = 0.0;  // +inf when epsilon >= 1
    double loss = 0.0;
    double relevant_term = 0.0;  // sum of (P/T - 1)^2 at the reported fit
    int restarts = 0;
    int steps = 0;
    int diverged = 0;
    std::size_t excluded = 0;
    Tensor A, B;  // m x rank, rank x m
};

// Attention after the update: softmax(base + u), u = S or g(S), S = X A B X^T.
Tensor updated_attention(const TheoryInstance& inst, const Tensor& A, const Tensor& B, FitKind kind,
                         const RectifierConfig& rc, double xi);

struct FitObjective {
    double loss = 0.0;
    double relevant_term = 0.0;
    Tensor grad_a, grad_b;
};

// The fit loss below and its gradient in (A, B), derived by hand.
FitObjective fit_objective(const TheoryInstance& inst, const Tensor& A, const Tensor& B, const FitConfig& cfg);

// Multi-restart Adam on the factors, minimizing
//   sum_i [ sum_{noise j} P_ij + lambda sum_{relevant j} (P_ij / T_ij - 1)^2 ].
// Returns the restart with the lowest final loss. Restarts whose loss turns
// non-finite are counted in `diverged` and skipped.
FitReport fit_delta(const TheoryInstance& inst, const FitConfig& cfg);

// n tokens with `n_noise` noise tokens. Relevant embeddings are Gaussian;
// each noise token extrapolates along the line through its own pair of
// relevant tokens, x = t x_a + (1 - t) x_b with t = `extrapolation`. Any
// linear score is affine along that line, so it cannot push the noise token
// down without spreading the two relevant scores by about 1/t of the push;
// a saturating update can park both relevant scores on its flat region.
TheoryInstance canonical_instance(std::uint64_t seed, int n = 6, int m = 8, int n_noise = 2,
                                  double extrapolation = 5.0, double base_scale = 0.03);

struct TheoryConfig {
    int n = 6;
    int m = 8;
    int n_noise = 2;
    int seeds = 50;
    std::uint64_t first_seed = 0;
    int rank = 2;
    int restarts = 20;
    int steps = 2000;
    double xi = 3.0;
    double lambda = 10.0;
    double learning_rate = 0.05;
    double extrapolation = 5.0;
    double base_scale = 0.03;
    double noise_threshold = 0.05;
    double epsilon_threshold = 0.1;
    double rectified_min_rate = 0.8;
    double linear_max_rate = 0.3;

    // |ln(noise_threshold * n)|: the ln(eps n) term the bound drops.
    double slack() const;
    void validate() const;
};

struct TheorySummary {
    std::vector<FitReport> fits;  // seed-major, LINEAR then RECTIFIED
    double rectified_rate = 0.0;
    double linear_rate = 0.0;
    int theorem_checked = 0;  // LINEAR fits with noise_mass <= threshold
    int theorem_violations = 0;
    bool passed = false;
};

bool fit_succeeds(const FitReport& f, const TheoryConfig& cfg);
TheorySummary run_theory(const TheoryConfig& cfg);

// Columns: seed,kind,rank,xi,epsilon,noise_mass,xi_r,bound,loss,slack,success.
void write_theory_csv(const TheorySummary& summary, const TheoryConfig& cfg, const std::string& path);

Json to_json(const TheoryConfig& c);
TheoryConfig theory_config_from_json(const Json& j, const std::string& path = "theory");

} // namespace rectattn
