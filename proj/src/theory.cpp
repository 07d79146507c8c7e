#include "rectattn/theory.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "rectattn/error.hpp"
#include "rectattn/metrics.hpp"
#include "rectattn/rng.hpp"

namespace rectattn {

namespace {

constexpr double kTinyTarget = 1e-15;

// Row-major dense helpers; the fit runs millions of tiny steps, so it skips
// the graph entirely.
using Mat = std::vector<double>;

void matmul(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t t = 0; t < k; ++t) s += a[i * k + t] * b[t * m + j];
            c[i * m + j] = s;
        }
}

void softmax_row(const double* z, double* p, std::size_t n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, z[j]);
    long double total = 0.0L;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(static_cast<long double>(z[j] - mx));
    for (std::size_t j = 0; j < n; ++j) p[j] = static_cast<double>(std::exp(static_cast<long double>(z[j] - mx)) / total);
}

} // namespace

std::vector<std::size_t> TheoryInstance::rows() const {
    if (!query_rows.empty()) return query_rows;
    std::vector<std::size_t> all(n());
    std::iota(all.begin(), all.end(), 0);
    return all;
}

void TheoryInstance::validate() const {
    if (X.ndim() != 2 || W.ndim() != 2) throw DimensionError("theory instance: X and W must be matrices");
    if (X.rows() < 3) throw DimensionError("theory instance: n must be >= 3");
    if (W.rows() != X.cols() || W.cols() != X.cols()) throw DimensionError("theory instance: W must be m x m");
    if (r.size() != X.rows()) throw DimensionError("theory instance: r must have n entries");
    // All-relevant instances are allowed: they are the nothing-to-filter control.
    if (std::count(r.begin(), r.end(), 1) == 0) throw DegenerateError("theory instance: no relevant token");
    for (std::size_t q : query_rows)
        if (q >= X.rows()) throw DimensionError("theory instance: query row out of range");
}

Tensor base_scores(const TheoryInstance& inst) {
    const std::size_t n = inst.X.rows(), m = inst.X.cols();
    Mat xw(n * m);
    matmul(inst.X.data().data(), inst.W.data().data(), xw.data(), n, m, m);
    Tensor s({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double v = 0.0;
            for (std::size_t t = 0; t < m; ++t) v += xw[i * m + t] * inst.X.at(j, t);
            s.at(i, j) = v;
        }
    return s;
}

Tensor build_target(const TheoryInstance& inst) {
    if (inst.X.ndim() != 2 || inst.r.size() != inst.X.rows()) throw DimensionError("build_target: r must have n entries");
    if (std::count(inst.r.begin(), inst.r.end(), 1) == 0) throw DegenerateError("build_target: row with no relevant column");
    const Tensor s = base_scores(inst);
    const std::size_t n = s.rows();
    Tensor t({n, n}, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (inst.r[j]) mx = std::max(mx, s.at(i, j));
        long double total = 0.0L;
        for (std::size_t j = 0; j < n; ++j)
            if (inst.r[j]) total += std::exp(static_cast<long double>(s.at(i, j) - mx));
        for (std::size_t j = 0; j < n; ++j)
            if (inst.r[j]) t.at(i, j) = static_cast<double>(std::exp(static_cast<long double>(s.at(i, j) - mx)) / total);
    }
    return t;
}

EpsilonResult epsilon_of(const Tensor& P, const Tensor& T, const std::vector<int>& r, const std::vector<std::size_t>& rows) {
    if (P.shape() != T.shape() || P.ndim() != 2 || P.cols() != r.size())
        throw DimensionError("epsilon_of: P, T and r disagree in shape");
    std::vector<std::size_t> use = rows;
    if (use.empty()) {
        use.resize(P.rows());
        std::iota(use.begin(), use.end(), 0);
    }
    EpsilonResult out;
    for (std::size_t i : use) {
        double noise = 0.0;
        for (std::size_t j = 0; j < r.size(); ++j) {
            if (!r[j]) {
                noise += P.at(i, j);
            } else if (T.at(i, j) < kTinyTarget) {
                ++out.excluded;
            } else {
                out.epsilon = std::max(out.epsilon, std::abs(P.at(i, j) / T.at(i, j) - 1.0));
            }
        }
        out.noise_mass = std::max(out.noise_mass, noise);
    }
    return out;
}

double xi_r_of(const TheoryInstance& inst, const Tensor& scores) {
    if (scores.ndim() != 2 || scores.rows() != inst.n() || scores.cols() != inst.n())
        throw DimensionError("xi_r_of: scores must be n x n");
    double out = 0.0;
    for (std::size_t i : inst.rows()) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (std::size_t j = 0; j < inst.n(); ++j)
            if (inst.r[j]) {
                lo = std::min(lo, scores.at(i, j));
                hi = std::max(hi, scores.at(i, j));
            }
        if (hi >= lo) out = std::max(out, hi - lo);
    }
    return out;
}

double bound_value(double epsilon) {
    if (!(epsilon >= 0.0 && epsilon < 1.0)) throw DomainError("bound_value: epsilon must lie in [0, 1)");
    return -std::log1p(-epsilon);
}

std::string to_string(FitKind k) { return k == FitKind::Linear ? "LINEAR" : "RECTIFIED"; }

namespace {

struct FitState {
    const TheoryInstance& inst;
    const Tensor& base;
    const Tensor& target;
    std::vector<std::size_t> rows;
    FitKind kind;
    RectifierConfig rc;
    double xi;
    double lambda;
    std::size_t n, m, k;

    // Scratch.
    Mat xa, bx, s, u, du, p, ds, tmp, dsx;

    FitState(const TheoryInstance& i, const Tensor& b, const Tensor& t, FitKind kd, const RectifierConfig& r, double x,
             double lam, std::size_t rank)
        : inst(i), base(b), target(t), rows(i.rows()), kind(kd), rc(r), xi(x), lambda(lam), n(i.n()), m(i.X.cols()),
          k(rank), xa(n * k), bx(k * n), s(n * n), u(n * n), du(n * n), p(n * n), ds(n * n), tmp(n * k), dsx(n * m) {}

    // Raw scores S = (X A)(B X^T) into s.
    void scores(const Mat& A, const Mat& B) {
        matmul(inst.X.data().data(), A.data(), xa.data(), n, m, k);
        for (std::size_t a = 0; a < k; ++a)
            for (std::size_t j = 0; j < n; ++j) {
                double v = 0.0;
                for (std::size_t t = 0; t < m; ++t) v += B[a * m + t] * inst.X.at(j, t);
                bx[a * n + j] = v;
            }
        matmul(xa.data(), bx.data(), s.data(), n, k, n);
    }

    // Loss at (A, B); fills gradients when gA/gB are non-null.
    double eval(const Mat& A, const Mat& B, Mat* gA, Mat* gB, double* relevant_term = nullptr) {
        scores(A, B);
        if (kind == FitKind::Linear) {
            u = s;
            std::fill(du.begin(), du.end(), 1.0);
        } else {
            rectify(s, u, du, rc, xi);
        }
        double loss = 0.0, rel = 0.0;
        std::fill(ds.begin(), ds.end(), 0.0);
        std::vector<double> z(n), dp(n);
        for (std::size_t i : rows) {
            for (std::size_t j = 0; j < n; ++j) z[j] = base.at(i, j) + u[i * n + j];
            softmax_row(z.data(), &p[i * n], n);
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double pij = p[i * n + j];
                if (!inst.r[j]) {
                    loss += pij;
                    dp[j] = 1.0;
                } else if (target.at(i, j) >= kTinyTarget) {
                    const double t = target.at(i, j), d = pij / t - 1.0;
                    rel += d * d;
                    loss += lambda * d * d;
                    dp[j] = 2.0 * lambda * d / t;
                } else {
                    dp[j] = 0.0;
                }
                dot += pij * dp[j];
            }
            for (std::size_t j = 0; j < n; ++j) ds[i * n + j] = p[i * n + j] * (dp[j] - dot) * du[i * n + j];
        }
        if (relevant_term) *relevant_term = rel;
        if (gA && gB) {
            // dA = X^T (dS (B X^T)^T), dB = (X A)^T dS X.
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t a = 0; a < k; ++a) {
                    double v = 0.0;
                    for (std::size_t j = 0; j < n; ++j) v += ds[i * n + j] * bx[a * n + j];
                    tmp[i * k + a] = v;
                }
            for (std::size_t t = 0; t < m; ++t)
                for (std::size_t a = 0; a < k; ++a) {
                    double v = 0.0;
                    for (std::size_t i = 0; i < n; ++i) v += inst.X.at(i, t) * tmp[i * k + a];
                    (*gA)[t * k + a] = v;
                }
            matmul(ds.data(), inst.X.data().data(), dsx.data(), n, n, m);
            for (std::size_t a = 0; a < k; ++a)
                for (std::size_t t = 0; t < m; ++t) {
                    double v = 0.0;
                    for (std::size_t i = 0; i < n; ++i) v += xa[i * k + a] * dsx[i * m + t];
                    (*gB)[a * m + t] = v;
                }
        }
        return loss;
    }
};

Tensor as_tensor(const Mat& v, std::size_t rows, std::size_t cols) { return Tensor({rows, cols}, v); }

} // namespace

Tensor updated_attention(const TheoryInstance& inst, const Tensor& A, const Tensor& B, FitKind kind,
                         const RectifierConfig& rc, double xi) {
    inst.validate();
    const std::size_t n = inst.n(), m = inst.X.cols(), k = A.cols();
    if (A.rows() != m || B.rows() != k || B.cols() != m) throw DimensionError("updated_attention: factor shapes");
    const Tensor base = base_scores(inst);
    FitState st(inst, base, base, kind, rc, xi, 0.0, k);
    st.scores(A.data(), B.data());
    if (kind == FitKind::Linear) {
        st.u = st.s;
    } else {
        rectify(st.s, st.u, st.du, rc, xi);
    }
    Tensor P({n, n});
    std::vector<double> z(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) z[j] = base.at(i, j) + st.u[i * n + j];
        softmax_row(z.data(), &P.values()[i * n], n);
    }
    return P;
}

namespace {

RectifierConfig rectifier_for(const FitConfig& cfg) {
    RectifierConfig rc;
    rc.variant = cfg.variant;
    rc.xi_max = std::max(cfg.xi, 0.0);
    return rc;
}

} // namespace

FitObjective fit_objective(const TheoryInstance& inst, const Tensor& A, const Tensor& B, const FitConfig& cfg) {
    inst.validate();
    const std::size_t m = inst.X.cols(), k = A.cols();
    if (A.rows() != m || B.rows() != k || B.cols() != m) throw DimensionError("fit_objective: factor shapes");
    const Tensor base = base_scores(inst);
    const Tensor target = build_target(inst);
    FitState st(inst, base, target, cfg.kind, rectifier_for(cfg), cfg.xi, cfg.lambda, k);
    Mat gA(m * k), gB(k * m);
    FitObjective out;
    out.loss = st.eval(A.data(), B.data(), &gA, &gB, &out.relevant_term);
    out.grad_a = as_tensor(gA, m, k);
    out.grad_b = as_tensor(gB, k, m);
    return out;
}

FitReport fit_delta(const TheoryInstance& inst, const FitConfig& cfg) {
    inst.validate();
    if (cfg.rank < 1) throw ConfigError("theory.rank must be >= 1");
    if (cfg.restarts < 1 || cfg.steps < 0) throw ConfigError("theory.restarts must be >= 1 and steps >= 0");
    const RectifierConfig rc = rectifier_for(cfg);
    const Tensor base = base_scores(inst);
    const Tensor target = build_target(inst);
    const std::size_t m = inst.X.cols(), k = static_cast<std::size_t>(cfg.rank);
    FitState st(inst, base, target, cfg.kind, rc, cfg.xi, cfg.lambda, k);

    FitReport best;
    best.loss = std::numeric_limits<double>::infinity();
    int diverged = 0;
    for (int restart = 0; restart < cfg.restarts; ++restart) {
        Rng rng(derive_seed(cfg.seed, "theory.restart", static_cast<std::uint64_t>(restart)));
        Mat A(m * k), B(k * m);
        for (double& v : A) v = normal(rng, 0.0, cfg.init_scale);
        for (double& v : B) v = normal(rng, 0.0, cfg.init_scale);
        Mat gA(A.size()), gB(B.size()), mA(A.size()), vA(A.size()), mB(B.size()), vB(B.size());
        bool ok = true;
        for (int step = 0; step < cfg.steps; ++step) {
            const double loss = st.eval(A, B, &gA, &gB);
            if (!std::isfinite(loss)) {
                ok = false;
                break;
            }
            const double t = step + 1.0, c1 = 1.0 - std::pow(0.9, t), c2 = 1.0 - std::pow(0.999, t);
            auto adam = [&](Mat& w, const Mat& g, Mat& mm, Mat& vv) {
                for (std::size_t q = 0; q < w.size(); ++q) {
                    mm[q] = 0.9 * mm[q] + 0.1 * g[q];
                    vv[q] = 0.999 * vv[q] + 0.001 * g[q] * g[q];
                    w[q] -= cfg.learning_rate * (mm[q] / c1) / (std::sqrt(vv[q] / c2) + 1e-8);
                }
            };
            adam(A, gA, mA, vA);
            adam(B, gB, mB, vB);
        }
        double rel = 0.0;
        const double loss = ok ? st.eval(A, B, nullptr, nullptr, &rel) : std::numeric_limits<double>::quiet_NaN();
        if (!std::isfinite(loss)) {
            ++diverged;
            continue;
        }
        if (loss < best.loss) {
            best.loss = loss;
            best.relevant_term = rel;
            best.A = as_tensor(A, m, k);
            best.B = as_tensor(B, k, m);
        }
    }
    best.seed = cfg.seed;
    best.kind = cfg.kind;
    best.rank = cfg.rank;
    best.xi = cfg.kind == FitKind::Linear ? 0.0 : cfg.xi;
    best.restarts = cfg.restarts;
    best.steps = cfg.steps;
    best.diverged = diverged;
    if (diverged == cfg.restarts) throw NumericError("fit_delta: every restart diverged");

    const Tensor P = updated_attention(inst, best.A, best.B, cfg.kind, rc, cfg.xi);
    const EpsilonResult e = epsilon_of(P, target, inst.r, inst.rows());
    best.epsilon = e.epsilon;
    best.noise_mass = e.noise_mass;
    best.excluded = e.excluded;
    st.scores(best.A.data(), best.B.data());
    best.xi_r = xi_r_of(inst, as_tensor(st.s, inst.n(), inst.n()));
    best.bound = e.epsilon < 1.0 ? bound_value(e.epsilon) : std::numeric_limits<double>::infinity();
    return best;
}

TheoryInstance canonical_instance(std::uint64_t seed, int n, int m, int n_noise, double extrapolation, double base_scale) {
    if (n < 3 || m < 1) throw ConfigError("theory: n must be >= 3 and m >= 1");
    const int n_rel = n - n_noise;
    if (n_noise < 1 || n_rel < 2) throw ConfigError("theory: need at least 1 noise and 2 relevant tokens");
    Rng rng(derive_seed(seed, "theory.instance"));
    const std::size_t N = static_cast<std::size_t>(n), M = static_cast<std::size_t>(m);
    std::vector<std::vector<double>> rel(static_cast<std::size_t>(n_rel), std::vector<double>(M));
    for (auto& x : rel)
        for (double& v : x) v = normal(rng, 0.0, 1.0 / std::sqrt(static_cast<double>(m)));
    // Disjoint (a, b) pairs while they last, so one ordering of relevant
    // scores (every a below its b) can push all noise tokens down at once.
    std::vector<std::size_t> idx(rel.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<std::vector<double>> noise;
    for (int q = 0; q < n_noise; ++q) {
        const std::size_t pair = static_cast<std::size_t>(q) % (rel.size() / 2);
        const auto& a = rel[idx[2 * pair]];
        const auto& b = rel[idx[2 * pair + 1]];
        std::vector<double> x(M);
        for (std::size_t t = 0; t < M; ++t) x[t] = extrapolation * a[t] + (1.0 - extrapolation) * b[t];
        noise.push_back(std::move(x));
    }
    std::vector<int> r(N, 1);
    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    TheoryInstance inst;
    inst.X = Tensor({N, M});
    for (std::size_t p = 0; p < N; ++p) {
        const std::size_t src = order[p];
        const bool is_noise = src >= rel.size();
        const auto& x = is_noise ? noise[src - rel.size()] : rel[src];
        for (std::size_t t = 0; t < M; ++t) inst.X.at(p, t) = x[t];
        r[p] = is_noise ? 0 : 1;
    }
    inst.r = r;
    inst.W = Tensor({M, M});
    for (double& v : inst.W.values()) v = normal(rng, 0.0, base_scale);
    return inst;
}

double TheoryConfig::slack() const { return std::abs(std::log(noise_threshold * n)); }

void TheoryConfig::validate() const {
    if (n < 3) throw ConfigError("theory.n must be >= 3");
    if (n_noise < 1 || n - n_noise < 2) throw ConfigError("theory.n_noise must leave at least 2 relevant tokens");
    if (m < 1) throw ConfigError("theory.m must be >= 1");
    if (seeds < 1) throw ConfigError("theory.seeds must be >= 1");
    if (rank < 1) throw ConfigError("theory.rank must be >= 1");
    if (restarts < 1) throw ConfigError("theory.restarts must be >= 1");
    if (steps < 0) throw ConfigError("theory.steps must be >= 0");
    if (xi < 0.0) throw ConfigError("theory.xi must be >= 0");
    if (!(noise_threshold > 0.0)) throw ConfigError("theory.noise_threshold must be > 0");
}

bool fit_succeeds(const FitReport& f, const TheoryConfig& cfg) {
    return f.noise_mass <= cfg.noise_threshold && f.epsilon <= cfg.epsilon_threshold;
}

TheorySummary run_theory(const TheoryConfig& cfg) {
    cfg.validate();
    TheorySummary out;
    int rect_ok = 0, lin_ok = 0;
    for (int s = 0; s < cfg.seeds; ++s) {
        const std::uint64_t seed = cfg.first_seed + static_cast<std::uint64_t>(s);
        const TheoryInstance inst = canonical_instance(seed, cfg.n, cfg.m, cfg.n_noise, cfg.extrapolation, cfg.base_scale);
        for (FitKind kind : {FitKind::Linear, FitKind::Rectified}) {
            FitConfig fc;
            fc.kind = kind;
            fc.rank = cfg.rank;
            fc.restarts = cfg.restarts;
            fc.steps = cfg.steps;
            fc.xi = cfg.xi;
            fc.lambda = cfg.lambda;
            fc.learning_rate = cfg.learning_rate;
            fc.seed = seed;
            FitReport f = fit_delta(inst, fc);
            const bool ok = fit_succeeds(f, cfg);
            if (kind == FitKind::Linear) {
                lin_ok += ok;
                if (f.noise_mass <= cfg.noise_threshold) {
                    ++out.theorem_checked;
                    if (!(f.xi_r <= f.bound + cfg.slack())) ++out.theorem_violations;
                }
            } else {
                rect_ok += ok;
            }
            out.fits.push_back(std::move(f));
        }
    }
    out.rectified_rate = static_cast<double>(rect_ok) / cfg.seeds;
    out.linear_rate = static_cast<double>(lin_ok) / cfg.seeds;
    out.passed = out.rectified_rate >= cfg.rectified_min_rate && out.linear_rate <= cfg.linear_max_rate &&
                 out.theorem_violations == 0;
    return out;
}

void write_theory_csv(const TheorySummary& summary, const TheoryConfig& cfg, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << "seed,kind,rank,xi,epsilon,noise_mass,xi_r,bound,loss,slack,success\n";
    for (const FitReport& f : summary.fits)
        out << f.seed << ',' << to_string(f.kind) << ',' << f.rank << ',' << format_double(f.xi) << ','
            << format_double(f.epsilon) << ',' << format_double(f.noise_mass) << ',' << format_double(f.xi_r) << ','
            << format_double(f.bound) << ',' << format_double(f.loss) << ',' << format_double(cfg.slack()) << ','
            << (fit_succeeds(f, cfg) ? 1 : 0) << '\n';
    if (!out) throw IoError("write failed: " + path);
}

Json to_json(const TheoryConfig& c) {
    return Json{{"n", c.n},
                {"m", c.m},
                {"n_noise", c.n_noise},
                {"seeds", c.seeds},
                {"first_seed", c.first_seed},
                {"rank", c.rank},
                {"restarts", c.restarts},
                {"steps", c.steps},
                {"xi", c.xi},
                {"lambda", c.lambda},
                {"learning_rate", c.learning_rate},
                {"extrapolation", c.extrapolation},
                {"base_scale", c.base_scale},
                {"noise_threshold", c.noise_threshold},
                {"epsilon_threshold", c.epsilon_threshold},
                {"rectified_min_rate", c.rectified_min_rate},
                {"linear_max_rate", c.linear_max_rate}};
}

TheoryConfig theory_config_from_json(const Json& j, const std::string& path) {
    TheoryConfig c;
    FieldReader r(j, path);
    r.read("n", c.n);
    r.read("m", c.m);
    r.read("n_noise", c.n_noise);
    r.read("seeds", c.seeds);
    r.read("first_seed", c.first_seed);
    r.read("rank", c.rank);
    r.read("restarts", c.restarts);
    r.read("steps", c.steps);
    r.read("xi", c.xi);
    r.read("lambda", c.lambda);
    r.read("learning_rate", c.learning_rate);
    r.read("extrapolation", c.extrapolation);
    r.read("base_scale", c.base_scale);
    r.read("noise_threshold", c.noise_threshold);
    r.read("epsilon_threshold", c.epsilon_threshold);
    r.read("rectified_min_rate", c.rectified_min_rate);
    r.read("linear_max_rate", c.linear_max_rate);
    r.finish();
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return c;
}

} // namespace rectattn
