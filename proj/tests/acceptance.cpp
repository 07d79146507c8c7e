// Acceptance checks. One criterion per invocation (--criterion N); prints a
// single PASS/FAIL line. Exit status is 0 whenever the criterion was
// evaluated and 1 if it could not be; --strict also exits 1 on FAIL.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "rectattn/cli.hpp"
#include "rectattn/error.hpp"
#include "rectattn/gradsuite.hpp"
#include "rectattn/rng.hpp"

using namespace rectattn;
namespace fs = std::filesystem;

namespace {

// Tolerances and thresholds, fixed here.
constexpr double kGradTol = 1e-5;
constexpr std::size_t kGradPoints = 100;
constexpr double kGradSeconds = 60.0;
constexpr double kAlgebraTol = 1e-12;
constexpr int kAlgebraGrid = 10000;
constexpr double kAlgebraSeconds = 10.0;
constexpr int kWarmStartEpisodes = 100;
constexpr double kTheorySeconds = 300.0;
constexpr double kBaseCleanAccuracy = 0.95;
constexpr double kFinetuneSeconds = 15 * 60.0;
constexpr int kOrderingEpisodes = 500;
constexpr double kOrderingSeconds = 120.0;
constexpr double kProbeShallowMargin = 0.10;
constexpr double kProbeDeepAccuracy = 0.90;
constexpr int kProbeSeeds = 3;
constexpr double kProbeSeconds = 10 * 60.0;
constexpr double kSigmoidWindow = 0.02;
constexpr double kAblateSeconds = 30 * 60.0;
constexpr int kOracleEpisodes = 1000;
constexpr double kPercentileTol = 1e-12;

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

std::string sci(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2e", v);
    return buf;
}

struct Verdict {
    bool pass = false;
    std::string detail;
};

// ---- shared base ----------------------------------------------------------

struct Base {
    ModelParams params;
    double pretrain_seconds = 0.0;
};

Base make_base(const ExperimentConfig& c, const fs::path& dir) {
    fs::create_directories(dir);
    const auto t0 = Clock::now();
    std::ostringstream sink;
    ExperimentConfig fresh = c;
    fresh.base_checkpoint.clear();
    Base b{obtain_base(fresh, dir, true, sink), 0.0};
    b.pretrain_seconds = seconds_since(t0);
    write_json_file(Json{{"pretrain_seconds", b.pretrain_seconds}}, (dir / "timing.json").string());
    return b;
}

Base load_or_make_base(const ExperimentConfig& c, const std::string& base_dir) {
    const fs::path dir = base_dir.empty() ? fs::temp_directory_path() / "rectattn_acceptance_base" : fs::path(base_dir);
    if (fs::exists(dir / "base.ckpt.json") && fs::exists(dir / "timing.json")) {
        Base b{load_checkpoint((dir / "base.ckpt.json").string()), 0.0};
        b.pretrain_seconds = read_json_file((dir / "timing.json").string()).at("pretrain_seconds").get<double>();
        return b;
    }
    return make_base(c, dir);
}

double clean_accuracy(const ExperimentConfig& c, const ModelParams& base) {
    return evaluate(base, eval_episodes_for(c.pretrain_task, resolved_pretrain(c)), 0.0).accuracy;
}

// ---- criteria -------------------------------------------------------------

Verdict gradient_correctness() {
    const auto t0 = Clock::now();
    GradSuiteOptions opts;
    opts.points = kGradPoints;
    opts.tolerance = kGradTol;
    const GradSuiteReport r = run_full_grad_suite(opts);
    const double secs = seconds_since(t0);
    double worst = 0.0;
    std::string worst_name, failed;
    bool counts_ok = true;
    for (const GradCaseReport& c : r.cases) {
        if (c.worst_error >= worst) worst = c.worst_error, worst_name = c.name;
        if (!c.passed) failed += " " + c.name;
        counts_ok = counts_ok && c.points == kGradPoints;
    }
    const bool has_rectifiers =
        std::all_of(kAllVariants.begin(), kAllVariants.end(), [&](RectifierVariant v) {
            return std::any_of(r.cases.begin(), r.cases.end(),
                               [&](const GradCaseReport& c) { return c.name == "rectify:" + to_string(v); });
        });
    const bool pass = r.passed() && counts_ok && has_rectifiers && secs < kGradSeconds;
    return {pass, std::to_string(r.cases.size()) + " ops x " + std::to_string(kGradPoints) + " points, worst rel err " +
                      sci(worst) + " (" + worst_name + ")" + (failed.empty() ? "" : ", failed:" + failed) +
                      ", " + fmt(secs, 1) + " s"};
}

Verdict rectifier_algebra() {
    const auto t0 = Clock::now();
    double odd = 0.0, zero = 0.0, ident = 0.0, sat = 0.0, bound = 0.0, mono = 0.0;
    const std::vector<double> xis{0.5, 1.0, 3.0, 5.0};
    std::vector<double> grid(kAlgebraGrid);
    for (int i = 0; i < kAlgebraGrid; ++i) grid[static_cast<std::size_t>(i)] = -20.0 + 40.0 * i / (kAlgebraGrid - 1);
    for (RectifierVariant v : kAllVariants) {
        RectifierConfig rc;
        rc.variant = v;
        rc.xi_max = 5.0;
        for (double xi : xis) {
            zero = std::max(zero, std::abs(rectify(0.0, rc, xi)));
            double prev = -std::numeric_limits<double>::infinity();
            for (double x : grid) {
                const double y = rectify(x, rc, xi);
                odd = std::max(odd, std::abs(y + rectify(-x, rc, xi)));
                mono = std::max(mono, prev - y);
                prev = y;
                if (v == RectifierVariant::ExactMaxMin && x >= xi + 1.0) sat = std::max(sat, std::abs(y - x));
                if (v == RectifierVariant::TanhOnly) bound = std::max(bound, std::abs(y) - xi);
            }
        }
        if (v == RectifierVariant::ExactMaxMin)
            for (double x : grid) ident = std::max(ident, std::abs(rectify(x, rc, 0.0) - x));
    }
    const double secs = seconds_since(t0);
    const bool pass = odd <= kAlgebraTol && zero <= kAlgebraTol && ident <= kAlgebraTol && sat <= kAlgebraTol &&
                      bound <= kAlgebraTol && mono <= kAlgebraTol && secs < kAlgebraSeconds;
    return {pass, "max deviations on " + std::to_string(kAlgebraGrid) + " points: odd " + sci(odd) + ", g(0) " +
                      sci(zero) + ", xi=0 identity " + sci(ident) + ", saturation " + sci(sat) + ", tanh bound " +
                      sci(std::max(bound, 0.0)) + ", monotone " + sci(std::max(mono, 0.0)) + ", " + fmt(secs, 2) + " s"};
}

Verdict warm_start() {
    ExperimentConfig c;
    ModelConfig m = c.model;
    m.vocab_size = c.task.vocab().size();
    const ModelParams base = init_params(m, 11);
    ModelParams tuned = base;
    Rng rng(derive_seed(11, "acceptance.adapters"));
    attach_bilinear(tuned, c.finetune.adapter_rank, rng);
    set_trainable(tuned, FineTuneMode::LoraBilinear);
    int mismatched = 0;
    const auto episodes = kv_episodes(c.task, 11, "warm_start", kWarmStartEpisodes);
    for (const Episode& e : episodes) {
        const Tensor a = forward(base, e.tokens, 0.0), b = forward(tuned, e.tokens, 0.0);
        mismatched += std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) != 0;
    }
    return {mismatched == 0, std::to_string(kWarmStartEpisodes - mismatched) + "/" + std::to_string(kWarmStartEpisodes) +
                                 " episodes bit-identical (B = 0, xi = 0)"};
}

Verdict theory_experiment() {
    const auto t0 = Clock::now();
    const TheoryConfig cfg;
    const TheorySummary s = run_theory(cfg);
    const double secs = seconds_since(t0);
    const bool pass = s.rectified_rate >= cfg.rectified_min_rate && s.linear_rate <= cfg.linear_max_rate &&
                      s.theorem_violations == 0 && secs < kTheorySeconds;
    return {pass, "RECTIFIED " + fmt(s.rectified_rate, 2) + " (>= " + fmt(cfg.rectified_min_rate, 2) + "), LINEAR " +
                      fmt(s.linear_rate, 2) + " (<= " + fmt(cfg.linear_max_rate, 2) + "), bound checked on " +
                      std::to_string(s.theorem_checked) + " LINEAR fits with " +
                      std::to_string(s.theorem_violations) + " violations (slack " + fmt(cfg.slack(), 3) + "), " +
                      fmt(secs, 1) + " s"};
}

Verdict finetune_direction(const std::string& base_dir) {
    const ExperimentConfig c;
    const Base base = load_or_make_base(c, base_dir);
    const double clean = clean_accuracy(c, base.params);
    const auto t0 = Clock::now();
    const fs::path dir = fs::temp_directory_path() / "rectattn_acceptance_finetune";
    fs::create_directories(dir);
    std::ostringstream sink;
    const ComparisonSummary s = compare_finetuning(c, base.params, dir, sink);
    const double secs = base.pretrain_seconds + seconds_since(t0);
    const bool acc_ok = s.rectified_accuracy >= s.baseline_accuracy;
    const bool gap_ok = s.rectified_gap > s.baseline_gap && s.baseline_gap > s.frozen_gap;
    const bool pass = clean >= kBaseCleanAccuracy && acc_ok && gap_ok && secs < kFinetuneSeconds;
    return {pass, "base clean " + fmt(clean, 3) + "; accuracy RECTIFIED " + fmt(s.rectified_accuracy, 4) +
                      " vs BASELINE " + fmt(s.baseline_accuracy, 4) + (acc_ok ? " ok" : " WRONG ORDER") +
                      "; answer_gap RECTIFIED " + fmt(s.rectified_gap, 1) + ", BASELINE " + fmt(s.baseline_gap, 1) +
                      ", frozen " + fmt(s.frozen_gap, 1) + (gap_ok ? " (descending, ok)" : " (need descending: WRONG ORDER)") + "; " +
                      std::to_string(c.seeds) + " seeds, " + fmt(secs, 0) + " s incl. pretraining"};
}

Verdict ordering_direction(const std::string& base_dir) {
    ExperimentConfig c;
    c.ordering_episodes = kOrderingEpisodes;
    const Base base = load_or_make_base(c, base_dir);
    const auto t0 = Clock::now();
    const OrderingSummary s = compare_orderings(c, base.params);
    const double secs = seconds_since(t0);
    const bool pass = s.mean_first >= s.mean_last && secs < kOrderingSeconds;
    return {pass, "QUERY_FIRST " + fmt(s.mean_first, 4) + " >= QUERY_LAST " + fmt(s.mean_last, 4) + " over " +
                      std::to_string(c.seeds) + " x " + std::to_string(kOrderingEpisodes) + " matched episodes, " +
                      fmt(secs, 1) + " s"};
}

Verdict triplewise_probe() {
    ExperimentConfig c;
    c.seeds = kProbeSeeds;
    c.probe_depths = {1, 3};
    const auto t0 = Clock::now();
    std::ostringstream sink;
    const std::vector<ProbeSummary> p = run_probes(c, sink);
    const double secs = seconds_since(t0);
    const ProbeSummary& shallow = p[0];
    const ProbeSummary& deep = p[1];
    const bool shallow_ok = shallow.mean_accuracy <= shallow.mean_majority + kProbeShallowMargin;
    const bool deep_ok = deep.mean_accuracy >= kProbeDeepAccuracy;
    const bool pass = shallow_ok && deep_ok && secs < kProbeSeconds;
    return {pass, "1-layer " + fmt(shallow.mean_accuracy, 4) + " vs majority " + fmt(shallow.mean_majority, 4) +
                      " + " + fmt(kProbeShallowMargin, 2) + (shallow_ok ? " ok" : " EXCEEDED") + "; 3-layer " +
                      fmt(deep.mean_accuracy, 4) + " (>= " + fmt(kProbeDeepAccuracy, 2) + ")" +
                      (deep_ok ? " ok" : " SHORT") + "; " + std::to_string(kProbeSeeds) + " seeds, " +
                      fmt(secs, 0) + " s"};
}

Verdict ablation_ordering(const std::string& base_dir) {
    ExperimentConfig c;
    c.ablate_variants = {RectifierVariant::ExactMaxMin, RectifierVariant::TanhOnly, RectifierVariant::TanhPlusX,
                         RectifierVariant::SigmoidMaxMin};
    const Base base = load_or_make_base(c, base_dir);
    const auto t0 = Clock::now();
    const fs::path dir = fs::temp_directory_path() / "rectattn_acceptance_ablate";
    fs::create_directories(dir);
    std::ostringstream sink;
    const std::vector<VariantMean> m = ablate_variants(c, base.params, dir, nullptr, sink);
    const double secs = seconds_since(t0);
    const double exact = m[0].accuracy, tanh_only = m[1].accuracy, tanh_x = m[2].accuracy, sig = m[3].accuracy;
    const bool pass = exact >= tanh_only && exact >= tanh_x && std::abs(sig - exact) <= kSigmoidWindow &&
                      secs < kAblateSeconds;
    const bool order_ok = exact >= tanh_only && exact >= tanh_x;
    return {pass, "EXACT_MAXMIN " + fmt(exact, 4) + ", TANH_ONLY " + fmt(tanh_only, 4) + ", TANH_PLUS_X " +
                      fmt(tanh_x, 4) + (order_ok ? " (EXACT highest, ok)" : " (EXACT not highest: WRONG ORDER)") +
                      ", SIGMOID_MAXMIN " + fmt(sig, 4) + " (|diff| " + fmt(std::abs(sig - exact), 4) +
                      " <= " + fmt(kSigmoidWindow, 2) + "), " + fmt(secs, 0) + " s"};
}

// Independent brute force: any ordered pair of distinct other positions.
std::vector<int> match3_brute(const std::vector<int>& x, int modulus) {
    const std::size_t n = x.size();
    std::vector<int> out(n, 0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t a = 0; a < n && !out[i]; ++a)
            for (std::size_t b = 0; b < n; ++b)
                if (a != i && b != i && a != b && (x[i] + x[a] + x[b]) % modulus == 0) {
                    out[i] = 1;
                    break;
                }
    return out;
}

double percentile_brute(std::vector<double> v, double p) {
    std::sort(v.begin(), v.end());
    const double h = p * static_cast<double>(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

Verdict oracle_equivalence() {
    int label_mismatch = 0;
    Rng pick(derive_seed(0, "acceptance.oracle"));
    for (int e = 0; e < kOracleEpisodes; ++e) {
        Match3Config m;
        m.support_size = static_cast<int>(uniform_int(pick, 0, 8));
        if (m.support_size == 1) m.support_size = 0;
        m.seed = derive_seed(1, "acceptance.match3", static_cast<std::uint64_t>(e));
        const Match3Episode ep = gen_match3_episode(m);
        label_mismatch += ep.labels != match3_brute(ep.tokens, m.modulus);
    }
    double worst = 0.0;
    Rng rng(derive_seed(2, "acceptance.percentile"));
    for (int t = 0; t < kOracleEpisodes; ++t) {
        const long n = uniform_int(rng, 2, 200);
        std::vector<double> v;
        for (long i = 0; i < n; ++i) v.push_back(normal(rng, 0.0, 10.0));
        for (double p : {0.1, 0.5, 0.9, uniform(rng, 0.0, 1.0)}) worst = std::max(worst, std::abs(percentile(v, p) - percentile_brute(v, p)));
    }
    const bool pass = label_mismatch == 0 && worst <= kPercentileTol;
    return {pass, "Match3 labels: " + std::to_string(kOracleEpisodes - label_mismatch) + "/" +
                      std::to_string(kOracleEpisodes) + " exact; percentile max abs diff " + sci(worst) +
                      " over " + std::to_string(kOracleEpisodes) + " vectors"};
}

// Every command on a small config, twice into separate roots, plus a third
// run of theory from its resolved-config snapshot.
ExperimentConfig small_config(const fs::path& root) {
    ExperimentConfig c;
    c.output_dir = root.string();
    c.seeds = 1;
    c.gradcheck.points = 5;
    c.theory.seeds = 2;
    c.theory.restarts = 2;
    c.theory.steps = 100;
    c.pretrain.steps_per_epoch = 30;
    c.pretrain.eval_episodes = 20;
    c.finetune.steps_per_epoch = 10;
    c.finetune.eval_episodes = 20;
    c.ordering_episodes = 20;
    c.ablate_variants = {RectifierVariant::ExactMaxMin, RectifierVariant::TanhOnly};
    c.probe_train.steps_per_epoch = 10;
    c.probe_train.eval_episodes = 10;
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void run_all(const fs::path& root) {
    std::ostringstream sink;
    ExperimentConfig c = small_config(root);
    for (const char* cmd : {"gradcheck", "theory", "train", "match3"}) run_command(cmd, c, sink);
    c.base_checkpoint = (root / "run" / "train" / "base.ckpt.json").string();
    for (const char* cmd : {"eval", "margins", "ablate", "ordering"}) run_command(cmd, c, sink);
}

Verdict determinism() {
    const fs::path a = fs::temp_directory_path() / "rectattn_acceptance_det_a";
    const fs::path b = fs::temp_directory_path() / "rectattn_acceptance_det_b";
    fs::remove_all(a);
    fs::remove_all(b);
    run_all(a);
    run_all(b);
    std::size_t files = 0, differ = 0, compared_commands = 0;
    std::string first_diff;
    for (const std::string& cmd : command_names()) {
        const fs::path da = a / "run" / cmd;
        if (!fs::exists(da)) continue;
        ++compared_commands;
        for (const auto& entry : fs::recursive_directory_iterator(da)) {
            if (!entry.is_regular_file()) continue;
            const fs::path rel = fs::relative(entry.path(), a);
            ++files;
            std::string ta = slurp(entry.path()), tb = slurp(b / rel);
            // The resolved config records its own output root.
            if (rel.filename() == "config.resolved.json") {
                const auto strip = [](std::string s, const std::string& root) {
                    for (std::size_t p; (p = s.find(root)) != std::string::npos;) s.replace(p, root.size(), "<root>");
                    return s;
                };
                ta = strip(ta, a.string());
                tb = strip(tb, b.string());
            }
            if (ta != tb) {
                ++differ;
                if (first_diff.empty()) first_diff = rel.string();
            }
        }
    }
    // Rerun theory from its snapshot.
    Json snap = read_json_file((a / "run" / "theory" / "config.resolved.json").string());
    const fs::path s = fs::temp_directory_path() / "rectattn_acceptance_det_snap";
    fs::remove_all(s);
    snap["output_dir"] = s.string();
    std::ostringstream sink;
    run_command("theory", experiment_config_from_json(snap), sink);
    const bool snap_ok = slurp(s / "run" / "theory" / "theory.csv") == slurp(a / "run" / "theory" / "theory.csv");
    const bool pass = differ == 0 && compared_commands == command_names().size() && snap_ok;
    return {pass, std::to_string(compared_commands) + " commands, " + std::to_string(files) + " files, " +
                      std::to_string(differ) + " differ" + (first_diff.empty() ? "" : " (first: " + first_diff + ")") +
                      "; snapshot rerun " + (snap_ok ? "identical" : "DIFFERS")};
}

const char* name_of(int n) {
    switch (n) {
        case 1: return "gradient correctness";
        case 2: return "rectifier algebra";
        case 3: return "warm-start exactness";
        case 4: return "filtering desk experiment";
        case 5: return "fine-tuning direction";
        case 6: return "ordering direction";
        case 7: return "triple-wise probe";
        case 8: return "ablation ordering";
        case 9: return "oracle equivalence";
        case 10: return "determinism";
    }
    return "?";
}

Verdict run(int n, const std::string& base_dir) {
    switch (n) {
        case 1: return gradient_correctness();
        case 2: return rectifier_algebra();
        case 3: return warm_start();
        case 4: return theory_experiment();
        case 5: return finetune_direction(base_dir);
        case 6: return ordering_direction(base_dir);
        case 7: return triplewise_probe();
        case 8: return ablation_ordering(base_dir);
        case 9: return oracle_equivalence();
        case 10: return determinism();
    }
    throw ConfigError("--criterion must be 1..10");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks"};
    std::vector<int> criteria;
    std::string base_dir, make_base_dir;
    bool strict = false;
    app.add_option("-n,--criterion", criteria, "Criteria to run (default: all)")->check(CLI::Range(1, 10));
    app.add_option("--base-dir", base_dir, "Directory holding a shared pretrained base (created when missing)");
    app.add_option("--make-base", make_base_dir, "Pretrain the shared base into this directory and exit");
    app.add_flag("--strict", strict, "Exit 1 when any criterion fails");
    CLI11_PARSE(app, argc, argv);

    if (!make_base_dir.empty()) {
        return guarded(
            [&] {
                const Base b = make_base(ExperimentConfig{}, make_base_dir);
                std::cout << "base pretrained in " << fmt(b.pretrain_seconds, 1) << " s, clean accuracy "
                          << fmt(clean_accuracy(ExperimentConfig{}, b.params), 3) << '\n';
                return 0;
            },
            std::cerr);
    }
    if (criteria.empty())
        for (int n = 1; n <= 10; ++n) criteria.push_back(n);
    bool all_pass = true;
    for (int n : criteria) {
        Verdict v;
        const int code = guarded(
            [&] {
                v = run(n, base_dir);
                return 0;
            },
            std::cerr);
        if (code != 0) {
            std::cout << "[ERROR] criterion " << n << " (" << name_of(n) << "): could not be evaluated\n";
            return 1;
        }
        all_pass = all_pass && v.pass;
        std::cout << (v.pass ? "[PASS] " : "[FAIL] ") << "criterion " << n << " (" << name_of(n) << "): " << v.detail
                  << std::endl;
    }
    return strict && !all_pass ? 1 : 0;
}
