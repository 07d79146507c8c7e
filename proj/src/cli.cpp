#include "rectattn/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <ostream>

#include "rectattn/error.hpp"
#include "rectattn/gradsuite.hpp"

namespace rectattn {

namespace fs = std::filesystem;

ExperimentConfig::ExperimentConfig() {
    model.max_seq_len = 32;
    task.n_distracting = 3;
    task.n_irrelevant = 2;

    // The clean task alone never teaches key matching, so the base also sees
    // irrelevant documents and both orderings; its evaluation stays clean.
    pretrain.learning_rate = 2e-3;
    pretrain.batch_size = 16;
    pretrain.steps_per_epoch = 8000;
    pretrain.eval_episodes = 300;
    pretrain.pretrain_max_irrelevant = 2;
    pretrain.pretrain_mix_orderings = true;

    finetune.learning_rate = 3e-3;
    finetune.batch_size = 8;
    finetune.steps_per_epoch = 1500;
    finetune.adapter_rank = 4;
    finetune.eval_episodes = 300;

    match3.support_size = 4;
    probe_train.learning_rate = 3e-3;
    probe_train.batch_size = 8;
    probe_train.steps_per_epoch = 4000;
    probe_train.eval_episodes = 200;
}

void ExperimentConfig::validate() const {
    if (run_id.empty() || run_id.find('/') != std::string::npos || run_id == "." || run_id == "..")
        throw ConfigError("run_id: must be a non-empty name without '/'");
    if (stages != "pretrain" && stages != "finetune" && stages != "both")
        throw ConfigError("stages: expected pretrain, finetune or both");
    if (seeds < 1) throw ConfigError("seeds: must be >= 1");
    if (ordering_episodes < 1) throw ConfigError("ordering_episodes: must be >= 1");
    if (probe_depths.empty()) throw ConfigError("probe_depths: must not be empty");
    for (int d : probe_depths)
        if (d < 1) throw ConfigError("probe_depths: every depth must be >= 1");
    if (ablate_variants.empty()) throw ConfigError("ablate_variants: must not be empty");
    if (gradcheck.points < 1) throw ConfigError("gradcheck.points: must be >= 1");
    if (!(gradcheck.step > 0.0 && gradcheck.step <= 1e-3)) throw ConfigError("gradcheck.step: must lie in (0, 1e-3]");
    if (!(gradcheck.tolerance > 0.0)) throw ConfigError("gradcheck.tolerance: must be > 0");
    if (pretrain_task.n_distracting != 0 || pretrain_task.n_irrelevant != 0)
        throw ConfigError("pretrain_task: must be the clean task (no distracting or irrelevant documents)");
    try {
        rectifier.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("rectifier: ") + e.what());
    }
}

namespace {

// Keys owned by the top level (seed, rectifier) or by the command (mode).
const std::vector<std::string> kStrippedTrainKeys{"seed", "rectifier", "mode"};

Json train_block(const TrainConfig& t) {
    Json j = to_json(t);
    for (const std::string& k : kStrippedTrainKeys) j.erase(k);
    return j;
}

Json without_seed(Json j) {
    j.erase("seed");
    return j;
}

void reject_keys(const Json& j, const std::string& path, const std::vector<std::string>& keys) {
    if (!j.is_object()) throw ConfigError(path + ": expected a JSON object");
    for (const std::string& k : keys)
        if (j.contains(k)) throw ConfigError(path + "." + k + ": unknown field");
}

TrainConfig read_train(const Json& j, const std::string& path) {
    reject_keys(j, path, kStrippedTrainKeys);
    return train_config_from_json(j, path);
}

Json model_block(const ModelConfig& m) {
    Json j = to_json(m);
    // The rectifier lives at the top level.
    j.erase("rectifier");
    return j;
}

ModelConfig read_model(const Json& j, const std::string& path) {
    reject_keys(j, path, {"rectifier"});
    return model_config_from_json(j, path);
}

} // namespace

Json to_json(const ExperimentConfig& c) {
    Json variants = Json::array();
    for (RectifierVariant v : c.ablate_variants) variants.push_back(to_string(v));
    return Json{{"run_id", c.run_id},
                {"seed", c.seed},
                {"output_dir", c.output_dir},
                {"base_checkpoint", c.base_checkpoint},
                {"stages", c.stages},
                {"seeds", c.seeds},
                {"model", model_block(c.model)},
                {"task", without_seed(to_json(c.task))},
                {"pretrain_task", without_seed(to_json(c.pretrain_task))},
                {"pretrain", train_block(c.pretrain)},
                {"finetune", train_block(c.finetune)},
                {"rectifier", to_json(c.rectifier)},
                {"theory", to_json(c.theory)},
                {"match3", without_seed(to_json(c.match3))},
                {"probe_model", model_block(c.probe_model)},
                {"probe_train", train_block(c.probe_train)},
                {"probe_depths", c.probe_depths},
                {"ordering_episodes", c.ordering_episodes},
                {"ablate_variants", variants},
                {"gradcheck",
                 Json{{"points", c.gradcheck.points},
                      {"step", c.gradcheck.step},
                      {"tolerance", c.gradcheck.tolerance},
                      {"seed", c.gradcheck.seed}}}};
}

ExperimentConfig experiment_config_from_json(const Json& j) {
    ExperimentConfig c;
    FieldReader r(j, "");
    r.read("run_id", c.run_id);
    r.read("seed", c.seed);
    r.read("output_dir", c.output_dir);
    r.read("base_checkpoint", c.base_checkpoint);
    r.read("stages", c.stages);
    r.read("seeds", c.seeds);
    if (const Json* v = r.child("model")) c.model = read_model(*v, "model");
    if (const Json* v = r.child("task")) {
        reject_keys(*v, "task", {"seed"});
        c.task = kv_task_config_from_json(*v, "task");
    }
    if (const Json* v = r.child("pretrain_task")) {
        reject_keys(*v, "pretrain_task", {"seed"});
        c.pretrain_task = kv_task_config_from_json(*v, "pretrain_task");
    }
    if (const Json* v = r.child("pretrain")) c.pretrain = read_train(*v, "pretrain");
    if (const Json* v = r.child("finetune")) c.finetune = read_train(*v, "finetune");
    if (const Json* v = r.child("rectifier")) c.rectifier = rectifier_config_from_json(*v, "rectifier");
    if (const Json* v = r.child("theory")) c.theory = theory_config_from_json(*v, "theory");
    if (const Json* v = r.child("match3")) {
        reject_keys(*v, "match3", {"seed"});
        c.match3 = match3_config_from_json(*v, "match3");
    }
    if (const Json* v = r.child("probe_model")) c.probe_model = read_model(*v, "probe_model");
    if (const Json* v = r.child("probe_train")) c.probe_train = read_train(*v, "probe_train");
    if (const Json* v = r.child("probe_depths")) {
        if (!v->is_array()) throw ConfigError("probe_depths: expected an array of integers");
        c.probe_depths.clear();
        for (const Json& d : *v) {
            if (!d.is_number_integer()) throw ConfigError("probe_depths: expected an array of integers");
            c.probe_depths.push_back(d.get<int>());
        }
    }
    r.read("ordering_episodes", c.ordering_episodes);
    if (const Json* v = r.child("ablate_variants")) {
        if (!v->is_array()) throw ConfigError("ablate_variants: expected an array of variant names");
        c.ablate_variants.clear();
        for (const Json& name : *v) {
            if (!name.is_string()) throw ConfigError("ablate_variants: expected an array of variant names");
            try {
                c.ablate_variants.push_back(parse_variant(name.get<std::string>()));
            } catch (const ConfigError& e) {
                throw ConfigError(std::string("ablate_variants: ") + e.what());
            }
        }
    }
    if (const Json* v = r.child("gradcheck")) {
        FieldReader g(*v, "gradcheck");
        long points = static_cast<long>(c.gradcheck.points);
        g.read("points", points);
        if (points < 1) throw ConfigError("gradcheck.points: must be >= 1");
        c.gradcheck.points = static_cast<std::size_t>(points);
        g.read("step", c.gradcheck.step);
        g.read("tolerance", c.gradcheck.tolerance);
        g.read("seed", c.gradcheck.seed);
        g.finish();
    }
    r.finish();
    c.validate();
    return c;
}

void apply_override(Json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects path=value, got '" + assignment + "'");
    const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    Json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (!node->is_object() || !node->contains(key)) throw ConfigError(path + ": unknown field");
        node = &(*node)[key];
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    Json value = Json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    *node = value;
}

fs::path run_directory(const ExperimentConfig& c, const std::string& command) {
    fs::path root = c.output_dir;
    if (root.empty()) {
        const char* env = std::getenv(kOutputRootEnv);
        root = env && *env ? fs::path(env) : fs::path("out");
    }
    return root / c.run_id / command;
}

namespace {

fs::path prepare(const ExperimentConfig& c, const std::string& command) {
    c.validate();
    const fs::path dir = run_directory(c, command);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    write_json_file(to_json(c), (dir / "config.resolved.json").string());
    return dir;
}

std::uint64_t replicate_seed(const ExperimentConfig& c, int k) { return c.seed + static_cast<std::uint64_t>(k); }

ReportRecord record(const ExperimentConfig& c, int k, std::string mode, std::string variant, double xi,
                    std::string metric, double value) {
    ReportRecord r;
    r.run_id = c.run_id;
    r.seed = replicate_seed(c, k);
    r.mode = std::move(mode);
    r.variant = std::move(variant);
    r.xi = xi;
    r.metric = std::move(metric);
    r.value = value;
    return r;
}

void write_summary(const Json& j, const fs::path& dir) { write_json_file(j, (dir / "summary.json").string()); }

} // namespace

Json gradcheck_summary(const GradSuiteReport& report) {
    Json cases = Json::array();
    for (const GradCaseReport& r : report.cases)
        cases.push_back(Json{{"name", r.name},
                             {"points", r.points},
                             {"redrawn", r.redrawn},
                             {"step", r.step},
                             {"worst_error", r.worst_error},
                             {"passed", r.passed},
                             {"failure", r.failure}});
    return Json{{"passed", report.passed()}, {"tolerance", report.tolerance}, {"cases", cases}};
}

GradSuiteReport run_full_grad_suite(const GradSuiteOptions& opts) { return run_grad_suite(default_grad_cases(), opts); }

int cmd_gradcheck(const ExperimentConfig& c, std::ostream& log) {
    const fs::path dir = prepare(c, "gradcheck");
    const GradSuiteReport report = run_full_grad_suite(c.gradcheck);
    write_json_file(gradcheck_summary(report), (dir / "gradcheck.json").string());
    for (const GradCaseReport& r : report.cases)
        if (!r.passed) log << "FAIL " << r.name << " worst " << r.worst_error << (r.failure.empty() ? "" : " " + r.failure) << '\n';
    log << report.cases.size() << " ops checked, " << (report.passed() ? "all passed" : "failures above") << '\n';
    return static_cast<int>(report.passed() ? ExitCode::Ok : ExitCode::CheckFailed);
}

int cmd_theory(const ExperimentConfig& c, std::ostream& log) {
    const fs::path dir = prepare(c, "theory");
    const TheorySummary s = run_theory(c.theory);
    write_theory_csv(s, c.theory, (dir / "theory.csv").string());
    write_summary(Json{{"rectified_rate", s.rectified_rate},
                       {"linear_rate", s.linear_rate},
                       {"rectified_min_rate", c.theory.rectified_min_rate},
                       {"linear_max_rate", c.theory.linear_max_rate},
                       {"slack", c.theory.slack()},
                       {"theorem_checked", s.theorem_checked},
                       {"theorem_violations", s.theorem_violations},
                       {"passed", s.passed}},
                  dir);
    log << "rectified " << s.rectified_rate << " linear " << s.linear_rate << " checked " << s.theorem_checked
        << " violations " << s.theorem_violations << '\n';
    return static_cast<int>(s.passed ? ExitCode::Ok : ExitCode::CheckFailed);
}

TrainConfig resolved_pretrain(const ExperimentConfig& c) {
    TrainConfig t = c.pretrain;
    t.seed = c.seed;
    t.mode = FineTuneMode::Full;
    return t;
}

TrainConfig resolved_finetune(const ExperimentConfig& c, int replicate, FineTuneMode mode, RectifierVariant variant) {
    TrainConfig t = c.finetune;
    t.seed = replicate_seed(c, replicate);
    t.mode = mode;
    t.rectifier = c.rectifier;
    t.rectifier.variant = variant;
    return t;
}

ModelParams obtain_base(const ExperimentConfig& c, const fs::path& dir, bool may_pretrain, std::ostream& log) {
    if (!c.base_checkpoint.empty()) {
        if (!fs::exists(c.base_checkpoint)) throw MissingArtifactError("base_checkpoint not found: " + c.base_checkpoint);
        return load_checkpoint(c.base_checkpoint);
    }
    if (!may_pretrain) throw MissingArtifactError("base_checkpoint: this command needs an existing checkpoint");
    log << "pretraining base (" << c.pretrain.total_steps() << " steps)\n";
    TrainedModel base = pretrain_base(c.model, c.pretrain_task, resolved_pretrain(c));
    base.log.write((dir / "pretrain.jsonl").string());
    save_checkpoint(base.params, (dir / "base.ckpt.json").string());
    log << "base clean accuracy " << base.log.final_eval().result.accuracy << '\n';
    return std::move(base.params);
}

ComparisonSummary compare_finetuning(const ExperimentConfig& c, const ModelParams& base, const fs::path& dir,
                                     std::ostream& log) {
    ComparisonSummary s;
    const double inv = 1.0 / c.seeds;
    auto add = [&](int k, const std::string& mode, const std::string& variant, double xi, const EvalResult& r) {
        s.records.push_back(record(c, k, mode, variant, xi, "accuracy", r.accuracy));
        s.records.push_back(record(c, k, mode, variant, xi, "answer_gap", r.answer_gap));
        s.records.push_back(record(c, k, mode, variant, xi, "margin", r.margin));
    };
    for (int k = 0; k < c.seeds; ++k) {
        const TrainConfig rect = resolved_finetune(c, k, FineTuneMode::LoraBilinear, c.rectifier.variant);
        const EvalResult frozen = evaluate(base, eval_episodes_for(c.task, rect), 0.0);
        add(k, "FROZEN", "", 0.0, frozen);

        const TrainedModel r = finetune(base, c.task, rect);
        const std::string tag = "seed" + std::to_string(replicate_seed(c, k));
        r.log.write((dir / ("finetune_LORA_BILINEAR_" + tag + ".jsonl")).string());
        save_checkpoint(r.params, (dir / ("finetune_LORA_BILINEAR_" + tag + ".ckpt.json")).string());
        const EvalRecord& re = r.log.final_eval();
        add(k, to_string(FineTuneMode::LoraBilinear), to_string(rect.rectifier.variant), re.xi, re.result);

        const TrainConfig qk = resolved_finetune(c, k, FineTuneMode::LoraQkBaseline, RectifierVariant::Identity);
        const TrainedModel q = finetune(base, c.task, qk);
        q.log.write((dir / ("finetune_LORA_QK_BASELINE_" + tag + ".jsonl")).string());
        save_checkpoint(q.params, (dir / ("finetune_LORA_QK_BASELINE_" + tag + ".ckpt.json")).string());
        const EvalResult& qe = q.log.final_eval().result;
        add(k, to_string(FineTuneMode::LoraQkBaseline), "", 0.0, qe);

        log << "seed " << rect.seed << ": frozen " << frozen.accuracy << " / " << frozen.answer_gap << ", rectified "
            << re.result.accuracy << " / " << re.result.answer_gap << ", q/k " << qe.accuracy << " / " << qe.answer_gap
            << '\n';
        s.frozen_accuracy += inv * frozen.accuracy;
        s.frozen_gap += inv * frozen.answer_gap;
        s.rectified_accuracy += inv * re.result.accuracy;
        s.rectified_gap += inv * re.result.answer_gap;
        s.baseline_accuracy += inv * qe.accuracy;
        s.baseline_gap += inv * qe.answer_gap;
    }
    return s;
}

int cmd_train(const ExperimentConfig& c, std::ostream& log) {
    const fs::path dir = prepare(c, "train");
    if (c.stages == "pretrain") {
        ExperimentConfig fresh = c;
        fresh.base_checkpoint.clear();
        obtain_base(fresh, dir, true, log);
        return static_cast<int>(ExitCode::Ok);
    }
    const ModelParams base = obtain_base(c, dir, c.stages == "both", log);
    const ComparisonSummary s = compare_finetuning(c, base, dir, log);
    emit_report(s.records, ReportFormat::Csv, (dir / "report.csv").string());
    write_summary(Json{{"frozen_accuracy", s.frozen_accuracy},
                       {"frozen_answer_gap", s.frozen_gap},
                       {"rectified_accuracy", s.rectified_accuracy},
                       {"rectified_answer_gap", s.rectified_gap},
                       {"baseline_accuracy", s.baseline_accuracy},
                       {"baseline_answer_gap", s.baseline_gap}},
                  dir);
    return static_cast<int>(ExitCode::Ok);
}

int cmd_eval(const ExperimentConfig& c, std::ostream& log) {
    const fs::path dir = prepare(c, "eval");
    const ModelParams params = obtain_base(c, dir, false, log);
    const double xi = params.config.rectifier.xi_max;
    // The clean set is the one pretraining evaluates on, the noisy set the
    // first fine-tuning replicate's.
    const EvalResult clean = evaluate(params, eval_episodes_for(c.pretrain_task, resolved_pretrain(c)), xi);
    const EvalResult noisy =
        evaluate(params, eval_episodes_for(c.task, resolved_finetune(c, 0, FineTuneMode::LoraBilinear, c.rectifier.variant)), xi);
    std::vector<ReportRecord> recs;
    for (const auto& [name, r] : {std::pair{"clean", clean}, std::pair{"noisy", noisy}}) {
        const std::string p = name;
        recs.push_back(record(c, 0, "EVAL", to_string(params.config.rectifier.variant), xi, p + "_accuracy", r.accuracy));
        recs.push_back(record(c, 0, "EVAL", to_string(params.config.rectifier.variant), xi, p + "_mean_loss", r.mean_loss));
        recs.push_back(record(c, 0, "EVAL", to_string(params.config.rectifier.variant), xi, p + "_answer_gap", r.answer_gap));
        recs.push_back(record(c, 0, "EVAL", to_string(params.config.rectifier.variant), xi, p + "_margin", r.margin));
    }
    emit_report(recs, ReportFormat::Csv, (dir / "eval.csv").string());
    log << "clean accuracy " << clean.accuracy << ", noisy accuracy " << noisy.accuracy << ", noisy gap "
        << noisy.answer_gap << '\n';
    return static_cast<int>(ExitCode::Ok);
}

int cmd_margins(const ExperimentConfig& c, std::ostream& log) {
    const fs::path dir = prepare(c, "margins");
    const ModelParams params = obtain_base(c, dir, false, log);
    const double xi = params.config.rectifier.xi_max;
    const auto episodes =
        eval_episodes_for(c.task, resolved_finetune(c, 0, FineTuneMode::LoraBilinear, c.rectifier.variant));
    std::vector<ReportRecord> recs;
    for (ScoreSpace space : {ScoreSpace::Logits, ScoreSpace::PostSoftmax}) {
        std::vector<HeadMargin> sum;
        for (const Episode& e : episodes) {
            AttentionCapture cap;
            forward(params, e.tokens, xi, &cap);
            const MarginReport m = attention_margin(cap, space);
            if (sum.empty()) {
                sum = m.heads;
            } else {
                for (std::size_t h = 0; h < sum.size(); ++h) sum[h].margin += m.heads[h].margin;
            }
        }
        std::vector<double> per_head;
        for (const HeadMargin& h : sum) {
            const double mean = h.margin / static_cast<double>(episodes.size());
            per_head.push_back(mean);
            ReportRecord r = record(c, 0, "MARGINS", to_string(params.config.rectifier.variant), xi,
                                    "margin_" + to_string(space), mean);
            r.layer = h.layer;
            r.head = h.head;
            recs.push_back(r);
        }
        if (per_head.size() >= 2)
            recs.push_back(record(c, 0, "MARGINS", to_string(params.config.rectifier.variant), xi,
                                  "spread_90_10_" + to_string(space), spread_90_10(per_head)));
    }
    emit_report(recs, ReportFormat::Csv, (dir / "margins.csv").string());
    log << recs.size() << " margin records over " << episodes.size() << " episodes\n";
    return static_cast<int>(ExitCode::Ok);
}

std::vector<VariantMean> ablate_variants(const ExperimentConfig& c, const ModelParams& base, const fs::path& dir,
                                         std::vector<ReportRecord>* records, std::ostream& log) {
    std::vector<VariantMean> out;
    for (RectifierVariant v : c.ablate_variants) {
        VariantMean m{v};
        for (int k = 0; k < c.seeds; ++k) {
            const TrainConfig t = resolved_finetune(c, k, FineTuneMode::LoraBilinear, v);
            const TrainedModel r = finetune(base, c.task, t);
            r.log.write((dir / ("ablate_" + to_string(v) + "_seed" + std::to_string(t.seed) + ".jsonl")).string());
            const EvalRecord& e = r.log.final_eval();
            if (records) {
                records->push_back(record(c, k, to_string(FineTuneMode::LoraBilinear), to_string(v), e.xi, "accuracy",
                                          e.result.accuracy));
                records->push_back(record(c, k, to_string(FineTuneMode::LoraBilinear), to_string(v), e.xi, "answer_gap",
                                          e.result.answer_gap));
            }
            m.accuracy += e.result.accuracy / c.seeds;
            m.answer_gap += e.result.answer_gap / c.seeds;
        }
        log << to_string(v) << ": accuracy " << m.accuracy << ", gap " << m.answer_gap << '\n';
        out.push_back(m);
    }
    return out;
}

int cmd_ablate(const ExperimentConfig& c, std::ostream& log) {
    const fs::path dir = prepare(c, "ablate");
    const ModelParams base = obtain_base(c, dir, true, log);
    std::vector<ReportRecord> per_seed;
    const std::vector<VariantMean> means = ablate_variants(c, base, dir, &per_seed, log);
    emit_report(per_seed, ReportFormat::Csv, (dir / "ablate_runs.csv").string());
    // One row per variant: mean accuracy over replicates.
    std::vector<ReportRecord> rows;
    for (const VariantMean& m : means) {
        ReportRecord r = record(c, 0, to_string(FineTuneMode::LoraBilinear), to_string(m.variant), c.rectifier.xi_max,
                                "mean_accuracy", m.accuracy);
        r.seed = c.seed;
        rows.push_back(r);
    }
    emit_report(rows, ReportFormat::Csv, (dir / "ablate.csv").string());
    return static_cast<int>(ExitCode::Ok);
}

OrderingSummary compare_orderings(const ExperimentConfig& c, const ModelParams& base) {
    OrderingSummary s;
    for (int k = 0; k < c.seeds; ++k) {
        // Same stream and indices for both orderings, so the episodes differ
        // only in where the query block sits.
        KVTaskConfig first = c.task, last = c.task;
        first.ordering = Ordering::QueryFirst;
        last.ordering = Ordering::QueryLast;
        const std::uint64_t seed = replicate_seed(c, k);
        s.query_first.push_back(evaluate(base, kv_episodes(first, seed, "ordering", c.ordering_episodes), 0.0).accuracy);
        s.query_last.push_back(evaluate(base, kv_episodes(last, seed, "ordering", c.ordering_episodes), 0.0).accuracy);
        s.mean_first += s.query_first.back() / c.seeds;
        s.mean_last += s.query_last.back() / c.seeds;
    }
    return s;
}

int cmd_ordering(const ExperimentConfig& c, std::ostream& log) {
    const fs::path dir = prepare(c, "ordering");
    const ModelParams base = obtain_base(c, dir, true, log);
    const OrderingSummary s = compare_orderings(c, base);
    std::vector<ReportRecord> recs;
    for (int k = 0; k < c.seeds; ++k) {
        recs.push_back(record(c, k, "FROZEN", "", 0.0, "accuracy_query_first", s.query_first[static_cast<std::size_t>(k)]));
        recs.push_back(record(c, k, "FROZEN", "", 0.0, "accuracy_query_last", s.query_last[static_cast<std::size_t>(k)]));
    }
    emit_report(recs, ReportFormat::Csv, (dir / "ordering.csv").string());
    log << "QUERY_FIRST " << s.mean_first << ", QUERY_LAST " << s.mean_last << '\n';
    return static_cast<int>(ExitCode::Ok);
}

std::vector<ProbeSummary> run_probes(const ExperimentConfig& c, std::ostream& log) {
    std::vector<ProbeSummary> out;
    for (int depth : c.probe_depths) {
        ProbeSummary p;
        p.depth = depth;
        for (int k = 0; k < c.seeds; ++k) {
            ModelConfig m = c.probe_model;
            m.n_layers = depth;
            TrainConfig t = c.probe_train;
            t.seed = replicate_seed(c, k);
            const ProbeResult r = train_match3_probe(m, c.match3, t);
            p.accuracy.push_back(r.accuracy);
            p.majority.push_back(r.majority);
            p.mean_accuracy += r.accuracy / c.seeds;
            p.mean_majority += r.majority / c.seeds;
        }
        log << depth << "-layer probe: accuracy " << p.mean_accuracy << ", majority " << p.mean_majority << '\n';
        out.push_back(std::move(p));
    }
    return out;
}

int cmd_match3(const ExperimentConfig& c, std::ostream& log) {
    const fs::path dir = prepare(c, "match3");
    const std::vector<ProbeSummary> probes = run_probes(c, log);
    std::vector<ReportRecord> recs;
    for (const ProbeSummary& p : probes)
        for (int k = 0; k < c.seeds; ++k) {
            for (const auto& [metric, v] : {std::pair{"accuracy", p.accuracy}, std::pair{"majority", p.majority}}) {
                ReportRecord r = record(c, k, "PROBE", "", 0.0, metric, v[static_cast<std::size_t>(k)]);
                r.layer = p.depth;
                recs.push_back(r);
            }
        }
    emit_report(recs, ReportFormat::Csv, (dir / "match3.csv").string());
    return static_cast<int>(ExitCode::Ok);
}

const std::vector<std::string>& command_names() {
    static const std::vector<std::string> names{"gradcheck", "theory",   "train",    "eval",
                                                "margins",   "ablate",   "ordering", "match3"};
    return names;
}

int run_command(const std::string& name, const ExperimentConfig& c, std::ostream& log) {
    if (name == "gradcheck") return cmd_gradcheck(c, log);
    if (name == "theory") return cmd_theory(c, log);
    if (name == "train") return cmd_train(c, log);
    if (name == "eval") return cmd_eval(c, log);
    if (name == "margins") return cmd_margins(c, log);
    if (name == "ablate") return cmd_ablate(c, log);
    if (name == "ordering") return cmd_ordering(c, log);
    if (name == "match3") return cmd_match3(c, log);
    throw ConfigError("unknown command '" + name + "'");
}

int guarded(const std::function<int()>& fn, std::ostream& err) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return static_cast<int>(ExitCode::BadConfig);
    } catch (const MissingArtifactError& e) {
        err << "missing artifact: " << e.what() << '\n';
        return static_cast<int>(ExitCode::MissingArtifact);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return static_cast<int>(ExitCode::CheckFailed);
    }
}

} // namespace rectattn
