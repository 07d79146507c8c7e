#include "rectattn/trainer.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "rectattn/metrics.hpp"
#include "rectattn/ops.hpp"
#include "rectattn/rng.hpp"

namespace rectattn {

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (steps_per_epoch < 1) throw ConfigError("train.steps_per_epoch must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw ConfigError("train.beta1/beta2 must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be > 0");
    if (clip_norm < 0.0) throw ConfigError("train.clip_norm must be >= 0");
    if (adapter_rank < 0) throw ConfigError("train.adapter_rank must be >= 0");
    if (eval_every < 0) throw ConfigError("train.eval_every must be >= 0");
    if (eval_episodes < 1) throw ConfigError("train.eval_episodes must be >= 1");
    if (pretrain_max_irrelevant < 0) throw ConfigError("train.pretrain_max_irrelevant must be >= 0");
    rectifier.validate();
}

std::string TrainLog::to_jsonl() const {
    std::string out;
    std::size_t e = 0;
    auto emit_eval = [&](const EvalRecord& r) {
        out += Json{{"type", "eval"},
                    {"step", r.step},
                    {"xi", r.xi},
                    {"accuracy", r.result.accuracy},
                    {"mean_loss", r.result.mean_loss},
                    {"answer_gap", r.result.answer_gap},
                    {"margin", r.result.margin},
                    {"episodes", r.result.episodes}}
                   .dump();
        out += '\n';
    };
    for (const StepRecord& s : steps) {
        while (e < evals.size() && evals[e].step <= s.step) emit_eval(evals[e++]);
        out += Json{{"type", "step"}, {"step", s.step}, {"xi", s.xi}, {"loss", s.loss}, {"grad_norm", s.grad_norm}}
                   .dump();
        out += '\n';
    }
    while (e < evals.size()) emit_eval(evals[e++]);
    return out;
}

void TrainLog::write(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << to_jsonl();
    if (!out) throw IoError("write failed: " + path);
}

const EvalRecord& TrainLog::final_eval() const {
    if (evals.empty()) throw DegenerateError("training log has no evaluation records");
    return evals.back();
}

namespace {

struct AdamSlot {
    Tensor* tensor;
    std::vector<double> grad, m, v;
};

bool finite_all(const std::vector<AdamSlot>& slots) {
    for (const AdamSlot& s : slots)
        for (double g : s.grad)
            if (!std::isfinite(g)) return false;
    return true;
}

} // namespace

TrainLog train_loop(ModelParams& params, const TrainConfig& cfg, const ExampleFn& sample, const EvalFn& eval) {
    cfg.validate();
    set_trainable(params, cfg.mode);
    std::vector<AdamSlot> slots;
    for (auto& [name, t] : trainable_parameters(params, cfg.mode))
        slots.push_back({t, std::vector<double>(t->size()), std::vector<double>(t->size()), std::vector<double>(t->size())});
    if (slots.empty()) throw ConfigError("train.mode has an empty trainable set");

    const long total = cfg.total_steps();
    const RectifierConfig& rc = params.config.rectifier;
    TrainLog log;
    auto run_eval = [&](long step) {
        if (!eval) return false;
        const double xi = xi_at(step, total, rc);
        log.evals.push_back({step, xi, eval(params, xi)});
        return cfg.target_accuracy > 0.0 && log.evals.back().result.accuracy >= cfg.target_accuracy;
    };
    if (run_eval(0)) return log;

    for (long step = 0; step < total; ++step) {
        const double xi = xi_at(step, total, rc);
        for (AdamSlot& s : slots) std::fill(s.grad.begin(), s.grad.end(), 0.0);
        double loss = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const Example ex = sample(step, b);
            Graph g;
            const BoundParams bp = bind(g, params);
            const Var l = op::cross_entropy(forward(g, bp, ex.tokens, xi), ex.targets);
            g.backward(l);
            loss += l.value().item();
            for (const Graph::Binding& bnd : g.bindings()) {
                if (!bnd.var.requires_grad()) continue;
                for (AdamSlot& s : slots) {
                    if (s.tensor != bnd.tensor) continue;
                    const auto gr = bnd.var.grad();
                    for (std::size_t k = 0; k < gr.size(); ++k) s.grad[k] += gr[k];
                }
            }
        }
        const double inv = 1.0 / cfg.batch_size;
        loss *= inv;
        double sq = 0.0;
        for (AdamSlot& s : slots)
            for (double& gv : s.grad) {
                gv *= inv;
                sq += gv * gv;
            }
        const double norm = std::sqrt(sq);
        if (!std::isfinite(loss) || !finite_all(slots))
            throw TrainingError("training diverged at step " + std::to_string(step), params, log);
        log.steps.push_back({step, xi, loss, norm});

        const double clip = cfg.clip_norm > 0.0 && norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;
        const double t = static_cast<double>(step + 1);
        const double c1 = 1.0 - std::pow(cfg.beta1, t), c2 = 1.0 - std::pow(cfg.beta2, t);
        for (AdamSlot& s : slots) {
            auto w = s.tensor->values();
            for (std::size_t k = 0; k < w.size(); ++k) {
                const double gk = s.grad[k] * clip;
                s.m[k] = cfg.beta1 * s.m[k] + (1.0 - cfg.beta1) * gk;
                s.v[k] = cfg.beta2 * s.v[k] + (1.0 - cfg.beta2) * gk * gk;
                w[k] -= cfg.learning_rate * (s.m[k] / c1) / (std::sqrt(s.v[k] / c2) + cfg.adam_eps);
            }
        }
        const long done = step + 1;
        if (done == total || (cfg.eval_every > 0 && done % cfg.eval_every == 0))
            if (run_eval(done)) break;
    }
    return log;
}

EvalResult evaluate(const ModelParams& params, const std::vector<Episode>& episodes, double xi) {
    if (episodes.empty()) throw DegenerateError("evaluate: no episodes");
    EvalResult r;
    std::size_t correct = 0, gaps = 0;
    for (const Episode& e : episodes) {
        AttentionCapture cap;
        const Tensor logits = forward(params, e.tokens, xi, &cap);
        const std::size_t row = e.readout(), V = logits.cols();
        std::size_t best = 0;
        double mx = logits.at(row, 0);
        for (std::size_t c = 1; c < V; ++c)
            if (logits.at(row, c) > mx) mx = logits.at(row, c), best = c;
        correct += static_cast<int>(best) == e.target;
        long double z = 0.0L;
        for (std::size_t c = 0; c < V; ++c) z += std::exp(static_cast<long double>(logits.at(row, c) - mx));
        r.mean_loss += static_cast<double>(std::log(z)) + mx - logits.at(row, static_cast<std::size_t>(e.target));
        if (!e.answer_positions.empty()) {
            r.answer_gap += answer_gap(cap, e);
            ++gaps;
        }
        r.margin += attention_margin(cap).mean();
    }
    const double n = static_cast<double>(episodes.size());
    r.episodes = episodes.size();
    r.accuracy = static_cast<double>(correct) / n;
    r.mean_loss /= n;
    r.margin /= n;
    if (gaps) r.answer_gap /= static_cast<double>(gaps);
    return r;
}

Example kv_example(const Episode& e) {
    Example ex{e.tokens, std::vector<int>(e.tokens.size(), -1)};
    ex.targets[e.readout()] = e.target;
    return ex;
}

std::vector<Episode> kv_episodes(const KVTaskConfig& task, std::uint64_t seed, std::string_view name, int count) {
    KVTaskConfig t = task;
    t.seed = derive_seed(seed, name);
    std::vector<Episode> out;
    for (int i = 0; i < count; ++i) out.push_back(gen_kv_episode(t, static_cast<std::uint64_t>(i)));
    return out;
}

std::vector<Episode> eval_episodes_for(const KVTaskConfig& task, const TrainConfig& cfg) {
    return kv_episodes(task, cfg.seed, "eval", cfg.eval_episodes);
}

namespace {

ExampleFn kv_stream(const KVTaskConfig& task, std::uint64_t seed, std::string_view name, int batch) {
    KVTaskConfig t = task;
    t.seed = derive_seed(seed, name);
    return [t, batch](long step, int slot) {
        return kv_example(gen_kv_episode(t, static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(batch) +
                                                static_cast<std::uint64_t>(slot)));
    };
}

void check_fits(const ModelConfig& m, const KVTaskConfig& task) {
    task.validate();
    if (m.vocab_size != task.vocab().size())
        throw ConfigError("model.vocab_size " + std::to_string(m.vocab_size) + " does not match the task vocabulary " +
                          std::to_string(task.vocab().size()));
    if (m.max_seq_len < task.seq_len())
        throw ConfigError("model.max_seq_len " + std::to_string(m.max_seq_len) + " is shorter than the task's " +
                          std::to_string(task.seq_len()));
}

} // namespace

TrainedModel pretrain_base(ModelConfig model_cfg, const KVTaskConfig& task, TrainConfig cfg) {
    if (task.n_distracting != 0 || task.n_irrelevant != 0)
        throw ConfigError("pretrain_base expects the clean task (no distracting or irrelevant documents)");
    model_cfg.vocab_size = task.vocab().size();
    model_cfg.lora_rank = model_cfg.qk_lora_rank = 0;
    model_cfg.causal = true;
    model_cfg.output_dim = 0;
    check_fits(model_cfg, task);
    cfg.mode = FineTuneMode::Full;
    TrainedModel out{init_params(model_cfg, cfg.seed), {}};
    KVTaskConfig widest = task;
    widest.n_irrelevant = cfg.pretrain_max_irrelevant;
    check_fits(model_cfg, widest);
    const auto eval_set = eval_episodes_for(task, cfg);
    ExampleFn stream = kv_stream(task, cfg.seed, "pretrain.data", cfg.batch_size);
    if (cfg.pretrain_max_irrelevant > 0 || cfg.pretrain_mix_orderings) {
        const std::uint64_t mix_seed = derive_seed(cfg.seed, "pretrain.mix");
        stream = [task, cfg, mix_seed](long step, int slot) {
            const std::uint64_t index = static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(cfg.batch_size) +
                                        static_cast<std::uint64_t>(slot);
            Rng rng(derive_seed(mix_seed, "episode", index));
            KVTaskConfig t = task;
            t.n_irrelevant = static_cast<int>(uniform_int(rng, 0, cfg.pretrain_max_irrelevant));
            if (cfg.pretrain_mix_orderings) t.ordering = uniform_int(rng, 0, 1) ? Ordering::QueryLast : Ordering::QueryFirst;
            t.seed = derive_seed(mix_seed, "data", index);
            return kv_example(gen_kv_episode(t));
        };
    }
    out.log = train_loop(out.params, cfg, stream,
                         [&](const ModelParams& p, double xi) { return evaluate(p, eval_set, xi); });
    return out;
}

TrainedModel finetune(const ModelParams& base, const KVTaskConfig& task, const TrainConfig& cfg) {
    cfg.validate();
    check_fits(base.config, task);
    TrainedModel out{base, {}};
    out.params.config.rectifier = cfg.rectifier;
    Rng rng(derive_seed(cfg.seed, "finetune.adapters"));
    if (cfg.mode != FineTuneMode::LoraQkBaseline && cfg.adapter_rank > 0) attach_bilinear(out.params, cfg.adapter_rank, rng);
    if (cfg.mode == FineTuneMode::LoraQkBaseline)
        attach_qk_adapters(out.params, matched_qk_rank(out.params.config, cfg.adapter_rank), rng);
    const auto eval_set = eval_episodes_for(task, cfg);
    out.log = train_loop(out.params, cfg, kv_stream(task, cfg.seed, "finetune.data", cfg.batch_size),
                         [&](const ModelParams& p, double xi) { return evaluate(p, eval_set, xi); });
    return out;
}

std::uint64_t frozen_checksum(ModelParams& params, FineTuneMode mode) {
    std::vector<const Tensor*> trainable;
    for (auto& [name, t] : trainable_parameters(params, mode)) trainable.push_back(t);
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&](const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) h = (h ^ p[i]) * 1099511628211ULL;
    };
    for (auto& [name, t] : params.named()) {
        if (std::find(trainable.begin(), trainable.end(), t) != trainable.end()) continue;
        mix(name.data(), name.size());
        mix(t->data().data(), t->size() * sizeof(double));
    }
    return h;
}

Example match3_example(const Match3Episode& e) { return {e.tokens, e.labels}; }

double match3_accuracy(const ModelParams& params, const std::vector<Match3Episode>& episodes) {
    if (episodes.empty()) throw DegenerateError("match3_accuracy: no episodes");
    std::size_t correct = 0, total = 0;
    for (const Match3Episode& e : episodes) {
        const Tensor logits = forward(params, e.tokens, 0.0);
        for (std::size_t i = 0; i < e.tokens.size(); ++i) {
            const int pred = logits.at(i, 1) > logits.at(i, 0) ? 1 : 0;
            correct += pred == e.labels[i];
            ++total;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

double majority_baseline(const std::vector<Match3Episode>& episodes) {
    std::size_t ones = 0, total = 0;
    for (const Match3Episode& e : episodes)
        for (int l : e.labels) ones += l, ++total;
    if (total == 0) throw DegenerateError("majority_baseline: no labels");
    const double f = static_cast<double>(ones) / static_cast<double>(total);
    return std::max(f, 1.0 - f);
}

ProbeResult train_match3_probe(ModelConfig model_cfg, const Match3Config& task, const TrainConfig& cfg) {
    task.validate();
    model_cfg.vocab_size = task.modulus;
    model_cfg.output_dim = 2;
    model_cfg.causal = false;
    model_cfg.lora_rank = model_cfg.qk_lora_rank = 0;
    if (model_cfg.max_seq_len < task.n) model_cfg.max_seq_len = task.n;
    TrainConfig c = cfg;
    c.mode = FineTuneMode::Full;
    ProbeResult out{init_params(model_cfg, cfg.seed), {}, 0.0, 0.0};

    Match3Config train_task = task, eval_task = task;
    train_task.seed = derive_seed(cfg.seed, "match3.train");
    eval_task.seed = derive_seed(cfg.seed, "match3.eval");
    std::vector<Match3Episode> eval_set;
    for (int i = 0; i < cfg.eval_episodes; ++i) eval_set.push_back(gen_match3_episode(eval_task, static_cast<std::uint64_t>(i)));
    const int batch = c.batch_size;
    out.log = train_loop(
        out.params, c,
        [train_task, batch](long step, int slot) {
            return match3_example(gen_match3_episode(
                train_task, static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(batch) + static_cast<std::uint64_t>(slot)));
        },
        [&](const ModelParams& p, double) {
            EvalResult r;
            r.accuracy = match3_accuracy(p, eval_set);
            r.episodes = eval_set.size();
            return r;
        });
    out.accuracy = match3_accuracy(out.params, eval_set);
    out.majority = majority_baseline(eval_set);
    return out;
}

Json to_json(const TrainConfig& c) {
    return Json{{"mode", to_string(c.mode)},
                {"learning_rate", c.learning_rate},
                {"batch_size", c.batch_size},
                {"epochs", c.epochs},
                {"steps_per_epoch", c.steps_per_epoch},
                {"beta1", c.beta1},
                {"beta2", c.beta2},
                {"adam_eps", c.adam_eps},
                {"clip_norm", c.clip_norm},
                {"rectifier", to_json(c.rectifier)},
                {"adapter_rank", c.adapter_rank},
                {"eval_every", c.eval_every},
                {"eval_episodes", c.eval_episodes},
                {"target_accuracy", c.target_accuracy},
                {"pretrain_max_irrelevant", c.pretrain_max_irrelevant},
                {"pretrain_mix_orderings", c.pretrain_mix_orderings},
                {"seed", c.seed}};
}

TrainConfig train_config_from_json(const Json& j, const std::string& path) {
    TrainConfig c;
    FieldReader r(j, path);
    std::string mode = to_string(c.mode);
    r.read("mode", mode);
    try {
        c.mode = parse_mode(mode);
    } catch (const ConfigError& e) {
        throw ConfigError(r.path_of("mode") + ": " + e.what());
    }
    r.read("learning_rate", c.learning_rate);
    r.read("batch_size", c.batch_size);
    r.read("epochs", c.epochs);
    r.read("steps_per_epoch", c.steps_per_epoch);
    r.read("beta1", c.beta1);
    r.read("beta2", c.beta2);
    r.read("adam_eps", c.adam_eps);
    r.read("clip_norm", c.clip_norm);
    if (const Json* rc = r.child("rectifier")) c.rectifier = rectifier_config_from_json(*rc, r.path_of("rectifier"));
    r.read("adapter_rank", c.adapter_rank);
    r.read("eval_every", c.eval_every);
    r.read("eval_episodes", c.eval_episodes);
    r.read("target_accuracy", c.target_accuracy);
    r.read("pretrain_max_irrelevant", c.pretrain_max_irrelevant);
    r.read("pretrain_mix_orderings", c.pretrain_mix_orderings);
    r.read("seed", c.seed);
    r.finish();
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return c;
}

} // namespace rectattn
