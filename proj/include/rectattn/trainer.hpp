#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rectattn/error.hpp"
#include "rectattn/model.hpp"
#include "rectattn/serialize.hpp"
#include "rectattn/taskgen.hpp"

namespace rectattn {

struct TrainConfig {
    FineTuneMode mode = FineTuneMode::Full;
    double learning_rate = 1e-4;
    int batch_size = 8;
    int epochs = 1;
    // Toy tasks are generated on the fly, so an epoch is a fixed step count.
    int steps_per_epoch = 1000;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    // Global gradient-norm clip; 0 disables.
    double clip_norm = 1.0;
    RectifierConfig rectifier;
    // Bilinear rank attached by finetune; the q/k baseline uses the
    // parameter-matched rank.
    int adapter_rank = 4;
    // 0 evaluates only before the first and after the last step.
    int eval_every = 0;
    int eval_episodes = 200;
    // Stop once an evaluation reaches this accuracy; 0 never stops early.
    double target_accuracy = 0.0;
    // pretrain_base only: each training episode draws n_irrelevant uniformly
    // from [0, pretrain_max_irrelevant] and, when set, a random ordering.
    // Evaluation stays on the clean task. 0 / false trains on the clean task.
    int pretrain_max_irrelevant = 0;
    bool pretrain_mix_orderings = false;
    std::uint64_t seed = 0;

    long total_steps() const { return static_cast<long>(epochs) * steps_per_epoch; }
    void validate() const;
};

struct StepRecord {
    long step = 0;
    double xi = 0.0;
    double loss = 0.0;
    double grad_norm = 0.0;  // before clipping
};

struct EvalResult {
    double accuracy = 0.0;
    double mean_loss = 0.0;
    double answer_gap = 0.0;  // mean over episodes; 0 when no episode has answers
    double margin = 0.0;      // mean logit margin over all layers and heads
    std::size_t episodes = 0;
};

struct EvalRecord {
    long step = 0;
    double xi = 0.0;
    EvalResult result;
};

struct TrainLog {
    std::vector<StepRecord> steps;
    std::vector<EvalRecord> evals;

    // One JSON object per line, step and eval records interleaved by step.
    std::string to_jsonl() const;
    void write(const std::string& path) const;
    const EvalRecord& final_eval() const;
};

// Thrown when the loss or gradient stops being finite. Carries the
// parameters from before the offending step and the log so far.
class TrainingError : public NumericError {
public:
    TrainingError(const std::string& what, ModelParams last_finite, TrainLog log)
        : NumericError(what), last_finite(std::move(last_finite)), log(std::move(log)) {}
    ModelParams last_finite;
    TrainLog log;
};

// Tokens plus one target per position (< 0 ignored).
struct Example {
    std::vector<int> tokens;
    std::vector<int> targets;
};

using ExampleFn = std::function<Example(long step, int slot)>;
using EvalFn = std::function<EvalResult(const ModelParams& params, double xi)>;

// Adam on trainable_parameters(params, cfg.mode) with mean cross-entropy over
// each batch, global-norm clipping and xi = xi_at(step). Examples are drawn
// and reduced in slot order, so runs are bit-reproducible. `eval` may be
// empty.
TrainLog train_loop(ModelParams& params, const TrainConfig& cfg, const ExampleFn& sample, const EvalFn& eval);

// Argmax at the readout against the target, with loss, answer gap and logit
// margins from the attention capture.
EvalResult evaluate(const ModelParams& params, const std::vector<Episode>& episodes, double xi);

// Training target vector for an episode: the target at the readout only.
Example kv_example(const Episode& e);
// `count` episodes from the stream seeded by (seed, name).
std::vector<Episode> kv_episodes(const KVTaskConfig& task, std::uint64_t seed, std::string_view name, int count);

struct TrainedModel {
    ModelParams params;
    TrainLog log;
};

// Full-parameter training on the clean task. The model's vocabulary is the
// task's; cfg.mode is ignored.
TrainedModel pretrain_base(ModelConfig model_cfg, const KVTaskConfig& task, TrainConfig cfg);

// Copies `base`, installs cfg.rectifier, attaches the adapters cfg.mode
// needs, then trains only the mode's trainable set on `task`.
TrainedModel finetune(const ModelParams& base, const KVTaskConfig& task, const TrainConfig& cfg);

// Evaluation set used by pretrain_base / finetune for `task` and train seed.
std::vector<Episode> eval_episodes_for(const KVTaskConfig& task, const TrainConfig& cfg);

// FNV-1a over the bytes of every tensor outside trainable_parameters(mode).
std::uint64_t frozen_checksum(ModelParams& params, FineTuneMode mode);

struct ProbeResult {
    ModelParams params;
    TrainLog log;
    double accuracy = 0.0;  // per position
    double majority = 0.0;  // frequency of the more common label
};

Example match3_example(const Match3Episode& e);
double match3_accuracy(const ModelParams& params, const std::vector<Match3Episode>& episodes);
double majority_baseline(const std::vector<Match3Episode>& episodes);

// Trains a bidirectional per-position classifier (output_dim 2, vocab M).
ProbeResult train_match3_probe(ModelConfig model_cfg, const Match3Config& task, const TrainConfig& cfg);

Json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const Json& j, const std::string& path = "train");

} // namespace rectattn
