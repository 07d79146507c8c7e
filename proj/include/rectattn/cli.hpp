#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "rectattn/gradcheck.hpp"
#include "rectattn/metrics.hpp"
#include "rectattn/model.hpp"
#include "rectattn/serialize.hpp"
#include "rectattn/taskgen.hpp"
#include "rectattn/theory.hpp"
#include "rectattn/trainer.hpp"

namespace rectattn {

// Environment variable naming the output root when output_dir is empty.
inline constexpr const char* kOutputRootEnv = "RECTATTN_OUT";

enum class ExitCode : int { Ok = 0, CheckFailed = 1, MissingArtifact = 2, BadConfig = 3 };

struct ExperimentConfig {
    std::string run_id = "run";
    // Replicate k uses seed + k; components derive their streams from it by name.
    std::uint64_t seed = 0;
    std::string output_dir;
    // Base model for train (stage finetune), eval, margins, ablate and
    // ordering. Empty: train/ablate/ordering pretrain one, eval/margins fail.
    std::string base_checkpoint;
    // "pretrain", "finetune" or "both".
    std::string stages = "both";
    int seeds = 5;

    ModelConfig model;
    // Noisy task used for fine-tuning, ablation, ordering and eval.
    KVTaskConfig task;
    // Clean task the base is pretrained on.
    KVTaskConfig pretrain_task;
    TrainConfig pretrain;
    TrainConfig finetune;
    // Rectifier installed by fine-tuning.
    RectifierConfig rectifier;
    TheoryConfig theory;

    Match3Config match3;
    ModelConfig probe_model;
    TrainConfig probe_train;
    std::vector<int> probe_depths{1, 3};

    int ordering_episodes = 500;
    std::vector<RectifierVariant> ablate_variants{kAllVariants.begin(), kAllVariants.end()};
    GradSuiteOptions gradcheck;

    ExperimentConfig();
    void validate() const;
};

Json to_json(const ExperimentConfig& c);
// Strict: unknown fields and bad values raise ConfigError naming the path.
ExperimentConfig experiment_config_from_json(const Json& j);

// Applies "a.b.c=value" to `j`. The value is parsed as JSON when it parses,
// otherwise taken as a string. The path must already exist.
void apply_override(Json& j, const std::string& assignment);

// output_dir, else $RECTATTN_OUT, else "out"; then run_id/command.
std::filesystem::path run_directory(const ExperimentConfig& c, const std::string& command);

// Every subcommand. Writes config.resolved.json and its outputs under
// run_directory(c, name), logs progress to `log` and returns the exit code.
// Errors propagate as exceptions; guarded() maps them.
int cmd_gradcheck(const ExperimentConfig& c, std::ostream& log);
int cmd_theory(const ExperimentConfig& c, std::ostream& log);
int cmd_train(const ExperimentConfig& c, std::ostream& log);
int cmd_eval(const ExperimentConfig& c, std::ostream& log);
int cmd_margins(const ExperimentConfig& c, std::ostream& log);
int cmd_ablate(const ExperimentConfig& c, std::ostream& log);
int cmd_ordering(const ExperimentConfig& c, std::ostream& log);
int cmd_match3(const ExperimentConfig& c, std::ostream& log);

const std::vector<std::string>& command_names();
// Dispatches by name; ConfigError for an unknown command.
int run_command(const std::string& name, const ExperimentConfig& c, std::ostream& log);
// Runs `fn`, turning exceptions into exit codes and a message on `err`.
int guarded(const std::function<int()>& fn, std::ostream& err);

// Pieces the commands are built from, shared with the acceptance checks.

Json gradcheck_summary(const GradSuiteReport& report);
GradSuiteReport run_full_grad_suite(const GradSuiteOptions& opts);

TrainConfig resolved_pretrain(const ExperimentConfig& c);
TrainConfig resolved_finetune(const ExperimentConfig& c, int replicate, FineTuneMode mode, RectifierVariant variant);

// Loads base_checkpoint (MissingArtifactError when absent) or, when it is
// empty and `may_pretrain`, pretrains and writes base.ckpt.json and
// pretrain.jsonl into `dir`.
ModelParams obtain_base(const ExperimentConfig& c, const std::filesystem::path& dir, bool may_pretrain, std::ostream& log);

struct ComparisonSummary {
    std::vector<ReportRecord> records;
    double frozen_accuracy = 0.0, frozen_gap = 0.0;
    double rectified_accuracy = 0.0, rectified_gap = 0.0;
    double baseline_accuracy = 0.0, baseline_gap = 0.0;
};
// Frozen base vs LORA_BILINEAR with the configured rectifier vs
// LORA_QK_BASELINE, `seeds` replicates, means over replicates.
ComparisonSummary compare_finetuning(const ExperimentConfig& c, const ModelParams& base, const std::filesystem::path& dir,
                                     std::ostream& log);

struct VariantMean {
    RectifierVariant variant;
    double accuracy = 0.0;
    double answer_gap = 0.0;
};
std::vector<VariantMean> ablate_variants(const ExperimentConfig& c, const ModelParams& base,
                                         const std::filesystem::path& dir, std::vector<ReportRecord>* records,
                                         std::ostream& log);

struct OrderingSummary {
    std::vector<double> query_first, query_last;  // per replicate
    double mean_first = 0.0, mean_last = 0.0;
};
OrderingSummary compare_orderings(const ExperimentConfig& c, const ModelParams& base);

struct ProbeSummary {
    int depth = 0;
    std::vector<double> accuracy, majority;  // per replicate
    double mean_accuracy = 0.0, mean_majority = 0.0;
};
std::vector<ProbeSummary> run_probes(const ExperimentConfig& c, std::ostream& log);

} // namespace rectattn
