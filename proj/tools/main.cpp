#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rectattn/cli.hpp"
#include "rectattn/error.hpp"

using namespace rectattn;

namespace {

const char* describe(const std::string& name) {
    if (name == "gradcheck") return "Finite-difference check of every differentiable op";
    if (name == "theory") return "Linear vs rectified low-rank fits on synthetic instances";
    if (name == "train") return "Pretrain a base and compare fine-tuning modes";
    if (name == "eval") return "Evaluate a checkpoint on the clean and noisy tasks";
    if (name == "margins") return "Per-head margin percentiles of a checkpoint";
    if (name == "ablate") return "Fine-tune once per rectifier variant";
    if (name == "ordering") return "Query-first vs query-last accuracy of a base";
    if (name == "match3") return "Relevance probes of several depths on Match3";
    return "";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Rectified low-rank attention experiments"};
    app.require_subcommand(1, 1);

    std::string config_path, out_dir, checkpoint, run_id;
    std::vector<std::string> overrides;
    long seeds = 0;
    long long seed = -1;
    for (const std::string& name : command_names()) {
        CLI::App* sub = app.add_subcommand(name, describe(name));
        sub->add_option("-c,--config", config_path, "JSON config; defaults are used for absent fields");
        sub->add_option("-s,--set", overrides, "Override a config field, e.g. --set rectifier.xi_max=5")
            ->allow_extra_args(false);
        sub->add_option("-o,--out", out_dir, "Output root (default: $RECTATTN_OUT or ./out)");
        sub->add_option("--checkpoint", checkpoint, "Base checkpoint (sets base_checkpoint)");
        sub->add_option("--run-id", run_id, "Run directory name under the output root");
        sub->add_option("--seed", seed, "Global seed");
        sub->add_option("--seeds", seeds, name == "theory" ? "Number of instance seeds" : "Number of replicates");
    }
    CLI11_PARSE(app, argc, argv);
    const std::string command = app.get_subcommands().front()->get_name();

    return guarded(
        [&] {
            Json j = to_json(ExperimentConfig{});
            if (!config_path.empty()) {
                const Json file = read_json_file(config_path);
                if (!file.is_object()) throw ConfigError(config_path + ": expected a JSON object");
                j = to_json(experiment_config_from_json(file));
            }
            auto set = [&](const std::string& path, const Json& v) { apply_override(j, path + "=" + v.dump()); };
            if (!out_dir.empty()) set("output_dir", out_dir);
            if (!checkpoint.empty()) set("base_checkpoint", checkpoint);
            if (!run_id.empty()) set("run_id", run_id);
            if (seed >= 0) set("seed", seed);
            if (seeds > 0) set(command == "theory" ? "theory.seeds" : "seeds", seeds);
            for (const std::string& o : overrides) apply_override(j, o);
            return run_command(command, experiment_config_from_json(j), std::cerr);
        },
        std::cerr);
}
