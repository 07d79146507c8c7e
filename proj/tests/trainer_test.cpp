#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "rectattn/error.hpp"
#include "rectattn/trainer.hpp"

using namespace rectattn;

namespace {

ModelConfig tiny_model() {
    ModelConfig m;
    m.hidden_dim = 16;
    m.n_query_heads = 2;
    m.n_kv_heads = 1;
    m.head_dim = 8;
    m.ffn_dim = 32;
    m.max_seq_len = 40;
    return m;
}

KVTaskConfig small_task() {
    KVTaskConfig t;
    t.key_alphabet = 6;
    t.value_alphabet = 8;
    return t;
}

TrainConfig quick(long steps) {
    TrainConfig c;
    c.learning_rate = 3e-3;
    c.batch_size = 4;
    c.steps_per_epoch = static_cast<int>(steps);
    c.eval_episodes = 20;
    return c;
}

// A base trained only briefly: good enough to exercise fine-tuning paths.
const ModelParams& shared_base() {
    static const ModelParams base = pretrain_base(tiny_model(), small_task(), quick(30)).params;
    return base;
}

} // namespace

TEST(Trainer, InitialLossIsNearLogVocab) {
    const KVTaskConfig task = small_task();
    ModelConfig m = tiny_model();
    m.vocab_size = task.vocab().size();
    ModelParams p = init_params(m, 0);
    TrainConfig c = quick(1);
    c.batch_size = 16;
    const auto eps = kv_episodes(task, 0, "probe", 16);
    const TrainLog log = train_loop(p, c, [&](long, int slot) { return kv_example(eps[static_cast<std::size_t>(slot)]); }, {});
    ASSERT_EQ(log.steps.size(), 1u);
    const double lnv = std::log(static_cast<double>(m.vocab_size));
    EXPECT_NEAR(log.steps[0].loss, lnv, 0.1 * lnv);
}

TEST(Trainer, RunsAreByteIdentical) {
    TrainConfig c = quick(6);
    c.eval_every = 3;
    const TrainedModel a = pretrain_base(tiny_model(), small_task(), c);
    const TrainedModel b = pretrain_base(tiny_model(), small_task(), c);
    EXPECT_EQ(a.log.to_jsonl(), b.log.to_jsonl());
    EXPECT_EQ(a.params.w_out.data(), b.params.w_out.data());
    ASSERT_EQ(a.log.evals.size(), 3u);
    for (std::size_t i = 1; i < a.log.steps.size(); ++i) EXPECT_GT(a.log.steps[i].step, a.log.steps[i - 1].step);
}

TEST(Trainer, FineTuneOnlyTouchesTrainableSetAndStartsAtBase) {
    const ModelParams& base = shared_base();
    KVTaskConfig noisy = small_task();
    noisy.n_distracting = 1;
    noisy.n_irrelevant = 1;
    for (FineTuneMode mode : {FineTuneMode::LoraBilinear, FineTuneMode::LoraQkBaseline}) {
        TrainConfig c = quick(5);
        c.mode = mode;
        c.rectifier.xi_max = 3.0;
        TrainedModel ft = finetune(base, noisy, c);

        // Frozen weights are bit-identical to the base.
        ModelParams before = base;
        Rng rng(derive_seed(c.seed, "finetune.adapters"));
        before.config.rectifier = c.rectifier;
        if (mode == FineTuneMode::LoraBilinear) {
            attach_bilinear(before, c.adapter_rank, rng);
        } else {
            attach_qk_adapters(before, matched_qk_rank(before.config, c.adapter_rank), rng);
        }
        EXPECT_EQ(frozen_checksum(ft.params, mode), frozen_checksum(before, mode)) << to_string(mode);

        // B = 0 and xi = 0 at step 0: the first evaluation is the frozen base's.
        const EvalResult frozen = evaluate(base, eval_episodes_for(noisy, c), 0.0);
        const EvalRecord& first = ft.log.evals.front();
        EXPECT_EQ(first.step, 0);
        EXPECT_EQ(first.result.accuracy, frozen.accuracy);
        EXPECT_EQ(first.result.mean_loss, frozen.mean_loss);
        EXPECT_EQ(first.result.answer_gap, frozen.answer_gap);

        for (const StepRecord& s : ft.log.steps) EXPECT_EQ(s.xi, xi_at(s.step, c.total_steps(), c.rectifier));
    }
}

TEST(Trainer, LossDecreasesOnAFixedBatch) {
    const KVTaskConfig task = small_task();
    ModelConfig m = tiny_model();
    m.vocab_size = task.vocab().size();
    ModelParams p = init_params(m, 1);
    const auto eps = kv_episodes(task, 1, "fixed", 4);
    const TrainLog log = train_loop(p, quick(40), [&](long, int slot) { return kv_example(eps[static_cast<std::size_t>(slot)]); }, {});
    EXPECT_LT(log.steps.back().loss, 0.5 * log.steps.front().loss);
}

TEST(Trainer, EvaluateUniformOutputs) {
    const KVTaskConfig task = small_task();
    ModelConfig m = tiny_model();
    m.vocab_size = task.vocab().size();
    ModelParams p = init_params(m, 2);
    std::fill(p.w_out.values().begin(), p.w_out.values().end(), 0.0);
    const auto eps = kv_episodes(task, 2, "eval", 30);
    const EvalResult r = evaluate(p, eps, 0.0);
    EXPECT_EQ(r.episodes, 30u);
    EXPECT_NEAR(r.mean_loss, std::log(static_cast<double>(m.vocab_size)), 1e-12);
    // Ties resolve to token 0 (padding), which is never a target.
    EXPECT_EQ(r.accuracy, 0.0);
}

TEST(Trainer, PretrainingSolvesTheCleanTask) {
    TrainConfig c = quick(2000);
    c.learning_rate = 2e-3;
    c.batch_size = 8;
    c.eval_every = 100;
    c.eval_episodes = 100;
    c.target_accuracy = 0.95;
    const TrainedModel base = pretrain_base(tiny_model(), small_task(), c);
    EXPECT_GE(base.log.final_eval().result.accuracy, 0.95);
}

TEST(Trainer, DivergenceRaisesWithLastFiniteParameters) {
    const KVTaskConfig task = small_task();
    ModelConfig m = tiny_model();
    m.vocab_size = task.vocab().size();
    ModelParams p = init_params(m, 3);
    const auto eps = kv_episodes(task, 3, "x", 1);
    TrainConfig c = quick(20);
    c.learning_rate = 1e300;
    try {
        train_loop(p, c, [&](long, int) { return kv_example(eps[0]); }, {});
        FAIL();
    } catch (const TrainingError& e) {
        EXPECT_FALSE(e.log.steps.empty());
        EXPECT_LT(e.log.steps.size(), 20u);
        for (const auto& [name, t] : e.last_finite.named())
            for (double v : t->values()) ASSERT_TRUE(std::isfinite(v)) << name;
    }
}

TEST(Trainer, ConfigErrorsAndJsonRoundTrip) {
    TrainConfig c;
    c.mode = FineTuneMode::LoraQkBaseline;
    c.learning_rate = 2.5e-3;
    c.rectifier.variant = RectifierVariant::TanhOnly;
    c.pretrain_mix_orderings = true;
    EXPECT_EQ(to_json(train_config_from_json(to_json(c))), to_json(c));

    Json bad = to_json(c);
    bad["batch_size"] = 0;
    EXPECT_THROW(train_config_from_json(bad), ConfigError);
    bad = to_json(c);
    bad["learning_rate"] = -1.0;
    EXPECT_THROW(train_config_from_json(bad), ConfigError);
    bad = to_json(c);
    bad["extra"] = true;
    try {
        train_config_from_json(bad, "cfg.train");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("cfg.train.extra"), std::string::npos);
    }

    KVTaskConfig noisy = small_task();
    noisy.n_irrelevant = 1;
    EXPECT_THROW(pretrain_base(tiny_model(), noisy, quick(1)), ConfigError);
}
