#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rectattn/graph.hpp"
#include "rectattn/rectifier.hpp"
#include "rectattn/rng.hpp"

namespace rectattn {

struct ModelConfig {
    int vocab_size = 0;
    int hidden_dim = 32;
    int n_layers = 2;
    int n_query_heads = 4;
    int n_kv_heads = 2;
    int head_dim = 8;
    int ffn_dim = 64;
    int max_seq_len = 64;
    // Rank of the per-group bilinear update A B; 0 disables the path.
    int lora_rank = 0;
    // Rank of the q/k projection adapters used by the comparison baseline.
    int qk_lora_rank = 0;
    // false gives bidirectional attention (the Match3 probe reads every
    // position's label from the whole sequence).
    bool causal = true;
    // Output classes per position; 0 means vocab_size (next-token head).
    int output_dim = 0;
    RectifierConfig rectifier;

    void validate() const;
    int output_classes() const { return output_dim > 0 ? output_dim : vocab_size; }
    int group_size() const { return n_query_heads / n_kv_heads; }
};

struct LayerParams {
    Tensor norm1, wq, wk, wv, wo;
    Tensor norm2, w1, w2;
    // One pair per kv group: A is (m x r), B is (r x m).
    std::vector<Tensor> lora_a, lora_b;
    // q/k adapters: q = x Wq + (x Aq) Bq, likewise for k. Empty when unused.
    Tensor qk_aq, qk_bq, qk_ak, qk_bk;
};

struct ModelParams {
    ModelConfig config;
    Tensor tok_emb, pos_emb;
    std::vector<LayerParams> layers;
    Tensor norm_f, w_out;
    std::uint64_t seed = 0;

    // Every tensor in a fixed order with stable names ("layers.0.wq", ...).
    std::vector<std::pair<std::string, Tensor*>> named();
    std::vector<std::pair<std::string, const Tensor*>> named() const;
};

// Random base weights plus zero-output adapters for the ranks in `cfg`.
ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

// Adds bilinear factors (A Kaiming-uniform with a = sqrt(5), B = 0).
void attach_bilinear(ModelParams& params, int rank, Rng& rng);
// Adds q/k adapters with the same initialization convention.
void attach_qk_adapters(ModelParams& params, int rank, Rng& rng);

// q/k adapter rank whose parameter count is closest to the bilinear update
// at `bilinear_rank`. Per layer the bilinear path holds 2 G m r scalars and
// the adapters r' (2m + (H + G) head_dim), so the counts agree to within half
// of that adapter unit.
int matched_qk_rank(const ModelConfig& cfg, int bilinear_rank);

enum class FineTuneMode { LoraBilinear, LoraQkBaseline, Full };
std::string to_string(FineTuneMode m);
FineTuneMode parse_mode(std::string_view name);

// Tensors the optimizer may update in `mode`. Throws ConfigError when the
// mode's adapters are absent from the config.
std::vector<std::pair<std::string, Tensor*>> trainable_parameters(ModelParams& params, FineTuneMode mode);
// Sets requires_grad on exactly the trainable set and clears it elsewhere.
void set_trainable(ModelParams& params, FineTuneMode mode);
std::size_t count_scalars(const std::vector<std::pair<std::string, Tensor*>>& tensors);

struct HeadCapture {
    Tensor probs;   // post-softmax, 0 where masked
    Tensor logits;  // base + update, -inf where masked
    Tensor base;    // 0 where masked
    Tensor update;  // rectified update, 0 where masked
    Tensor raw_update;  // bilinear score before the rectifier, 0 where masked
};

struct AttentionCapture {
    std::size_t seq_len = 0;
    bool causal = true;
    std::vector<std::vector<HeadCapture>> layers;  // [layer][query head]
    bool masked(std::size_t i, std::size_t j) const { return causal && j > i; }
};

// Graph handles for one model's tensors inside one graph.
struct BoundLayer {
    Var norm1, wq, wk, wv, wo, norm2, w1, w2;
    std::vector<Var> lora_a, lora_b;
    Var qk_aq, qk_bq, qk_ak, qk_bk;
};

struct BoundParams {
    const ModelParams* params = nullptr;
    Var tok_emb, pos_emb, norm_f, w_out;
    std::vector<BoundLayer> layers;
};

BoundParams bind(Graph& g, const ModelParams& params);

// Per-head logits of one layer for normalized input x (n x m). Entries above the diagonal stay finite in the graph and are excluded by the
// causal softmax mask; captures record them as -inf.
std::vector<Var> attention_logits(Graph& g, Var x, const ModelConfig& cfg, const BoundLayer& layer, double xi,
                                  std::vector<HeadCapture>* capture = nullptr);

// Logits (n x output_classes). Throws VocabularyError on bad ids and
// DimensionError when the sequence exceeds max_seq_len.
Var forward(Graph& g, const BoundParams& bp, std::span<const int> tokens, double xi,
            AttentionCapture* capture = nullptr);

// Convenience without gradients.
Tensor forward(const ModelParams& params, std::span<const int> tokens, double xi,
               AttentionCapture* capture = nullptr);

// JSON checkpoint with config, seed and named tensors. Doubles are written
// in shortest round-trip form, so load(save(p)) is bit-exact.
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

} // namespace rectattn
