#include "rectattn/model.hpp"

#include <cmath>
#include <limits>

#include "rectattn/error.hpp"
#include "rectattn/ops.hpp"
#include "rectattn/serialize.hpp"

namespace rectattn {

void ModelConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v <= 0) throw ConfigError(std::string("model.") + name + " must be positive");
    };
    positive(vocab_size, "vocab_size");
    positive(hidden_dim, "hidden_dim");
    positive(n_layers, "n_layers");
    positive(n_query_heads, "n_query_heads");
    positive(n_kv_heads, "n_kv_heads");
    positive(head_dim, "head_dim");
    positive(ffn_dim, "ffn_dim");
    positive(max_seq_len, "max_seq_len");
    if (n_query_heads % n_kv_heads != 0) throw ConfigError("model.n_kv_heads must divide n_query_heads");
    if (head_dim * n_query_heads != hidden_dim)
        throw ConfigError("model.head_dim * n_query_heads must equal hidden_dim");
    if (lora_rank < 0) throw ConfigError("model.lora_rank must be >= 0");
    if (qk_lora_rank < 0) throw ConfigError("model.qk_lora_rank must be >= 0");
    if (output_dim < 0) throw ConfigError("model.output_dim must be >= 0");
    rectifier.validate();
}

namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = normal(rng, 0.0, stddev);
    return t;
}

// torch.nn.init.kaiming_uniform_(a = sqrt(5)): gain sqrt(2 / (1 + a^2)) times
// sqrt(3 / fan_in) collapses to a bound of 1 / sqrt(fan_in).
Tensor kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = uniform(rng, -bound, bound);
    return t;
}

template <typename T, typename P>
void collect(P& p, std::vector<std::pair<std::string, T*>>& out) {
    out.emplace_back("tok_emb", &p.tok_emb);
    out.emplace_back("pos_emb", &p.pos_emb);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        auto& L = p.layers[l];
        const std::string pre = "layers." + std::to_string(l) + ".";
        out.emplace_back(pre + "norm1", &L.norm1);
        out.emplace_back(pre + "wq", &L.wq);
        out.emplace_back(pre + "wk", &L.wk);
        out.emplace_back(pre + "wv", &L.wv);
        out.emplace_back(pre + "wo", &L.wo);
        out.emplace_back(pre + "norm2", &L.norm2);
        out.emplace_back(pre + "w1", &L.w1);
        out.emplace_back(pre + "w2", &L.w2);
        for (std::size_t g = 0; g < L.lora_a.size(); ++g) {
            out.emplace_back(pre + "lora_a." + std::to_string(g), &L.lora_a[g]);
            out.emplace_back(pre + "lora_b." + std::to_string(g), &L.lora_b[g]);
        }
        if (L.qk_aq.size()) {
            out.emplace_back(pre + "qk_aq", &L.qk_aq);
            out.emplace_back(pre + "qk_bq", &L.qk_bq);
            out.emplace_back(pre + "qk_ak", &L.qk_ak);
            out.emplace_back(pre + "qk_bk", &L.qk_bk);
        }
    }
    out.emplace_back("norm_f", &p.norm_f);
    out.emplace_back("w_out", &p.w_out);
}

bool is_bilinear(const std::string& name) {
    return name.find(".lora_a.") != std::string::npos || name.find(".lora_b.") != std::string::npos;
}

bool is_qk_adapter(const std::string& name) { return name.find(".qk_") != std::string::npos; }

} // namespace

std::vector<std::pair<std::string, Tensor*>> ModelParams::named() {
    std::vector<std::pair<std::string, Tensor*>> out;
    collect<Tensor>(*this, out);
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> ModelParams::named() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    collect<const Tensor>(*this, out);
    return out;
}

void attach_bilinear(ModelParams& params, int rank, Rng& rng) {
    if (rank < 0) throw ConfigError("bilinear rank must be >= 0");
    ModelConfig& cfg = params.config;
    cfg.lora_rank = rank;
    const std::size_t m = sz(cfg.hidden_dim), r = sz(rank);
    for (LayerParams& L : params.layers) {
        L.lora_a.clear();
        L.lora_b.clear();
        if (rank == 0) continue;
        for (int g = 0; g < cfg.n_kv_heads; ++g) {
            L.lora_a.push_back(kaiming_uniform({m, r}, m, rng));
            L.lora_b.push_back(Tensor({r, m}, 0.0));
        }
    }
}

void attach_qk_adapters(ModelParams& params, int rank, Rng& rng) {
    if (rank < 0) throw ConfigError("q/k adapter rank must be >= 0");
    ModelConfig& cfg = params.config;
    cfg.qk_lora_rank = rank;
    const std::size_t m = sz(cfg.hidden_dim), r = sz(rank);
    const std::size_t qd = sz(cfg.n_query_heads * cfg.head_dim), kd = sz(cfg.n_kv_heads * cfg.head_dim);
    for (LayerParams& L : params.layers) {
        if (rank == 0) {
            L.qk_aq = L.qk_bq = L.qk_ak = L.qk_bk = Tensor();
            continue;
        }
        L.qk_aq = kaiming_uniform({m, r}, m, rng);
        L.qk_bq = Tensor({r, qd}, 0.0);
        L.qk_ak = kaiming_uniform({m, r}, m, rng);
        L.qk_bk = Tensor({r, kd}, 0.0);
    }
}

int matched_qk_rank(const ModelConfig& cfg, int bilinear_rank) {
    const double bilinear = 2.0 * cfg.n_kv_heads * cfg.hidden_dim * bilinear_rank;
    const double unit = 2.0 * cfg.hidden_dim + (cfg.n_query_heads + cfg.n_kv_heads) * cfg.head_dim;
    return std::max(1, static_cast<int>(std::lround(bilinear / unit)));
}

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelParams p;
    p.config = cfg;
    p.seed = seed;
    Rng rng(derive_seed(seed, "model.init"));
    const std::size_t m = sz(cfg.hidden_dim), f = sz(cfg.ffn_dim);
    const std::size_t qd = sz(cfg.n_query_heads * cfg.head_dim), kd = sz(cfg.n_kv_heads * cfg.head_dim);
    const double proj = 1.0 / std::sqrt(static_cast<double>(m));
    const double resid = proj / std::sqrt(2.0 * cfg.n_layers);
    p.tok_emb = normal_tensor({sz(cfg.vocab_size), m}, 1.0, rng);
    p.pos_emb = normal_tensor({sz(cfg.max_seq_len), m}, 0.5, rng);
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerParams L;
        L.norm1 = Tensor({m}, 1.0);
        L.wq = normal_tensor({m, qd}, proj, rng);
        L.wk = normal_tensor({m, kd}, proj, rng);
        L.wv = normal_tensor({m, kd}, proj, rng);
        L.wo = normal_tensor({qd, m}, resid, rng);
        L.norm2 = Tensor({m}, 1.0);
        L.w1 = normal_tensor({m, f}, proj, rng);
        L.w2 = normal_tensor({f, m}, resid * std::sqrt(static_cast<double>(m) / static_cast<double>(f)), rng);
        p.layers.push_back(std::move(L));
    }
    p.norm_f = Tensor({m}, 1.0);
    // A small readout keeps initial predictions near uniform.
    p.w_out = normal_tensor({m, sz(cfg.output_classes())}, 0.2 * proj, rng);
    // Adapters draw from their own streams so adding one never shifts the
    // base weights.
    Rng bilinear_rng(derive_seed(seed, "model.bilinear"));
    attach_bilinear(p, cfg.lora_rank, bilinear_rng);
    Rng qk_rng(derive_seed(seed, "model.qk_adapters"));
    attach_qk_adapters(p, cfg.qk_lora_rank, qk_rng);
    return p;
}

std::string to_string(FineTuneMode m) {
    switch (m) {
        case FineTuneMode::LoraBilinear: return "LORA_BILINEAR";
        case FineTuneMode::LoraQkBaseline: return "LORA_QK_BASELINE";
        case FineTuneMode::Full: return "FULL";
    }
    return "UNKNOWN";
}

FineTuneMode parse_mode(std::string_view name) {
    for (FineTuneMode m : {FineTuneMode::LoraBilinear, FineTuneMode::LoraQkBaseline, FineTuneMode::Full})
        if (to_string(m) == name) return m;
    throw ConfigError("unknown fine-tune mode '" + std::string(name) + "'");
}

std::vector<std::pair<std::string, Tensor*>> trainable_parameters(ModelParams& params, FineTuneMode mode) {
    const ModelConfig& cfg = params.config;
    if (mode == FineTuneMode::LoraBilinear && cfg.lora_rank == 0)
        throw ConfigError("LORA_BILINEAR needs model.lora_rank > 0");
    if (mode == FineTuneMode::LoraQkBaseline && cfg.qk_lora_rank == 0)
        throw ConfigError("LORA_QK_BASELINE needs model.qk_lora_rank > 0");
    std::vector<std::pair<std::string, Tensor*>> out;
    for (auto& [name, t] : params.named()) {
        const bool take = mode == FineTuneMode::Full || (mode == FineTuneMode::LoraBilinear && is_bilinear(name)) ||
                          (mode == FineTuneMode::LoraQkBaseline && is_qk_adapter(name));
        if (take) out.emplace_back(name, t);
    }
    return out;
}

void set_trainable(ModelParams& params, FineTuneMode mode) {
    for (auto& [name, t] : params.named()) t->set_requires_grad(false);
    for (auto& [name, t] : trainable_parameters(params, mode)) t->set_requires_grad(true);
}

std::size_t count_scalars(const std::vector<std::pair<std::string, Tensor*>>& tensors) {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors) n += t->size();
    return n;
}

BoundParams bind(Graph& g, const ModelParams& params) {
    BoundParams b;
    b.params = &params;
    b.tok_emb = g.parameter(params.tok_emb);
    b.pos_emb = g.parameter(params.pos_emb);
    for (const LayerParams& L : params.layers) {
        BoundLayer bl;
        bl.norm1 = g.parameter(L.norm1);
        bl.wq = g.parameter(L.wq);
        bl.wk = g.parameter(L.wk);
        bl.wv = g.parameter(L.wv);
        bl.wo = g.parameter(L.wo);
        bl.norm2 = g.parameter(L.norm2);
        bl.w1 = g.parameter(L.w1);
        bl.w2 = g.parameter(L.w2);
        for (std::size_t k = 0; k < L.lora_a.size(); ++k) {
            bl.lora_a.push_back(g.parameter(L.lora_a[k]));
            bl.lora_b.push_back(g.parameter(L.lora_b[k]));
        }
        if (L.qk_aq.size()) {
            bl.qk_aq = g.parameter(L.qk_aq);
            bl.qk_bq = g.parameter(L.qk_bq);
            bl.qk_ak = g.parameter(L.qk_ak);
            bl.qk_bk = g.parameter(L.qk_bk);
        }
        b.layers.push_back(std::move(bl));
    }
    b.norm_f = g.parameter(params.norm_f);
    b.w_out = g.parameter(params.w_out);
    return b;
}

namespace {

struct Projections {
    Var q, k, v;
};

Projections project(Var x, const BoundLayer& L) {
    Var q = op::matmul(x, L.wq);
    Var k = op::matmul(x, L.wk);
    if (L.qk_aq.valid()) {
        q = op::add(q, op::matmul(op::matmul(x, L.qk_aq), L.qk_bq));
        k = op::add(k, op::matmul(op::matmul(x, L.qk_ak), L.qk_bk));
    }
    return {q, k, op::matmul(x, L.wv)};
}

op::Mask mask_for(const ModelConfig& cfg, std::size_t n) { return cfg.causal ? op::causal_mask(n) : nullptr; }

Tensor masked_copy(const Tensor& t, bool causal, double fill) {
    Tensor out = t;
    if (!causal) return out;
    const std::size_t n = t.rows();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) out.at(i, j) = fill;
    return out;
}

std::vector<Var> head_logits(const ModelConfig& cfg, Var x, const Projections& pr, const BoundLayer& L, double xi,
                             std::vector<HeadCapture>* capture) {
    const std::size_t hd = sz(cfg.head_dim);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    const int group = cfg.group_size();
    const bool bilinear = !L.lora_a.empty();

    std::vector<Var> raw(sz(cfg.n_kv_heads)), upd(sz(cfg.n_kv_heads));
    if (bilinear) {
        for (int g = 0; g < cfg.n_kv_heads; ++g) {
            // x_i^T A B x_j for all pairs without forming A B: (x A)(x B^T)^T.
            Var left = op::matmul(x, L.lora_a[sz(g)]);
            Var right = op::matmul_nt(x, L.lora_b[sz(g)]);
            raw[sz(g)] = op::scale(op::matmul_nt(left, right), inv_sqrt);
            upd[sz(g)] = rectify(raw[sz(g)], cfg.rectifier, xi);
        }
    }

    std::vector<Var> out;
    for (int h = 0; h < cfg.n_query_heads; ++h) {
        const int g = h / group;
        Var qh = op::slice_cols(pr.q, sz(h) * hd, hd);
        Var kg = op::slice_cols(pr.k, sz(g) * hd, hd);
        Var base = op::scale(op::matmul_nt(qh, kg), inv_sqrt);
        Var logits = bilinear ? op::add(base, upd[sz(g)]) : base;
        out.push_back(logits);
        if (capture) {
            HeadCapture hc;
            const double ninf = -std::numeric_limits<double>::infinity();
            hc.logits = masked_copy(logits.value(), cfg.causal, ninf);
            hc.base = masked_copy(base.value(), cfg.causal, 0.0);
            const Tensor zeros(base.value().shape(), 0.0);
            hc.update = masked_copy(bilinear ? upd[sz(g)].value() : zeros, cfg.causal, 0.0);
            hc.raw_update = masked_copy(bilinear ? raw[sz(g)].value() : zeros, cfg.causal, 0.0);
            capture->push_back(std::move(hc));
        }
    }
    return out;
}

} // namespace

std::vector<Var> attention_logits(Graph&, Var x, const ModelConfig& cfg, const BoundLayer& layer, double xi,
                                  std::vector<HeadCapture>* capture) {
    const Projections pr = project(x, layer);
    return head_logits(cfg, x, pr, layer, xi, capture);
}

Var forward(Graph&, const BoundParams& bp, std::span<const int> tokens, double xi, AttentionCapture* capture) {
    const ModelConfig& cfg = bp.params->config;
    const std::size_t n = tokens.size();
    if (n == 0) throw DimensionError("forward: empty token sequence");
    if (n > sz(cfg.max_seq_len))
        throw DimensionError("forward: sequence length " + std::to_string(n) + " exceeds max_seq_len " +
                             std::to_string(cfg.max_seq_len));
    for (int t : tokens)
        if (t < 0 || t >= cfg.vocab_size) throw VocabularyError("token id " + std::to_string(t) + " out of range");

    std::vector<int> positions(n);
    for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<int>(i);
    Var h = op::add(op::gather_rows(bp.tok_emb, tokens), op::gather_rows(bp.pos_emb, positions));
    const op::Mask mask = mask_for(cfg, n);
    const std::size_t hd = sz(cfg.head_dim);
    if (capture) {
        capture->seq_len = n;
        capture->causal = cfg.causal;
        capture->layers.clear();
    }

    for (const BoundLayer& L : bp.layers) {
        Var a = op::rms_norm(h, L.norm1);
        const Projections pr = project(a, L);
        std::vector<HeadCapture>* hc = nullptr;
        if (capture) hc = &capture->layers.emplace_back();
        const std::vector<Var> logits = head_logits(cfg, a, pr, L, xi, hc);
        std::vector<Var> heads;
        for (int hh = 0; hh < cfg.n_query_heads; ++hh) {
            Var p = op::softmax_rows(logits[sz(hh)], mask);
            if (hc) (*hc)[sz(hh)].probs = p.value();
            const int grp = hh / cfg.group_size();
            heads.push_back(op::matmul(p, op::slice_cols(pr.v, sz(grp) * hd, hd)));
        }
        h = op::add(h, op::matmul(op::concat_cols(heads), L.wo));
        Var b = op::rms_norm(h, L.norm2);
        h = op::add(h, op::matmul(op::silu(op::matmul(b, L.w1)), L.w2));
    }
    return op::matmul(op::rms_norm(h, bp.norm_f), bp.w_out);
}

Tensor forward(const ModelParams& params, std::span<const int> tokens, double xi, AttentionCapture* capture) {
    Graph g;
    const BoundParams bp = bind(g, params);
    return forward(g, bp, tokens, xi, capture).value();
}

namespace {

constexpr int kCheckpointVersion = 1;

} // namespace

void save_checkpoint(const ModelParams& params, const std::string& path) {
    Json j;
    j["format"] = "rectattn-checkpoint";
    j["version"] = kCheckpointVersion;
    j["seed"] = params.seed;
    j["config"] = to_json(params.config);
    Json tensors = Json::object();
    for (const auto& [name, t] : params.named()) {
        tensors[name] = Json{{"shape", t->shape()}, {"values", t->data()}};
    }
    j["tensors"] = std::move(tensors);
    write_json_file(j, path, -1);
}

ModelParams load_checkpoint(const std::string& path) {
    const Json j = read_json_file(path);
    if (j.value("format", "") != "rectattn-checkpoint") throw IoError(path + ": not a checkpoint");
    if (j.value("version", 0) != kCheckpointVersion) throw IoError(path + ": unsupported checkpoint version");
    const ModelConfig cfg = model_config_from_json(j.at("config"), "config");
    // Build the skeleton from the config, then overwrite every tensor.
    ModelParams p = init_params(cfg, j.at("seed").get<std::uint64_t>());
    const Json& tensors = j.at("tensors");
    auto named = p.named();
    if (tensors.size() != named.size()) throw IoError(path + ": tensor count does not match config");
    for (auto& [name, t] : named) {
        if (!tensors.contains(name)) throw IoError(path + ": missing tensor " + name);
        const Json& e = tensors.at(name);
        Shape shape = e.at("shape").get<Shape>();
        if (shape != t->shape()) throw IoError(path + ": shape mismatch for " + name);
        *t = Tensor(std::move(shape), e.at("values").get<std::vector<double>>());
    }
    return p;
}

} // namespace rectattn
