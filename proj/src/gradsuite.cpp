#include "rectattn/gradsuite.hpp"

#include <cmath>
#include <memory>

#include "rectattn/model.hpp"
#include "rectattn/ops.hpp"
#include "rectattn/rectifier.hpp"

namespace rectattn {

Tensor probe_weights(const Shape& shape, double phase) {
    Tensor w(shape);
    // Magnitudes stay in [0.5, 1]. A weight near zero would shrink that
    // output's gradient into the finite-difference roundoff floor.
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double mag = 0.75 + 0.25 * std::cos(1.37 * static_cast<double>(i) + 0.61 + phase);
        w[i] = (i % 2 ? -mag : mag);
    }
    return w;
}

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -2.0, double hi = 2.0) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = uniform(rng, lo, hi);
    return t;
}

// Case whose op maps its inputs to a tensor; contracted with probe weights.
GradCase tensor_case(std::string name, std::vector<Shape> shapes,
                     std::function<Var(Graph&, const std::vector<Var>&)> op_fn, double lo = -2.0,
                     double hi = 2.0) {
    GradCase c;
    c.name = std::move(name);
    c.sample = [shapes, lo, hi](Rng& rng) {
        std::vector<Tensor> xs;
        for (const Shape& s : shapes) xs.push_back(random_tensor(rng, s, lo, hi));
        return xs;
    };
    c.f = [op_fn](Graph& g, const std::vector<Var>& xs) {
        Var y = op_fn(g, xs);
        return weighted_sum(y, probe_weights(y.shape()));
    };
    c.centered_at = [op_fn](const std::vector<Tensor>& point) -> MultiScalarFn {
        Graph g0;
        std::vector<Var> xs0;
        for (const Tensor& t : point) xs0.push_back(g0.constant(t));
        const Tensor base = op_fn(g0, xs0).value();
        return [op_fn, base](Graph& g, const std::vector<Var>& xs) {
            Var y = op_fn(g, xs);
            return weighted_sum(op::sub(y, g.constant(base)), probe_weights(y.shape()));
        };
    };
    return c;
}

GradCase rectifier_case(RectifierVariant variant, double xi) {
    RectifierConfig cfg;
    cfg.variant = variant;
    cfg.xi_max = xi;
    const std::vector<double> kinks = kink_points(cfg, xi);
    GradCase c = tensor_case("rectify:" + to_string(variant), {{8}},
                             [cfg, xi](Graph&, const std::vector<Var>& xs) { return rectify(xs[0], cfg, xi); },
                             -4.0, 4.0);
    if (!kinks.empty()) {
        c.near_kink = [kinks](const std::vector<Tensor>& xs) {
            for (double v : xs[0].values())
                for (double k : kinks)
                    if (std::abs(v - k) < 1e-4) return true;
            return false;
        };
    }
    return c;
}

} // namespace

// Scalar loss of a 6-token instance through embeddings, projections, the
// bilinear factors, the rectifier and the rest of a one-layer model. Random
// draws cover the embedding table, both groups' A and B, and W_q.
GradCase model_grad_case() {
    ModelConfig cfg;
    cfg.vocab_size = 8;
    cfg.hidden_dim = 16;
    cfg.n_layers = 1;
    cfg.n_query_heads = 4;
    cfg.n_kv_heads = 2;
    cfg.head_dim = 4;
    cfg.ffn_dim = 24;
    cfg.max_seq_len = 8;
    cfg.lora_rank = 2;
    auto base = std::make_shared<ModelParams>(init_params(cfg, 7));
    {
        Rng rng(derive_seed(7, "gradsuite.readout"));
        for (double& v : base->w_out.values()) v = normal(rng, 0.0, 0.25);
    }
    const double xi = 3.0;
    static const std::vector<int> tokens = {3, 6, 1, 7, 6, 2};
    static const std::vector<int> targets = {5, 0, 2, 4, 4, 1};

    GradCase c;
    c.name = "model:rectified_path";
    // Some forty ops deep, double roundoff in the loss sits near 1e-15; a step
    // of 3e-5 keeps both it and the truncation term well under tolerance.
    c.step = 3e-5;
    c.sample = [base](Rng& rng) {
        const LayerParams& L = base->layers[0];
        std::vector<Tensor> xs = {base->tok_emb, L.lora_a[0], L.lora_a[1], L.lora_b[0], L.lora_b[1], L.wq};
        // Embeddings and W_q keep their initial values; A is redrawn at its
        // Kaiming scale and B at unit scale so the update is far from zero.
        for (std::size_t k = 1; k <= 4; ++k) {
            const double scale = k <= 2 ? 0.25 : 1.5;
            for (double& v : xs[k].values()) v = uniform(rng, -scale, scale);
        }
        return xs;
    };
    auto bound = [base](Graph& g, const std::vector<Var>& xs) {
        BoundParams bp = bind(g, *base);
        bp.tok_emb = xs[0];
        bp.layers[0].lora_a = {xs[1], xs[2]};
        bp.layers[0].lora_b = {xs[3], xs[4]};
        bp.layers[0].wq = xs[5];
        return bp;
    };
    c.f = [bound, xi](Graph& g, const std::vector<Var>& xs) {
        return op::cross_entropy(forward(g, bound(g, xs), tokens, xi), targets);
    };
    const std::vector<double> kinks = kink_points(cfg.rectifier, xi);
    // A step moves scores by far less than 1e-3 at these magnitudes.
    c.near_kink = [bound, kinks, xi](const std::vector<Tensor>& xs) {
        Graph g;
        std::vector<Var> vs;
        for (const Tensor& t : xs) vs.push_back(g.constant(t));
        AttentionCapture cap;
        forward(g, bound(g, vs), tokens, xi, &cap);
        for (const HeadCapture& hc : cap.layers[0])
            for (double s : hc.raw_update.values())
                for (double k : kinks)
                    if (std::abs(s - k) < 1e-3) return true;
        return false;
    };
    return c;
}

std::vector<GradCase> default_grad_cases() {
    using Xs = const std::vector<Var>&;
    std::vector<GradCase> cases;
    cases.push_back(tensor_case("add", {{3, 4}, {3, 4}}, [](Graph&, Xs x) { return op::add(x[0], x[1]); }));
    cases.push_back(tensor_case("add_scalar_broadcast", {{3, 4}, {1}},
                                [](Graph&, Xs x) { return op::add(x[0], x[1]); }));
    cases.push_back(tensor_case("sub", {{3, 4}, {3, 4}}, [](Graph&, Xs x) { return op::sub(x[0], x[1]); }));
    cases.push_back(tensor_case("mul", {{3, 4}, {3, 4}}, [](Graph&, Xs x) { return op::mul(x[0], x[1]); }));
    cases.push_back(tensor_case("mul_scalar_broadcast", {{1}, {2, 5}},
                                [](Graph&, Xs x) { return op::mul(x[0], x[1]); }));
    cases.push_back(tensor_case("scale", {{2, 3}}, [](Graph&, Xs x) { return op::scale(x[0], -1.7); }));
    cases.push_back(tensor_case("add_scalar", {{2, 3}}, [](Graph&, Xs x) { return op::add_scalar(x[0], 0.3); }));
    cases.push_back(tensor_case("tanh", {{3, 3}}, [](Graph&, Xs x) { return op::tanh(x[0]); }));
    cases.push_back(tensor_case("exp", {{3, 3}}, [](Graph&, Xs x) { return op::exp(x[0]); }));
    cases.push_back(tensor_case("log", {{3, 3}}, [](Graph&, Xs x) { return op::log(x[0]); }, 0.2, 2.0));
    cases.push_back(tensor_case("sigmoid", {{3, 3}}, [](Graph&, Xs x) { return op::sigmoid(x[0]); }));
    cases.push_back(tensor_case("silu", {{3, 3}}, [](Graph&, Xs x) { return op::silu(x[0]); }));
    cases.push_back(tensor_case("logsumexp", {{2, 3}, {2, 3}, {2, 3}},
                                [](Graph&, Xs x) { return op::logsumexp({x[0], x[1], x[2]}); }));
    cases.push_back(tensor_case("matmul", {{3, 4}, {4, 2}}, [](Graph&, Xs x) { return op::matmul(x[0], x[1]); }));
    cases.push_back(tensor_case("matmul_nt", {{3, 4}, {5, 4}},
                                [](Graph&, Xs x) { return op::matmul_nt(x[0], x[1]); }));
    cases.push_back(tensor_case("transpose", {{3, 2}}, [](Graph&, Xs x) { return op::transpose(x[0]); }));
    cases.push_back(tensor_case("softmax_rows", {{4, 4}},
                                [](Graph&, Xs x) { return op::softmax_rows(x[0], op::causal_mask(4)); }));
    cases.push_back(tensor_case("sum", {{2, 3}}, [](Graph&, Xs x) { return op::sum(x[0]); }));
    cases.push_back(tensor_case("mean", {{2, 3}}, [](Graph&, Xs x) { return op::mean(x[0]); }));
    cases.push_back(tensor_case("gather_rows", {{4, 3}}, [](Graph&, Xs x) {
        static const std::vector<int> ids = {2, 0, 2, 3, 1};
        return op::gather_rows(x[0], ids);
    }));
    cases.push_back(tensor_case("add_row", {{3, 4}, {4}}, [](Graph&, Xs x) { return op::add_row(x[0], x[1]); }));
    cases.push_back(tensor_case("slice_cols", {{3, 5}}, [](Graph&, Xs x) { return op::slice_cols(x[0], 1, 3); }));
    cases.push_back(tensor_case("slice_rows", {{5, 3}}, [](Graph&, Xs x) { return op::slice_rows(x[0], 2, 2); }));
    cases.push_back(tensor_case("concat_cols", {{3, 2}, {3, 3}},
                                [](Graph&, Xs x) { return op::concat_cols({x[0], x[1]}); }));
    cases.push_back(tensor_case("rms_norm", {{3, 4}, {4}}, [](Graph&, Xs x) { return op::rms_norm(x[0], x[1]); }));
    cases.push_back(tensor_case("cross_entropy", {{4, 5}}, [](Graph&, Xs x) {
        static const std::vector<int> targets = {1, -1, 4, 0};
        return op::cross_entropy(x[0], targets);
    }));
    for (RectifierVariant v : kAllVariants) cases.push_back(rectifier_case(v, 3.0));
    return cases;
}

} // namespace rectattn
