#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "rectattn/graph.hpp"

// Differentiable operations over Graph nodes. Every op checks shapes, computes
// its value eagerly and records a backward rule. Broadcasting is limited to a
// scalar operand (shape [1]) and the explicit add_row.
namespace rectattn::op {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var neg(Var a);

Var tanh(Var a);
Var exp(Var a);
// Throws DomainError on any non-positive entry.
Var log(Var a);
Var sigmoid(Var a);
Var silu(Var a);

// Elementwise log(sum_k exp(inputs[k])) over equally shaped inputs,
// max-shifted for stability.
Var logsumexp(const std::vector<Var>& inputs);

Var matmul(Var a, Var b);
// a * b^T, the attention-score shape.
Var matmul_nt(Var a, Var b);
Var transpose(Var a);

using Mask = std::shared_ptr<const std::vector<unsigned char>>;
// Row softmax; mask entries of 0 are excluded and produce exactly 0.
Var softmax_rows(Var x, Mask keep = nullptr);
Mask causal_mask(std::size_t n);

Var sum(Var a);
Var mean(Var a);

Var gather_rows(Var table, std::span<const int> ids);
// x (n x d) + bias broadcast over rows; bias has d elements.
Var add_row(Var x, Var bias);
Var slice_cols(Var x, std::size_t begin, std::size_t count);
Var slice_rows(Var x, std::size_t begin, std::size_t count);
Var concat_cols(const std::vector<Var>& parts);

// x_i * gain / sqrt(mean(x_i^2) + eps) per row.
Var rms_norm(Var x, Var gain, double eps = 1e-6);

// Mean cross-entropy over rows with target >= 0; rows with target < 0 are
// ignored. Throws DegenerateError when every row is ignored.
Var cross_entropy(Var logits, std::span<const int> targets);

// Generic elementwise map. `eval` fills y = f(x) and dy = f'(x) for a span of
// inputs; used to register externally defined scalar functions (the
// rectifier variants) as graph ops.
using UnaryEval = std::function<void(std::span<const double> x, std::span<double> y,
                                     std::span<double> dy)>;
Var unary(Var x, const UnaryEval& eval);

} // namespace rectattn::op
