#pragma once

#include <vector>

#include "rectattn/gradcheck.hpp"

namespace rectattn {

// One case per registered differentiable op: the tensor primitives and every
// rectifier variant.
std::vector<GradCase> default_grad_cases();

// Cross-entropy of a 6-token instance through a one-layer model with the
// bilinear update and the rectifier; inputs are the embedding table, A and B
// of both kv groups, and W_q.
GradCase model_grad_case();

// Deterministic weights with alternating sign and magnitude in [0.5, 1], for
// contracting tensor outputs to scalars.
Tensor probe_weights(const Shape& shape, double phase = 0.0);

} // namespace rectattn
