#include "rectattn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "rectattn/error.hpp"

namespace rectattn::op {

namespace {

Graph& graph_of(Var a, Var b) {
    if (&a.graph() != &b.graph()) throw Error("operands belong to different graphs");
    return a.graph();
}

void add_into(std::span<double> dst, std::span<const double> src, double factor = 1.0) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += factor * src[i];
}

// Shape rule for binary elementwise ops: equal shapes, or one side scalar.
enum class Bcast { None, LeftScalar, RightScalar };

Bcast binary_shape(const Tensor& a, const Tensor& b, const char* name) {
    if (a.shape() == b.shape()) return Bcast::None;
    if (b.size() == 1) return Bcast::RightScalar;
    if (a.size() == 1) return Bcast::LeftScalar;
    throw DimensionError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename F>
Tensor map_binary(const Tensor& a, const Tensor& b, Bcast bc, F f) {
    const Tensor& big = bc == Bcast::LeftScalar ? b : a;
    Tensor out(big.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double av = bc == Bcast::LeftScalar ? a[0] : a[i];
        const double bv = bc == Bcast::RightScalar ? b[0] : b[i];
        out[i] = f(av, bv);
    }
    return out;
}

// Accumulates dy * d(out)/d(operand) into an operand that may be a broadcast scalar.
void reduce_into(std::span<double> dst, std::span<const double> contrib) {
    if (dst.size() == contrib.size()) {
        add_into(dst, contrib);
    } else {
        double s = 0.0;
        for (double c : contrib) s += c;
        dst[0] += s;
    }
}

Var elementwise(Var a, Tensor out, std::vector<double> deriv) {
    const std::uint32_t ia = a.id();
    return a.graph().record(std::move(out), {ia},
                            [ia, d = std::move(deriv)](Graph& g, std::uint32_t self) {
                                auto gy = g.grad(self);
                                auto ga = g.grad(ia);
                                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * d[i];
                            });
}

} // namespace

Var add(Var a, Var b) {
    Graph& g = graph_of(a, b);
    const Bcast bc = binary_shape(a.value(), b.value(), "add");
    Tensor out = map_binary(a.value(), b.value(), bc, [](double x, double y) { return x + y; });
    const std::uint32_t ia = a.id(), ib = b.id();
    return g.record(std::move(out), {ia, ib}, [ia, ib](Graph& g, std::uint32_t self) {
        auto gy = g.grad(self);
        if (g.requires_grad(ia)) reduce_into(g.grad(ia), gy);
        if (g.requires_grad(ib)) reduce_into(g.grad(ib), gy);
    });
}

Var sub(Var a, Var b) {
    Graph& g = graph_of(a, b);
    const Bcast bc = binary_shape(a.value(), b.value(), "sub");
    Tensor out = map_binary(a.value(), b.value(), bc, [](double x, double y) { return x - y; });
    const std::uint32_t ia = a.id(), ib = b.id();
    return g.record(std::move(out), {ia, ib}, [ia, ib](Graph& g, std::uint32_t self) {
        auto gy = g.grad(self);
        if (g.requires_grad(ia)) reduce_into(g.grad(ia), gy);
        if (g.requires_grad(ib)) {
            std::vector<double> neg(gy.begin(), gy.end());
            for (double& v : neg) v = -v;
            reduce_into(g.grad(ib), neg);
        }
    });
}

Var mul(Var a, Var b) {
    Graph& g = graph_of(a, b);
    const Bcast bc = binary_shape(a.value(), b.value(), "mul");
    Tensor out = map_binary(a.value(), b.value(), bc, [](double x, double y) { return x * y; });
    const std::uint32_t ia = a.id(), ib = b.id();
    return g.record(std::move(out), {ia, ib}, [ia, ib, bc](Graph& g, std::uint32_t self) {
        auto gy = g.grad(self);
        const Tensor& av = g.value(ia);
        const Tensor& bv = g.value(ib);
        std::vector<double> contrib(gy.size());
        if (g.requires_grad(ia)) {
            for (std::size_t i = 0; i < gy.size(); ++i)
                contrib[i] = gy[i] * (bc == Bcast::RightScalar ? bv[0] : bv[i]);
            reduce_into(g.grad(ia), contrib);
        }
        if (g.requires_grad(ib)) {
            for (std::size_t i = 0; i < gy.size(); ++i)
                contrib[i] = gy[i] * (bc == Bcast::LeftScalar ? av[0] : av[i]);
            reduce_into(g.grad(ib), contrib);
        }
    });
}

Var scale(Var a, double s) {
    Tensor out(a.shape());
    const Tensor& x = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * x[i];
    const std::uint32_t ia = a.id();
    return a.graph().record(std::move(out), {ia}, [ia, s](Graph& g, std::uint32_t self) {
        add_into(g.grad(ia), g.grad(self), s);
    });
}

Var add_scalar(Var a, double s) {
    Tensor out(a.shape());
    const Tensor& x = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + s;
    const std::uint32_t ia = a.id();
    return a.graph().record(std::move(out), {ia}, [ia](Graph& g, std::uint32_t self) {
        add_into(g.grad(ia), g.grad(self));
    });
}

Var neg(Var a) { return scale(a, -1.0); }

Var tanh(Var a) {
    const Tensor& x = a.value();
    Tensor out(x.shape());
    std::vector<double> d(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = std::tanh(x[i]);
        d[i] = 1.0 - out[i] * out[i];
    }
    return elementwise(a, std::move(out), std::move(d));
}

Var exp(Var a) {
    const Tensor& x = a.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::exp(x[i]);
    std::vector<double> d(out.values().begin(), out.values().end());
    return elementwise(a, std::move(out), std::move(d));
}

Var log(Var a) {
    const Tensor& x = a.value();
    Tensor out(x.shape());
    std::vector<double> d(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(x[i] > 0.0)) {
            throw DomainError("log of non-positive value " + std::to_string(x[i]) + " at index " +
                              std::to_string(i));
        }
        out[i] = std::log(x[i]);
        d[i] = 1.0 / x[i];
    }
    return elementwise(a, std::move(out), std::move(d));
}

namespace {
double stable_sigmoid(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}
} // namespace

Var sigmoid(Var a) {
    const Tensor& x = a.value();
    Tensor out(x.shape());
    std::vector<double> d(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = stable_sigmoid(x[i]);
        d[i] = out[i] * (1.0 - out[i]);
    }
    return elementwise(a, std::move(out), std::move(d));
}

Var silu(Var a) {
    const Tensor& x = a.value();
    Tensor out(x.shape());
    std::vector<double> d(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double s = stable_sigmoid(x[i]);
        out[i] = x[i] * s;
        d[i] = s * (1.0 + x[i] * (1.0 - s));
    }
    return elementwise(a, std::move(out), std::move(d));
}

Var logsumexp(const std::vector<Var>& inputs) {
    if (inputs.empty()) throw DimensionError("logsumexp of an empty list");
    Graph& g = inputs.front().graph();
    const Shape& shape = inputs.front().shape();
    for (const Var& v : inputs) {
        if (&v.graph() != &g) throw Error("operands belong to different graphs");
        if (v.shape() != shape) throw DimensionError("logsumexp: shape mismatch");
    }
    const std::size_t n = shape_numel(shape);
    const std::size_t k = inputs.size();
    Tensor out(shape);
    // weights[j * n + i] = softmax weight of input j at element i
    std::vector<double> weights(k * n);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, inputs[j].value()[i]);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            weights[j * n + i] = std::exp(inputs[j].value()[i] - mx);
            s += weights[j * n + i];
        }
        out[i] = mx + std::log(s);
        for (std::size_t j = 0; j < k; ++j) weights[j * n + i] /= s;
    }
    std::vector<std::uint32_t> ids;
    for (const Var& v : inputs) ids.push_back(v.id());
    return g.record(std::move(out), ids, [ids, n, w = std::move(weights)](Graph& g, std::uint32_t self) {
        auto gy = g.grad(self);
        for (std::size_t j = 0; j < ids.size(); ++j) {
            if (!g.requires_grad(ids[j])) continue;
            auto gj = g.grad(ids[j]);
            for (std::size_t i = 0; i < n; ++i) gj[i] += gy[i] * w[j * n + i];
        }
    });
}

Var matmul(Var a, Var b) {
    Graph& g = graph_of(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.ndim() != 2 || bv.ndim() != 2 || av.cols() != bv.rows()) {
        throw DimensionError("matmul: cannot multiply " + shape_str(av.shape()) + " by " +
                             shape_str(bv.shape()));
    }
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    Tensor out({m, n});
    kernel::gemm(av.values(), bv.values(), out.values(), m, k, n);
    const std::uint32_t ia = a.id(), ib = b.id();
    return g.record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Graph& g, std::uint32_t self) {
        auto gy = g.grad(self);
        // dA = dC * B^T ; dB = A^T * dC
        if (g.requires_grad(ia)) kernel::gemm(gy, g.value(ib).values(), g.grad(ia), m, n, k, false, true);
        if (g.requires_grad(ib)) kernel::gemm(g.value(ia).values(), gy, g.grad(ib), k, m, n, true, false);
    });
}

Var matmul_nt(Var a, Var b) {
    Graph& g = graph_of(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.ndim() != 2 || bv.ndim() != 2 || av.cols() != bv.cols()) {
        throw DimensionError("matmul_nt: cannot multiply " + shape_str(av.shape()) + " by transpose of " +
                             shape_str(bv.shape()));
    }
    const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
    Tensor out({m, n});
    kernel::gemm(av.values(), bv.values(), out.values(), m, k, n, false, true);
    const std::uint32_t ia = a.id(), ib = b.id();
    return g.record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Graph& g, std::uint32_t self) {
        auto gy = g.grad(self);
        // C = A B^T: dA = dC * B ; dB = dC^T * A
        if (g.requires_grad(ia)) kernel::gemm(gy, g.value(ib).values(), g.grad(ia), m, n, k);
        if (g.requires_grad(ib)) kernel::gemm(gy, g.value(ia).values(), g.grad(ib), n, m, k, true, false);
    });
}

Var transpose(Var a) {
    const Tensor& x = a.value();
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
    const std::uint32_t ia = a.id();
    return a.graph().record(std::move(out), {ia}, [ia, r, c](Graph& g, std::uint32_t self) {
        auto gy = g.grad(self);
        auto ga = g.grad(ia);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += gy[j * r + i];
    });
}

Mask causal_mask(std::size_t n) {
    auto m = std::make_shared<std::vector<unsigned char>>(n * n, 0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) (*m)[i * n + j] = 1;
    return m;
}

Var softmax_rows(Var x, Mask keep) {
    const Tensor& xv = x.value();
    const std::size_t r = xv.rows(), c = xv.cols();
    if (keep && keep->size() != r * c) throw DimensionError("softmax_rows: mask size mismatch");
    Tensor out({r, c});
    kernel::softmax_rows(xv.values(), out.values(), r, c,
                         keep ? std::span<const unsigned char>(*keep) : std::span<const unsigned char>());
    const std::uint32_t ix = x.id();
    return x.graph().record(std::move(out), {ix}, [ix, r, c](Graph& g, std::uint32_t self) {
        auto gy = g.grad(self);
        const Tensor& y = g.value(self);
        auto gx = g.grad(ix);
        for (std::size_t i = 0; i < r; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += gy[i * c + j] * y[i * c + j];
            for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += y[i * c + j] * (gy[i * c + j] - dot);
        }
    });
}

Var sum(Var a) {
    double s = 0.0;
    for (double v : a.value().values()) s += v;
    const std::uint32_t ia = a.id();
    return a.graph().record(Tensor::scalar(s), {ia}, [ia](Graph& g, std::uint32_t self) {
        const double gy = g.grad(self)[0];
        for (double& v : g.grad(ia)) v += gy;
    });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var gather_rows(Var table, std::span<const int> ids) {
    const Tensor& t = table.value();
    const std::size_t rows = t.rows(), d = t.cols();
    Tensor out({ids.size(), d});
    std::vector<int> idx(ids.begin(), ids.end());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= rows) {
            throw VocabularyError("row index " + std::to_string(idx[i]) + " outside table of " +
                                  std::to_string(rows) + " rows");
        }
        std::copy_n(t.values().begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d,
                    out.values().begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    const std::uint32_t it = table.id();
    return table.graph().record(std::move(out), {it}, [it, d, idx = std::move(idx)](Graph& g, std::uint32_t self) {
        auto gy = g.grad(self);
        auto gt = g.grad(it);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) gt[static_cast<std::size_t>(idx[i]) * d + j] += gy[i * d + j];
    });
}

Var add_row(Var x, Var bias) {
    Graph& g = graph_of(x, bias);
    const Tensor& xv = x.value();
    const Tensor& bv = bias.value();
    const std::size_t r = xv.rows(), c = xv.cols();
    if (bv.size() != c) throw DimensionError("add_row: bias of " + std::to_string(bv.size()) +
                                             " for rows of " + std::to_string(c));
    Tensor out({r, c});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] + bv[j];
    const std::uint32_t ix = x.id(), ib = bias.id();
    return g.record(std::move(out), {ix, ib}, [ix, ib, r, c](Graph& g, std::uint32_t self) {
        auto gy = g.grad(self);
        if (g.requires_grad(ix)) add_into(g.grad(ix), gy);
        if (g.requires_grad(ib)) {
            auto gb = g.grad(ib);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gb[j] += gy[i * c + j];
        }
    });
}

Var slice_cols(Var x, std::size_t begin, std::size_t count) {
    const Tensor& xv = x.value();
    const std::size_t r = xv.rows(), c = xv.cols();
    if (count == 0 || begin + count > c) throw DimensionError("slice_cols out of range");
    Tensor out({r, count});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j) out[i * count + j] = xv[i * c + begin + j];
    const std::uint32_t ix = x.id();
    return x.graph().record(std::move(out), {ix}, [ix, r, c, begin, count](Graph& g, std::uint32_t self) {
        auto gy = g.grad(self);
        auto gx = g.grad(ix);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < count; ++j) gx[i * c + begin + j] += gy[i * count + j];
    });
}

Var slice_rows(Var x, std::size_t begin, std::size_t count) {
    const Tensor& xv = x.value();
    const std::size_t r = xv.rows(), c = xv.cols();
    if (count == 0 || begin + count > r) throw DimensionError("slice_rows out of range");
    Tensor out({count, c}, std::vector<double>(xv.values().begin() + static_cast<std::ptrdiff_t>(begin * c),
                                               xv.values().begin() + static_cast<std::ptrdiff_t>((begin + count) * c)));
    const std::uint32_t ix = x.id();
    return x.graph().record(std::move(out), {ix}, [ix, c, begin](Graph& g, std::uint32_t self) {
        auto gy = g.grad(self);
        auto gx = g.grad(ix);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[begin * c + i] += gy[i];
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols of an empty list");
    Graph& g = parts.front().graph();
    const std::size_t r = parts.front().value().rows();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const Var& p : parts) {
        if (&p.graph() != &g) throw Error("operands belong to different graphs");
        if (p.value().rows() != r) throw DimensionError("concat_cols: row count mismatch");
        widths.push_back(p.value().cols());
        total += widths.back();
    }
    Tensor out({r, total});
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& pv = parts[k].value();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + off + j] = pv[i * widths[k] + j];
        off += widths[k];
    }
    std::vector<std::uint32_t> ids;
    for (const Var& p : parts) ids.push_back(p.id());
    return g.record(std::move(out), ids, [ids, widths, r, total](Graph& g, std::uint32_t self) {
        auto gy = g.grad(self);
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (g.requires_grad(ids[k])) {
                auto gp = g.grad(ids[k]);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < widths[k]; ++j) gp[i * widths[k] + j] += gy[i * total + off + j];
            }
            off += widths[k];
        }
    });
}

Var rms_norm(Var x, Var gain, double eps) {
    Graph& g = graph_of(x, gain);
    const Tensor& xv = x.value();
    const Tensor& gv = gain.value();
    const std::size_t r = xv.rows(), c = xv.cols();
    if (gv.size() != c) throw DimensionError("rms_norm: gain size mismatch");
    Tensor out({r, c});
    std::vector<double> inv(r);
    for (std::size_t i = 0; i < r; ++i) {
        double ms = 0.0;
        for (std::size_t j = 0; j < c; ++j) ms += xv[i * c + j] * xv[i * c + j];
        ms /= static_cast<double>(c);
        inv[i] = 1.0 / std::sqrt(ms + eps);
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] * inv[i] * gv[j];
    }
    const std::uint32_t ix = x.id(), ig = gain.id();
    return g.record(std::move(out), {ix, ig}, [ix, ig, r, c, inv = std::move(inv)](Graph& g, std::uint32_t self) {
        auto gy = g.grad(self);
        const Tensor& xv = g.value(ix);
        const Tensor& gv = g.value(ig);
        if (g.requires_grad(ig)) {
            auto gg = g.grad(ig);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gg[j] += gy[i * c + j] * xv[i * c + j] * inv[i];
        }
        if (g.requires_grad(ix)) {
            auto gx = g.grad(ix);
            for (std::size_t i = 0; i < r; ++i) {
                // y_j = x_j * s * w_j with s = (mean(x^2)+eps)^-1/2
                // dx_j = s * w_j * gy_j - x_j * s^3 / c * sum_k gy_k w_k x_k
                double dot = 0.0;
                for (std::size_t k = 0; k < c; ++k) dot += gy[i * c + k] * gv[k] * xv[i * c + k];
                const double s = inv[i];
                const double coef = s * s * s * dot / static_cast<double>(c);
                for (std::size_t j = 0; j < c; ++j)
                    gx[i * c + j] += s * gv[j] * gy[i * c + j] - xv[i * c + j] * coef;
            }
        }
    });
}

Var cross_entropy(Var logits, std::span<const int> targets) {
    const Tensor& lv = logits.value();
    const std::size_t r = lv.rows(), c = lv.cols();
    if (targets.size() != r) throw DimensionError("cross_entropy: one target per row required");
    std::vector<int> tgt(targets.begin(), targets.end());
    std::size_t active = 0;
    for (int t : tgt) {
        if (t < 0) continue;
        if (static_cast<std::size_t>(t) >= c) throw VocabularyError("cross_entropy target out of range");
        ++active;
    }
    if (active == 0) throw DegenerateError("cross_entropy: every row is ignored");
    std::vector<double> probs(r * c);
    kernel::softmax_rows(lv.values(), probs, r, c);
    double loss = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
        if (tgt[i] < 0) continue;
        const double* row = lv.values().data() + i * c;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
        loss += (mx + std::log(s)) - row[tgt[i]];
    }
    const double inv_active = 1.0 / static_cast<double>(active);
    const std::uint32_t il = logits.id();
    return logits.graph().record(
        Tensor::scalar(loss * inv_active), {il},
        [il, r, c, inv_active, tgt = std::move(tgt), p = std::move(probs)](Graph& g, std::uint32_t self) {
            const double gy = g.grad(self)[0] * inv_active;
            auto gl = g.grad(il);
            for (std::size_t i = 0; i < r; ++i) {
                if (tgt[i] < 0) continue;
                for (std::size_t j = 0; j < c; ++j) gl[i * c + j] += gy * p[i * c + j];
                gl[i * c + static_cast<std::size_t>(tgt[i])] -= gy;
            }
        });
}

Var unary(Var x, const UnaryEval& eval) {
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    std::vector<double> d(xv.size());
    eval(xv.values(), out.values(), d);
    return elementwise(x, std::move(out), std::move(d));
}

} // namespace rectattn::op
