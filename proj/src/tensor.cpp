#include "rectattn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

#include "rectattn/error.hpp"

namespace rectattn {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        if (d == 0) throw DimensionError("shape dimensions must be positive: " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), values_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
    if (shape_numel(shape_) != values_.size()) {
        throw DimensionError("shape " + shape_str(shape_) + " does not match " +
                             std::to_string(values_.size()) + " values");
    }
}

Tensor Tensor::scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

Tensor Tensor::vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> v;
    v.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw DimensionError("ragged matrix literal");
        v.insert(v.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(v));
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) throw DimensionError("axis out of range for " + shape_str(shape_));
    return shape_[axis];
}

std::size_t Tensor::rows() const {
    if (shape_.size() != 2) throw DimensionError("expected matrix, got " + shape_str(shape_));
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (shape_.size() != 2) throw DimensionError("expected matrix, got " + shape_str(shape_));
    return shape_[1];
}

double& Tensor::at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
double Tensor::at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

double Tensor::item() const {
    if (values_.size() != 1) throw DimensionError("item() on non-scalar " + shape_str(shape_));
    return values_[0];
}

std::span<const double> Tensor::grad() const {
    if (!grad_) return {};
    return *grad_;
}

std::span<double> Tensor::mutable_grad() {
    if (!grad_) grad_.emplace(values_.size(), 0.0);
    return *grad_;
}

void Tensor::zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

Tensor Tensor::reshaped(Shape shape) const {
    Tensor t(std::move(shape), values_);
    t.requires_grad_ = requires_grad_;
    return t;
}

bool Tensor::all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DimensionError("max_abs_diff shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

namespace kernel {

void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c,
          std::size_t m, std::size_t k, std::size_t n, bool trans_a, bool trans_b) {
    // Loop orders keep the innermost stride contiguous for each layout.
    if (!trans_a && !trans_b) {
        for (std::size_t i = 0; i < m; ++i) {
            double* ci = c.data() + i * n;
            const double* ai = a.data() + i * k;
            for (std::size_t p = 0; p < k; ++p) {
                const double av = ai[p];
                if (av == 0.0) continue;
                const double* bp = b.data() + p * n;
                for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
            }
        }
    } else if (!trans_a && trans_b) {
        for (std::size_t i = 0; i < m; ++i) {
            const double* ai = a.data() + i * k;
            double* ci = c.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double* bj = b.data() + j * k;
                double s = 0.0;
                for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
                ci[j] += s;
            }
        }
    } else if (trans_a && !trans_b) {
        for (std::size_t p = 0; p < k; ++p) {
            const double* ap = a.data() + p * m;
            const double* bp = b.data() + p * n;
            for (std::size_t i = 0; i < m; ++i) {
                const double av = ap[i];
                if (av == 0.0) continue;
                double* ci = c.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
            }
        }
    } else {
        for (std::size_t i = 0; i < m; ++i) {
            double* ci = c.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * b[j * k + p];
                ci[j] += s;
            }
        }
    }
}

void softmax_rows(std::span<const double> x, std::span<double> y, std::size_t rows,
                  std::size_t cols, std::span<const unsigned char> keep) {
    const bool masked = !keep.empty();
    for (std::size_t i = 0; i < rows; ++i) {
        const double* xi = x.data() + i * cols;
        double* yi = y.data() + i * cols;
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < cols; ++j) {
            if (masked && !keep[i * cols + j]) continue;
            any = true;
            mx = std::max(mx, xi[j]);
        }
        if (!any) throw DegenerateError("softmax row " + std::to_string(i) + " is fully masked");
        // Extended precision keeps the normalizer's rounding out of
        // finite-difference checks on attention weights.
        long double total = 0.0L;
        for (std::size_t j = 0; j < cols; ++j) {
            if (masked && !keep[i * cols + j]) continue;
            total += std::exp(static_cast<long double>(xi[j]) - mx);
        }
        for (std::size_t j = 0; j < cols; ++j) {
            if (masked && !keep[i * cols + j]) {
                yi[j] = 0.0;
                continue;
            }
            yi[j] = static_cast<double>(std::exp(static_cast<long double>(xi[j]) - mx) / total);
        }
    }
}

} // namespace kernel

} // namespace rectattn
