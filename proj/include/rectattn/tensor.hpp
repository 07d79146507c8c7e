#pragma once

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rectattn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array of doubles with an optional gradient buffer.
//
// Tensors are plain values. Autodiff lives in Graph (graph.hpp), which copies
// tensor values into its nodes; `grad` here is the accumulation target used
// by optimizers and by parameter binding.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double v);
    static Tensor vector(std::vector<double> values);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

    const Shape& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t size() const { return values_.size(); }
    std::size_t dim(std::size_t axis) const;
    // Matrix accessors; throw DimensionError when ndim != 2.
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> values() const { return values_; }
    std::span<double> values() { return values_; }
    const std::vector<double>& data() const { return values_; }

    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }
    double& at(std::size_t r, std::size_t c);
    double at(std::size_t r, std::size_t c) const;
    double item() const;

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool on) { requires_grad_ = on; }

    bool has_grad() const { return grad_.has_value(); }
    std::span<const double> grad() const;
    // Allocates a zero gradient on first use.
    std::span<double> mutable_grad();
    void zero_grad();
    void clear_grad() { grad_.reset(); }

    Tensor reshaped(Shape shape) const;
    bool all_finite() const;

private:
    Shape shape_;
    std::vector<double> values_;
    bool requires_grad_ = false;
    std::optional<std::vector<double>> grad_;
};

bool bit_equal(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

// Raw kernels shared by the graph ops and by hand-fused code paths.
namespace kernel {

// c (m x n) += op(a) * op(b) where op is optional transposition.
// a is (m x k) or, if trans_a, stored as (k x m); same for b.
void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c,
          std::size_t m, std::size_t k, std::size_t n, bool trans_a = false,
          bool trans_b = false);

// Row-wise softmax of an (rows x cols) block with optional mask
// (mask[i] != 0 means "keep"). Throws DegenerateError on a fully masked row.
void softmax_rows(std::span<const double> x, std::span<double> y, std::size_t rows,
                  std::size_t cols, std::span<const unsigned char> keep = {});

} // namespace kernel

} // namespace rectattn
