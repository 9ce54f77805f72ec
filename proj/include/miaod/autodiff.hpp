#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "miaod/common.hpp"

namespace miaod::ad {

using Shape = std::vector<std::size_t>;

class Tape;

/// Dense 64-bit tensor handle. Copies share storage, so gradients written by
/// backward() are visible through every handle to the same node.
class Tensor {
public:
    Tensor() = default;

    /// Differentiable input attached to a tape. Gradient buffer is allocated
    /// (zeroed) iff requires_grad.
    static Tensor leaf(Tape& tape, Shape shape, std::vector<double> data,
                       bool requires_grad);
    /// Tape-free constant; never receives gradient.
    static Tensor constant(Shape shape, std::vector<double> data);
    static Tensor scalar_const(double v);
    static Tensor zeros_const(Shape shape);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t size() const { return impl_->value.size(); }
    std::size_t rows() const { return impl_->shape.at(0); }
    std::size_t cols() const { return impl_->shape.at(1); }

    const std::vector<double>& data() const { return impl_->value; }
    std::vector<double>& data() { return impl_->value; }
    const std::vector<double>& grad() const { return impl_->grad; }
    std::vector<double>& grad() { return impl_->grad; }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    Tape* tape() const { return impl_ ? impl_->tape : nullptr; }

    /// Value of a one-element tensor.
    double item() const;

    void zero_grad();

private:
    struct Impl {
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;
        bool requires_grad = false;
        Tape* tape = nullptr;
    };
    std::shared_ptr<Impl> impl_;

    static Tensor make(Shape shape, std::vector<double> data, bool requires_grad,
                       Tape* tape);
    friend Tensor make_op_output(Tape* tape, bool requires_grad, Shape shape);
};

/// Linear record of operations. backward() replays the record in exact reverse
/// order; gradients of op outputs are zeroed per call while leaf gradients
/// accumulate across calls.
class Tape {
public:
    void record(const char* name, Tensor output, std::function<void()> fn);
    void backward(const Tensor& root);
    std::size_t num_ops() const { return entries_.size(); }

private:
    struct Entry {
        const char* name;
        Tensor output;
        std::function<void()> fn;
    };
    std::vector<Entry> entries_;
};

// -- operators --------------------------------------------------------------
// All operators are 1-D/2-D dense. Results are recorded on the inputs' tape
// when any input requires gradient; non-finite outputs raise numeric_fault
// carrying the operator name.

Tensor matmul(const Tensor& a, const Tensor& b);
/// Elementwise add; also accepts b of shape {1, n} broadcast over a's rows.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
/// log(max(x, eps)); gradient is 0 in the clamped region.
Tensor log_clamped(const Tensor& a, double eps = 1e-12);
Tensor abs_val(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double p);
/// Elementwise smooth-L1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
Tensor huber(const Tensor& a);
/// 2-D softmax; axis 0 normalizes each column, axis 1 each row.
Tensor softmax(const Tensor& a, int axis);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// 2-D reduction: axis 0 -> {1, n}, axis 1 -> {m, 1}.
Tensor sum_axis(const Tensor& a, int axis);
/// 2-D max reduction with subgradient to the first argmax.
Tensor max_axis(const Tensor& a, int axis);
/// Select rows of a 2-D tensor; backward scatter-adds.
Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx);
/// Repeat every row k consecutive times; backward sums each group.
Tensor repeat_rows(const Tensor& a, std::size_t k);
/// Same elements in row-major order under a new shape; identity gradient.
Tensor reshape(const Tensor& a, Shape shape);

// -- gradient checking ------------------------------------------------------

struct GradCheckReport {
    bool pass = false;
    double max_rel_err = 0.0;
    /// Per-parameter maximum error, aligned with the params argument.
    std::vector<double> per_param;
};

/// Central-difference check of a scalar function of leaf parameters. The
/// function is rebuilt from scratch for every probe; it must be deterministic
/// (checked by double evaluation at the base point, violation raises
/// contract_error). Error metric is |a - n| / max(1, |a|, |n|).
GradCheckReport grad_check(
    const std::function<Tensor(Tape&, const std::vector<Tensor>&)>& f,
    const std::vector<std::pair<Shape, std::vector<double>>>& params,
    double step, double tol);

}  // namespace miaod::ad
