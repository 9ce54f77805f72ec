#include "miaod/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <string>

namespace miaod::ad {

namespace {

using MatMap = Eigen::Map<
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic,
                                                   Eigen::Dynamic, Eigen::RowMajor>>;

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw contract_error(msg);
}

Tape* pick_tape(std::initializer_list<const Tensor*> ins) {
    Tape* t = nullptr;
    for (const Tensor* in : ins) {
        if (in->tape() == nullptr) continue;
        if (t == nullptr) t = in->tape();
        else if (t != in->tape())
            throw contract_error("operands recorded on different tapes");
    }
    return t;
}

bool any_requires_grad(std::initializer_list<const Tensor*> ins) {
    for (const Tensor* in : ins)
        if (in->requires_grad()) return true;
    return false;
}

void check_finite(const Tensor& t, const char* op) {
    for (double v : t.data())
        if (!std::isfinite(v))
            throw numeric_fault(std::string("non-finite output in operator ") + op);
}

}  // namespace

Tensor make_op_output(Tape* tape, bool requires_grad, Shape shape);

// -- Tensor -----------------------------------------------------------------

Tensor Tensor::make(Shape shape, std::vector<double> data, bool requires_grad,
                    Tape* tape) {
    require(shape_numel(shape) == data.size(),
            "tensor data length does not match shape");
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->value = std::move(data);
    t.impl_->requires_grad = requires_grad;
    t.impl_->tape = tape;
    if (requires_grad) t.impl_->grad.assign(t.impl_->value.size(), 0.0);
    return t;
}

Tensor Tensor::leaf(Tape& tape, Shape shape, std::vector<double> data,
                    bool requires_grad) {
    return make(std::move(shape), std::move(data), requires_grad, &tape);
}

Tensor Tensor::constant(Shape shape, std::vector<double> data) {
    return make(std::move(shape), std::move(data), false, nullptr);
}

Tensor Tensor::scalar_const(double v) { return constant({1}, {v}); }

Tensor Tensor::zeros_const(Shape shape) {
    std::vector<double> d(shape_numel(shape), 0.0);
    return make(std::move(shape), std::move(d), false, nullptr);
}

double Tensor::item() const {
    require(impl_ && impl_->value.size() == 1, "item() requires a one-element tensor");
    return impl_->value[0];
}

void Tensor::zero_grad() {
    if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor make_op_output(Tape* tape, bool requires_grad, Shape shape) {
    std::vector<double> d(shape_numel(shape), 0.0);
    return Tensor::make(std::move(shape), std::move(d), requires_grad, tape);
}

// -- Tape -------------------------------------------------------------------

void Tape::record(const char* name, Tensor output, std::function<void()> fn) {
    entries_.push_back(Entry{name, std::move(output), std::move(fn)});
}

void Tape::backward(const Tensor& root) {
    require(root.defined() && root.size() == 1, "backward root must be scalar");
    if (!root.requires_grad() || root.tape() != this)
        throw contract_error("backward root is detached from this tape");
    // Op-output gradients are transient per call; leaf gradients accumulate.
    for (Entry& e : entries_) e.output.zero_grad();
    Tensor r = root;
    r.grad()[0] = 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->fn();
}

// -- op helpers -------------------------------------------------------------

namespace {

struct OpCtx {
    Tape* tape;
    bool req;
    OpCtx(std::initializer_list<const Tensor*> ins)
        : tape(pick_tape(ins)), req(any_requires_grad(ins)) {}
    Tensor out(Shape shape) const {
        return make_op_output(tape, req && tape, shape);
    }
    void rec(const char* name, const Tensor& o, std::function<void()> fn) const {
        if (req && tape) tape->record(name, o, std::move(fn));
    }
};

// Elementwise unary with value map and gradient factor computed from input.
template <typename FwdFn, typename GradFn>
Tensor unary_op(const char* name, const Tensor& a, FwdFn fwd, GradFn gradf) {
    OpCtx ctx{&a};
    Tensor out = ctx.out(a.shape());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = fwd(a.data()[i]);
    check_finite(out, name);
    Tensor ac = a;
    ctx.rec(name, out, [ac, out, gradf, n]() mutable {
        if (!ac.requires_grad()) return;
        for (std::size_t i = 0; i < n; ++i)
            ac.grad()[i] += out.grad()[i] * gradf(ac.data()[i], out.data()[i]);
    });
    return out;
}

}  // namespace

// -- operators --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.shape().size() == 2 && b.shape().size() == 2 && a.cols() == b.rows(),
            "matmul shape mismatch");
    OpCtx ctx{&a, &b};
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = ctx.out({m, n});
    {
        ConstMatMap ma(a.data().data(), m, k), mb(b.data().data(), k, n);
        MatMap mo(out.data().data(), m, n);
        mo.noalias() = ma * mb;
    }
    check_finite(out, "matmul");
    ctx.rec("matmul", out, [a = a, b = b, out, m, k, n]() mutable {
        ConstMatMap go(out.grad().data(), m, n);
        if (a.requires_grad()) {
            ConstMatMap mb(b.data().data(), k, n);
            MatMap ga(a.grad().data(), m, k);
            ga.noalias() += go * mb.transpose();
        }
        if (b.requires_grad()) {
            ConstMatMap ma(a.data().data(), m, k);
            MatMap gb(b.grad().data(), k, n);
            gb.noalias() += ma.transpose() * go;
        }
    });
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    const bool rowcast = a.shape().size() == 2 && b.shape().size() == 2 &&
                         b.rows() == 1 && b.cols() == a.cols() && a.rows() != 1;
    require(rowcast || a.shape() == b.shape(), "add shape mismatch");
    OpCtx ctx{&a, &b};
    Tensor out = ctx.out(a.shape());
    const std::size_t n = a.size(), c = rowcast ? b.size() : 0;
    for (std::size_t i = 0; i < n; ++i)
        out.data()[i] = a.data()[i] + (rowcast ? b.data()[i % c] : b.data()[i]);
    check_finite(out, "add");
    ctx.rec("add", out, [a = a, b = b, out, n, c, rowcast]() mutable {
        if (a.requires_grad())
            for (std::size_t i = 0; i < n; ++i) a.grad()[i] += out.grad()[i];
        if (b.requires_grad()) {
            if (rowcast)
                for (std::size_t i = 0; i < n; ++i) b.grad()[i % c] += out.grad()[i];
            else
                for (std::size_t i = 0; i < n; ++i) b.grad()[i] += out.grad()[i];
        }
    });
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "sub shape mismatch");
    OpCtx ctx{&a, &b};
    Tensor out = ctx.out(a.shape());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    check_finite(out, "sub");
    ctx.rec("sub", out, [a = a, b = b, out, n]() mutable {
        if (a.requires_grad())
            for (std::size_t i = 0; i < n; ++i) a.grad()[i] += out.grad()[i];
        if (b.requires_grad())
            for (std::size_t i = 0; i < n; ++i) b.grad()[i] -= out.grad()[i];
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mul shape mismatch");
    OpCtx ctx{&a, &b};
    Tensor out = ctx.out(a.shape());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    check_finite(out, "mul");
    ctx.rec("mul", out, [a = a, b = b, out, n]() mutable {
        if (a.requires_grad())
            for (std::size_t i = 0; i < n; ++i)
                a.grad()[i] += out.grad()[i] * b.data()[i];
        if (b.requires_grad())
            for (std::size_t i = 0; i < n; ++i)
                b.grad()[i] += out.grad()[i] * a.data()[i];
    });
    return out;
}

Tensor scale(const Tensor& a, double s) {
    return unary_op("scale", a, [s](double x) { return s * x; },
                    [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary_op("add_scalar", a, [s](double x) { return x + s; },
                    [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
    return unary_op("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
                    [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
    auto sig = [](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                        : std::exp(x) / (1.0 + std::exp(x));
    };
    return unary_op("sigmoid", a, sig,
                    [](double, double y) { return y * (1.0 - y); });
}

Tensor log_clamped(const Tensor& a, double eps) {
    return unary_op("log", a,
                    [eps](double x) { return std::log(std::max(x, eps)); },
                    [eps](double x, double) { return x > eps ? 1.0 / x : 0.0; });
}

Tensor abs_val(const Tensor& a) {
    return unary_op("abs", a, [](double x) { return std::fabs(x); },
                    [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor pow_scalar(const Tensor& a, double p) {
    return unary_op("pow", a, [p](double x) { return std::pow(x, p); },
                    [p](double x, double) {
                        if (p == 0.0) return 0.0;
                        if (x <= 0.0 && p < 1.0) return 0.0;
                        return p * std::pow(x, p - 1.0);
                    });
}

Tensor huber(const Tensor& a) {
    return unary_op("huber", a,
                    [](double x) {
                        double ax = std::fabs(x);
                        return ax < 1.0 ? 0.5 * x * x : ax - 0.5;
                    },
                    [](double x, double) { return std::clamp(x, -1.0, 1.0); });
}

Tensor softmax(const Tensor& a, int axis) {
    require(a.shape().size() == 2 && (axis == 0 || axis == 1),
            "softmax needs a 2-D tensor and axis 0 or 1");
    OpCtx ctx{&a};
    const std::size_t m = a.rows(), n = a.cols();
    Tensor out = ctx.out({m, n});
    // slice = row (axis 1) or column (axis 0)
    const std::size_t slices = axis == 1 ? m : n;
    const std::size_t len = axis == 1 ? n : m;
    auto at = [n, axis](std::size_t s, std::size_t j) {
        return axis == 1 ? s * n + j : j * n + s;
    };
    for (std::size_t s = 0; s < slices; ++s) {
        double mx = a.data()[at(s, 0)];
        for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, a.data()[at(s, j)]);
        double z = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
            double e = std::exp(a.data()[at(s, j)] - mx);
            out.data()[at(s, j)] = e;
            z += e;
        }
        for (std::size_t j = 0; j < len; ++j) out.data()[at(s, j)] /= z;
    }
    check_finite(out, "softmax");
    ctx.rec("softmax", out, [a = a, out, slices, len, at]() mutable {
        if (!a.requires_grad()) return;
        for (std::size_t s = 0; s < slices; ++s) {
            double dot = 0.0;
            for (std::size_t j = 0; j < len; ++j)
                dot += out.grad()[at(s, j)] * out.data()[at(s, j)];
            for (std::size_t j = 0; j < len; ++j)
                a.grad()[at(s, j)] +=
                    out.data()[at(s, j)] * (out.grad()[at(s, j)] - dot);
        }
    });
    return out;
}

Tensor sum(const Tensor& a) {
    OpCtx ctx{&a};
    Tensor out = ctx.out({1});
    double s = 0.0;
    for (double v : a.data()) s += v;
    out.data()[0] = s;
    check_finite(out, "sum");
    ctx.rec("sum", out, [a = a, out]() mutable {
        if (!a.requires_grad()) return;
        const double g = out.grad()[0];
        for (double& gv : a.grad()) gv += g;
    });
    return out;
}

Tensor mean(const Tensor& a) {
    require(a.size() > 0, "mean of empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor sum_axis(const Tensor& a, int axis) {
    require(a.shape().size() == 2 && (axis == 0 || axis == 1),
            "sum_axis needs a 2-D tensor and axis 0 or 1");
    OpCtx ctx{&a};
    const std::size_t m = a.rows(), n = a.cols();
    Tensor out = ctx.out(axis == 0 ? Shape{1, n} : Shape{m, 1});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out.data()[axis == 0 ? j : i] += a.data()[i * n + j];
    check_finite(out, "sum_axis");
    ctx.rec("sum_axis", out, [a = a, out, m, n, axis]() mutable {
        if (!a.requires_grad()) return;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                a.grad()[i * n + j] += out.grad()[axis == 0 ? j : i];
    });
    return out;
}

Tensor max_axis(const Tensor& a, int axis) {
    require(a.shape().size() == 2 && (axis == 0 || axis == 1),
            "max_axis needs a 2-D tensor and axis 0 or 1");
    OpCtx ctx{&a};
    const std::size_t m = a.rows(), n = a.cols();
    const std::size_t slices = axis == 1 ? m : n;
    const std::size_t len = axis == 1 ? n : m;
    auto at = [n, axis](std::size_t s, std::size_t j) {
        return axis == 1 ? s * n + j : j * n + s;
    };
    Tensor out = ctx.out(axis == 0 ? Shape{1, n} : Shape{m, 1});
    std::vector<std::size_t> argmax(slices, 0);
    for (std::size_t s = 0; s < slices; ++s) {
        double mx = a.data()[at(s, 0)];
        for (std::size_t j = 1; j < len; ++j)
            if (a.data()[at(s, j)] > mx) { mx = a.data()[at(s, j)]; argmax[s] = j; }
        out.data()[s] = mx;
    }
    check_finite(out, "max_axis");
    ctx.rec("max_axis", out, [a = a, out, slices, argmax, at]() mutable {
        if (!a.requires_grad()) return;
        for (std::size_t s = 0; s < slices; ++s)
            a.grad()[at(s, argmax[s])] += out.grad()[s];
    });
    return out;
}

Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
    require(a.shape().size() == 2, "gather_rows needs a 2-D tensor");
    const std::size_t n = a.cols();
    for (std::size_t r : idx) require(r < a.rows(), "gather_rows index out of range");
    OpCtx ctx{&a};
    Tensor out = ctx.out({idx.size(), n});
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * n), n,
                    out.data().begin() + static_cast<std::ptrdiff_t>(i * n));
    ctx.rec("gather_rows", out, [a = a, out, idx, n]() mutable {
        if (!a.requires_grad()) return;
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < n; ++j)
                a.grad()[idx[i] * n + j] += out.grad()[i * n + j];
    });
    return out;
}

Tensor repeat_rows(const Tensor& a, std::size_t k) {
    require(a.shape().size() == 2 && k >= 1, "repeat_rows needs a 2-D tensor, k >= 1");
    OpCtx ctx{&a};
    const std::size_t m = a.rows(), n = a.cols();
    Tensor out = ctx.out({m * k, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t r = 0; r < k; ++r)
            std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(i * n), n,
                        out.data().begin() +
                            static_cast<std::ptrdiff_t>((i * k + r) * n));
    ctx.rec("repeat_rows", out, [a = a, out, m, n, k]() mutable {
        if (!a.requires_grad()) return;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t r = 0; r < k; ++r)
                for (std::size_t j = 0; j < n; ++j)
                    a.grad()[i * n + j] += out.grad()[(i * k + r) * n + j];
    });
    return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    require(n == a.size(), "reshape must preserve the element count");
    OpCtx ctx{&a};
    Tensor out = ctx.out(shape);
    out.data() = a.data();
    ctx.rec("reshape", out, [a = a, out]() mutable {
        if (!a.requires_grad()) return;
        for (std::size_t i = 0; i < a.size(); ++i) a.grad()[i] += out.grad()[i];
    });
    return out;
}

// -- gradient checking ------------------------------------------------------

GradCheckReport grad_check(
    const std::function<Tensor(Tape&, const std::vector<Tensor>&)>& f,
    const std::vector<std::pair<Shape, std::vector<double>>>& params,
    double step, double tol) {
    require(step > 0.0, "grad_check step must be positive");

    auto eval = [&](const std::vector<std::pair<Shape, std::vector<double>>>& p,
                    bool with_grad, std::vector<std::vector<double>>* grads_out) {
        Tape tape;
        std::vector<Tensor> leaves;
        leaves.reserve(p.size());
        for (const auto& [shape, data] : p)
            leaves.push_back(Tensor::leaf(tape, shape, data, with_grad));
        Tensor out = f(tape, leaves);
        require(out.size() == 1, "grad_check function must return a scalar");
        if (with_grad) {
            tape.backward(out);
            grads_out->clear();
            for (const Tensor& l : leaves) grads_out->push_back(l.grad());
        }
        return out.item();
    };

    std::vector<std::vector<double>> analytic;
    const double base = eval(params, true, &analytic);
    const double base2 = eval(params, false, nullptr);
    if (base != base2)
        throw contract_error("grad_check: function is not deterministic");

    GradCheckReport rep;
    rep.per_param.assign(params.size(), 0.0);
    auto probe = params;
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t e = 0; e < params[p].second.size(); ++e) {
            const double orig = probe[p].second[e];
            probe[p].second[e] = orig + step;
            const double fp = eval(probe, false, nullptr);
            probe[p].second[e] = orig - step;
            const double fm = eval(probe, false, nullptr);
            probe[p].second[e] = orig;
            const double numeric = (fp - fm) / (2.0 * step);
            const double a = analytic[p][e];
            const double err = std::fabs(a - numeric) /
                               std::max({1.0, std::fabs(a), std::fabs(numeric)});
            rep.per_param[p] = std::max(rep.per_param[p], err);
            rep.max_rel_err = std::max(rep.max_rel_err, err);
        }
    }
    rep.pass = rep.max_rel_err <= tol;
    return rep;
}

}  // namespace miaod::ad
