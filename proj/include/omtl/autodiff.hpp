#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "omtl/errors.hpp"
#include "omtl/rng.hpp"
#include "omtl/tensor.hpp"

namespace omtl {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = std::numeric_limits<std::size_t>::max();

    bool valid() const { return tape != nullptr; }
    const DenseTensor& value() const;
    Shape shape() const { return value().shape(); }
};

using Gradients = std::map<std::string, DenseTensor>;

/// Reverse-mode recording of primitive operations.
///
/// Every primitive appends one node holding its output value and a closure
/// that pushes the node's gradient into its inputs. backward() replays the
/// closures in strict reverse recording order. A tape can be replayed once.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(DenseTensor value) { return push(std::move(value), false, {}); }

    /// Leaf bound to a named parameter. Repeated requests for the same name
    /// return the same leaf so gradient contributions accumulate.
    Var parameter(const std::string& name, const DenseTensor& value) {
        if (auto it = param_ids_.find(name); it != param_ids_.end()) return Var{this, it->second};
        Var v = push(value, true, {});
        param_ids_.emplace(name, v.id);
        return v;
    }

    Var record(DenseTensor value, std::span<const Var> inputs, BackwardFn backward) {
        bool needs = false;
        for (const Var& in : inputs) {
            if (in.tape != this) throw ValidationError("tape: input recorded on a different tape");
            needs = needs || nodes_[in.id].requires_grad;
        }
        if (!value.all_finite()) throw NumericalError("tape: primitive produced a non-finite value");
        return push(std::move(value), needs, needs ? std::move(backward) : BackwardFn{});
    }

    const DenseTensor& value(Var v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    /// Gradient buffer of a node, allocated on first use. Only valid while
    /// backward() is running.
    DenseTensor& grad(std::size_t id) {
        Node& n = nodes_[id];
        if (n.grad.size() != n.value.size()) n.grad = DenseTensor(n.value.rows(), n.value.cols());
        return n.grad;
    }
    bool wants_grad(Var v) const { return nodes_[v.id].requires_grad; }

    /// d(loss)/d(parameter) for every parameter leaf on this tape.
    Gradients backward(Var loss) {
        if (loss.tape != this) throw ValidationError("backward: loss was recorded on a different tape");
        if (consumed_) throw ValidationError("backward: tape already consumed");
        if (value(loss).shape() != Shape{1, 1}) {
            throw ShapeError("backward: loss must be a 1x1 scalar, got " + value(loss).shape().str());
        }
        consumed_ = true;
        for (std::size_t id = 0; id <= loss.id; ++id) {
            if (nodes_[id].requires_grad) grad(id);
        }
        grad(loss.id)[0] = 1.0;
        for (std::size_t id = loss.id + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (n.backward) n.backward(*this, id);
        }
        Gradients out;
        for (const auto& [name, id] : param_ids_) {
            Node& n = nodes_[id];
            out.emplace(name, id <= loss.id ? n.grad : DenseTensor(n.value.rows(), n.value.cols()));
        }
        return out;
    }

private:
    struct Node {
        DenseTensor value;
        DenseTensor grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    Var push(DenseTensor value, bool requires_grad, BackwardFn backward) {
        nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(backward)});
        return Var{this, nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
    std::unordered_map<std::string, std::size_t> param_ids_;
    bool consumed_ = false;
};

inline const DenseTensor& Var::value() const { return tape->value(*this); }

namespace ops {

namespace detail {

inline Tape& tape_of(Var v, const char* primitive) {
    if (!v.valid()) throw ValidationError(std::string(primitive) + ": uninitialized variable");
    return *v.tape;
}

template <typename F>
DenseTensor map(const DenseTensor& x, F f) {
    DenseTensor out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
    return out;
}

inline double stable_sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

inline double stable_softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

/// Elementwise op whose derivative depends only on the input value.
template <typename F, typename DF>
Var unary(Var x, const char* name, F f, DF df) {
    Tape& t = tape_of(x, name);
    const Var inputs[] = {x};
    return t.record(map(x.value(), f), inputs, [x, df](Tape& tp, std::size_t self) {
        const DenseTensor& in = tp.value(x);
        const DenseTensor& g = tp.grad(self);
        DenseTensor& gx = tp.grad(x.id);
        for (std::size_t i = 0; i < in.size(); ++i) gx[i] += g[i] * df(in[i]);
    });
}

}  // namespace detail

/// x (m x k) times w (k x n).
inline Var matmul(Var a, Var b) {
    Tape& t = detail::tape_of(a, "matmul");
    const DenseTensor& A = a.value();
    const DenseTensor& B = b.value();
    require_shape(A.cols() == B.rows(), "matmul", A.shape(), B.shape());
    const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
    DenseTensor out(m, n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A(i, p);
            for (std::size_t j = 0; j < n; ++j) out(i, j) += av * B(p, j);
        }
    }
    const Var inputs[] = {a, b};
    return t.record(std::move(out), inputs, [a, b, m, k, n](Tape& tp, std::size_t self) {
        const DenseTensor& g = tp.grad(self);
        if (tp.wants_grad(a)) {
            const DenseTensor& Bv = tp.value(b);
            DenseTensor& ga = tp.grad(a.id);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += g(i, j) * Bv(p, j);
                    ga(i, p) += s;
                }
        }
        if (tp.wants_grad(b)) {
            const DenseTensor& Av = tp.value(a);
            DenseTensor& gb = tp.grad(b.id);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = Av(i, p);
                    for (std::size_t j = 0; j < n; ++j) gb(p, j) += av * g(i, j);
                }
        }
    });
}

/// Adds a 1 x n bias row to every row of an m x n input.
inline Var add_bias(Var x, Var bias) {
    Tape& t = detail::tape_of(x, "add_bias");
    const DenseTensor& X = x.value();
    const DenseTensor& b = bias.value();
    require_shape(b.rows() == 1 && b.cols() == X.cols(), "add_bias", X.shape(), b.shape());
    DenseTensor out = X;
    for (std::size_t i = 0; i < X.rows(); ++i)
        for (std::size_t j = 0; j < X.cols(); ++j) out(i, j) += b[j];
    const Var inputs[] = {x, bias};
    return t.record(std::move(out), inputs, [x, bias](Tape& tp, std::size_t self) {
        const DenseTensor& g = tp.grad(self);
        if (tp.wants_grad(x)) {
            DenseTensor& gx = tp.grad(x.id);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (tp.wants_grad(bias)) {
            DenseTensor& gb = tp.grad(bias.id);
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < g.cols(); ++j) gb[j] += g(i, j);
        }
    });
}

/// x W + b, the one-layer block used throughout the model.
inline Var affine(Var x, Var w, Var b) { return add_bias(matmul(x, w), b); }

inline Var add(Var a, Var b) {
    Tape& t = detail::tape_of(a, "add");
    const DenseTensor& A = a.value();
    const DenseTensor& B = b.value();
    require_shape(A.shape() == B.shape(), "add", A.shape(), B.shape());
    DenseTensor out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
    const Var inputs[] = {a, b};
    return t.record(std::move(out), inputs, [a, b](Tape& tp, std::size_t self) {
        const DenseTensor& g = tp.grad(self);
        for (Var v : {a, b}) {
            if (!tp.wants_grad(v)) continue;
            DenseTensor& gv = tp.grad(v.id);
            for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
        }
    });
}

/// Elementwise sum of one or more equally shaped inputs.
inline Var sum(std::span<const Var> terms) {
    if (terms.empty()) throw ValidationError("sum: no terms");
    Tape& t = detail::tape_of(terms[0], "sum");
    DenseTensor out = terms[0].value();
    for (std::size_t k = 1; k < terms.size(); ++k) {
        const DenseTensor& v = terms[k].value();
        require_shape(v.shape() == out.shape(), "sum", out.shape(), v.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
    }
    std::vector<Var> captured(terms.begin(), terms.end());
    return t.record(std::move(out), terms, [captured](Tape& tp, std::size_t self) {
        const DenseTensor& g = tp.grad(self);
        for (Var v : captured) {
            if (!tp.wants_grad(v)) continue;
            DenseTensor& gv = tp.grad(v.id);
            for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
        }
    });
}

inline Var scale(Var x, double c) {
    Tape& t = detail::tape_of(x, "scale");
    const Var inputs[] = {x};
    return t.record(detail::map(x.value(), [c](double v) { return c * v; }), inputs,
                    [x, c](Tape& tp, std::size_t self) {
                        const DenseTensor& g = tp.grad(self);
                        DenseTensor& gx = tp.grad(x.id);
                        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
                    });
}

inline Var leaky_relu(Var x, double slope = 0.01) {
    return detail::unary(
        x, "leaky_relu", [slope](double v) { return v > 0 ? v : slope * v; },
        [slope](double v) { return v > 0 ? 1.0 : slope; });
}

inline Var relu(Var x) {
    return detail::unary(
        x, "relu", [](double v) { return v > 0 ? v : 0.0; }, [](double v) { return v > 0 ? 1.0 : 0.0; });
}

inline Var softplus(Var x) {
    return detail::unary(x, "softplus", detail::stable_softplus, detail::stable_sigmoid);
}

inline Var sigmoid(Var x) {
    return detail::unary(x, "sigmoid", detail::stable_sigmoid, [](double v) {
        const double s = detail::stable_sigmoid(v);
        return s * (1.0 - s);
    });
}

/// Softmax over each row.
inline Var softmax(Var x) {
    Tape& t = detail::tape_of(x, "softmax");
    const DenseTensor& X = x.value();
    DenseTensor out(X.rows(), X.cols());
    for (std::size_t i = 0; i < X.rows(); ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < X.cols(); ++j) mx = std::max(mx, X(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < X.cols(); ++j) {
            out(i, j) = std::exp(X(i, j) - mx);
            z += out(i, j);
        }
        for (std::size_t j = 0; j < X.cols(); ++j) out(i, j) /= z;
    }
    const Var inputs[] = {x};
    return t.record(std::move(out), inputs, [x](Tape& tp, std::size_t self) {
        const DenseTensor& g = tp.grad(self);
        const DenseTensor& y = tp.value(Var{&tp, self});
        DenseTensor& gx = tp.grad(x.id);
        for (std::size_t i = 0; i < y.rows(); ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
            for (std::size_t j = 0; j < y.cols(); ++j) gx(i, j) += y(i, j) * (g(i, j) - dot);
        }
    });
}

/// Inverted dropout. Identity when !train or rate == 0.
inline Var dropout(Var x, double rate, Rng& rng, bool train) {
    if (!train || rate <= 0.0) return x;
    if (rate >= 1.0) throw ValidationError("dropout: rate must be below 1");
    Tape& t = detail::tape_of(x, "dropout");
    const DenseTensor& X = x.value();
    const double keep_scale = 1.0 / (1.0 - rate);
    DenseTensor mask(X.rows(), X.cols());
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = rng.uniform() < rate ? 0.0 : keep_scale;
    DenseTensor out = X;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    const Var inputs[] = {x};
    return t.record(std::move(out), inputs, [x, mask = std::move(mask)](Tape& tp, std::size_t self) {
        const DenseTensor& g = tp.grad(self);
        DenseTensor& gx = tp.grad(x.id);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
}

/// Horizontal concatenation of equally tall inputs.
inline Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ValidationError("concat_cols: no inputs");
    Tape& t = detail::tape_of(parts[0], "concat_cols");
    const std::size_t rows = parts[0].value().rows();
    std::size_t cols = 0;
    for (const Var& p : parts) {
        require_shape(p.value().rows() == rows, "concat_cols", parts[0].shape(), p.shape());
        cols += p.value().cols();
    }
    DenseTensor out(rows, cols);
    std::size_t offset = 0;
    for (const Var& p : parts) {
        const DenseTensor& v = p.value();
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < v.cols(); ++j) out(i, offset + j) = v(i, j);
        offset += v.cols();
    }
    std::vector<Var> captured(parts.begin(), parts.end());
    return t.record(std::move(out), parts, [captured](Tape& tp, std::size_t self) {
        const DenseTensor& g = tp.grad(self);
        std::size_t off = 0;
        for (Var p : captured) {
            const std::size_t c = tp.value(p).cols();
            if (tp.wants_grad(p)) {
                DenseTensor& gp = tp.grad(p.id);
                for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < c; ++j) gp(i, j) += g(i, off + j);
            }
            off += c;
        }
    });
}

/// Selected rows, in the given order.
inline Var gather_rows(Var x, std::vector<std::size_t> rows) {
    Tape& t = detail::tape_of(x, "gather_rows");
    const DenseTensor& X = x.value();
    DenseTensor out(rows.size(), X.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= X.rows()) require_shape(false, "gather_rows", X.shape(), Shape{rows[r], X.cols()});
        for (std::size_t j = 0; j < X.cols(); ++j) out(r, j) = X(rows[r], j);
    }
    const Var inputs[] = {x};
    return t.record(std::move(out), inputs, [x, rows = std::move(rows)](Tape& tp, std::size_t self) {
        const DenseTensor& g = tp.grad(self);
        DenseTensor& gx = tp.grad(x.id);
        for (std::size_t r = 0; r < rows.size(); ++r)
            for (std::size_t j = 0; j < g.cols(); ++j) gx(rows[r], j) += g(r, j);
    });
}

/// Column j as an m x 1 tensor.
inline Var column(Var x, std::size_t j) {
    Tape& t = detail::tape_of(x, "column");
    const DenseTensor& X = x.value();
    if (j >= X.cols()) require_shape(false, "column", X.shape(), Shape{X.rows(), j + 1});
    DenseTensor out(X.rows(), 1);
    for (std::size_t i = 0; i < X.rows(); ++i) out[i] = X(i, j);
    const Var inputs[] = {x};
    return t.record(std::move(out), inputs, [x, j](Tape& tp, std::size_t self) {
        const DenseTensor& g = tp.grad(self);
        DenseTensor& gx = tp.grad(x.id);
        for (std::size_t i = 0; i < g.rows(); ++i) gx(i, j) += g[i];
    });
}

/// Multiplies row i of x (m x n) by s(i, 0) (s is m x 1).
inline Var scale_rows(Var x, Var s) {
    Tape& t = detail::tape_of(x, "scale_rows");
    const DenseTensor& X = x.value();
    const DenseTensor& S = s.value();
    require_shape(S.cols() == 1 && S.rows() == X.rows(), "scale_rows", X.shape(), S.shape());
    DenseTensor out = X;
    for (std::size_t i = 0; i < X.rows(); ++i)
        for (std::size_t j = 0; j < X.cols(); ++j) out(i, j) *= S[i];
    const Var inputs[] = {x, s};
    return t.record(std::move(out), inputs, [x, s](Tape& tp, std::size_t self) {
        const DenseTensor& g = tp.grad(self);
        const DenseTensor& Xv = tp.value(x);
        const DenseTensor& Sv = tp.value(s);
        if (tp.wants_grad(x)) {
            DenseTensor& gx = tp.grad(x.id);
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < g.cols(); ++j) gx(i, j) += g(i, j) * Sv[i];
        }
        if (tp.wants_grad(s)) {
            DenseTensor& gs = tp.grad(s.id);
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < g.cols(); ++j) gs[i] += g(i, j) * Xv(i, j);
        }
    });
}

inline Var sum_all(Var x) {
    Tape& t = detail::tape_of(x, "sum_all");
    double s = 0.0;
    for (double v : x.value().data()) s += v;
    const Var inputs[] = {x};
    return t.record(DenseTensor::scalar(s), inputs, [x](Tape& tp, std::size_t self) {
        const double g = tp.grad(self)[0];
        DenseTensor& gx = tp.grad(x.id);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
}

inline Var mean_all(Var x) {
    const std::size_t n = x.value().size();
    if (n == 0) throw ShapeError("mean_all: empty tensor");
    return scale(sum_all(x), 1.0 / static_cast<double>(n));
}

/// Sum over all entries of (x - target)^2; target is a constant.
inline Var squared_error(Var x, const DenseTensor& target) {
    Tape& t = detail::tape_of(x, "squared_error");
    const DenseTensor& X = x.value();
    require_shape(X.shape() == target.shape(), "squared_error", X.shape(), target.shape());
    double s = 0.0;
    for (std::size_t i = 0; i < X.size(); ++i) {
        const double r = X[i] - target[i];
        s += r * r;
    }
    const Var inputs[] = {x};
    return t.record(DenseTensor::scalar(s), inputs, [x, target](Tape& tp, std::size_t self) {
        const double g = tp.grad(self)[0];
        const DenseTensor& Xv = tp.value(x);
        DenseTensor& gx = tp.grad(x.id);
        for (std::size_t i = 0; i < Xv.size(); ++i) gx[i] += 2.0 * g * (Xv[i] - target[i]);
    });
}

/// Binary cross-entropy of sigmoid(logit) against a 0/1 label.
inline double bce_from_logit(double logit, double label) {
    return std::max(logit, 0.0) - logit * label + std::log1p(std::exp(-std::abs(logit)));
}

/// Weighted sum of binary cross-entropies computed from logits (m x 1).
inline Var bce_with_logits(Var logits, std::vector<double> labels, std::vector<double> weights) {
    Tape& t = detail::tape_of(logits, "bce_with_logits");
    const DenseTensor& Z = logits.value();
    require_shape(Z.cols() == 1 && Z.rows() == labels.size() && labels.size() == weights.size(), "bce_with_logits",
                  Z.shape(), Shape{labels.size(), 1});
    double s = 0.0;
    for (std::size_t i = 0; i < Z.rows(); ++i) s += weights[i] * bce_from_logit(Z[i], labels[i]);
    const Var inputs[] = {logits};
    return t.record(DenseTensor::scalar(s), inputs,
                    [logits, labels = std::move(labels), weights = std::move(weights)](Tape& tp, std::size_t self) {
                        const double g = tp.grad(self)[0];
                        const DenseTensor& Zv = tp.value(logits);
                        DenseTensor& gz = tp.grad(logits.id);
                        for (std::size_t i = 0; i < Zv.size(); ++i)
                            gz[i] += g * weights[i] * (detail::stable_sigmoid(Zv[i]) - labels[i]);
                    });
}

}  // namespace ops
}  // namespace omtl
