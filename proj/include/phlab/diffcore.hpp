#pragma once

// Reverse-mode differentiation over dense matrix values.
//
// Every node on the tape holds a whole matrix (features x batch), so a
// mini-batch of network evaluations costs a handful of GEMMs instead of one
// node per scalar. Nodes are appended in topological order; backward() walks
// them in reverse. Trainable leaves carry an offset into a flat gradient sink
// (column-major, matching ParamVector layout).

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "phlab/errors.hpp"

namespace phlab::ad {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

class Tape;

/// Handle to a node on a Tape. Cheap to copy.
class Var {
public:
    Var() = default;

    Tape* tape() const noexcept { return tape_; }
    int id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

    const Matrix& value() const;
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }

private:
    friend class Tape;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    int id_ = -1;
};

class Tape {
public:
    using Backward = std::function<void(Tape&, const Matrix&)>;

    Tape() { nodes_.reserve(256); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix value) { return push(std::move(value), false, -1, {}); }

    /// Leaf whose gradient is added into sink[offset, offset + size).
    Var leaf(Matrix value, Index sink_offset) {
        if (sink_offset < 0)
            throw StructuralError("leaf: negative sink offset");
        return push(std::move(value), true, sink_offset, {});
    }

    /// Records an op result. `parents` decide whether the node needs a gradient.
    Var record(Matrix value, std::initializer_list<Var> parents, Backward backward) {
        bool needs = false;
        for (const Var& p : parents) {
            check_owned(p);
            needs = needs || nodes_[static_cast<std::size_t>(p.id())].requires_grad;
        }
        if (!needs)
            backward = nullptr;
        return push(std::move(value), needs, -1, std::move(backward));
    }

    const Matrix& value(Var v) const {
        check_owned(v);
        return nodes_[static_cast<std::size_t>(v.id())].value;
    }

    bool requires_grad(Var v) const {
        return nodes_[static_cast<std::size_t>(v.id())].requires_grad;
    }

    /// Adds `g` into the adjoint of `v` (no-op for constants).
    void accumulate(Var v, const Matrix& g) {
        Node& n = nodes_[static_cast<std::size_t>(v.id())];
        if (!n.requires_grad)
            return;
        if (g.rows() != n.value.rows() || g.cols() != n.value.cols())
            throw StructuralError("adjoint shape mismatch");
        if (!n.has_grad) {
            n.grad = g;
            n.has_grad = true;
        } else {
            n.grad += g;
        }
    }

    /// Reverse sweep seeded with `cotangent` at `out`; leaf adjoints are added
    /// into `sink`. Computes d<cotangent, out>/d(leaves).
    void backward(Var out, const Matrix& cotangent, Eigen::Ref<Vector> sink) {
        check_owned(out);
        for (Node& n : nodes_) {
            n.has_grad = false;
        }
        accumulate(out, cotangent);
        for (int i = out.id(); i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.requires_grad || !n.has_grad)
                continue;
            if (n.sink_offset >= 0) {
                const Index len = n.value.size();
                if (n.sink_offset + len > sink.size())
                    throw StructuralError("leaf references parameters outside the gradient sink");
                sink.segment(n.sink_offset, len) += Eigen::Map<const Vector>(n.grad.data(), len);
            } else if (n.backward) {
                n.backward(*this, n.grad);
            }
        }
    }

    /// Scalar-output convenience.
    void backward(Var out, Eigen::Ref<Vector> sink) {
        if (value(out).size() != 1)
            throw StructuralError("backward without cotangent needs a 1x1 output");
        backward(out, Matrix::Ones(1, 1), sink);
    }

    std::size_t size() const noexcept { return nodes_.size(); }

    /// Handle the next recorded node will receive; lets a backward closure
    /// refer to its own output value.
    Var upcoming() noexcept { return Var(this, static_cast<int>(nodes_.size())); }

    void check_owned(Var v) const {
        if (v.tape() != this || v.id() < 0 || static_cast<std::size_t>(v.id()) >= nodes_.size())
            throw StructuralError("variable does not belong to this tape");
    }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        bool has_grad = false;
        Index sink_offset = -1;
        Backward backward;
    };

    Var push(Matrix value, bool requires_grad, Index sink_offset, Backward backward) {
        nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, false, sink_offset,
                              std::move(backward)});
        return Var(this, static_cast<int>(nodes_.size() - 1));
    }

    std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const {
    if (!tape_)
        throw StructuralError("empty variable");
    return tape_->value(*this);
}

namespace detail {

inline Tape& common_tape(Var a, Var b) {
    if (!a.valid() || a.tape() != b.tape())
        throw StructuralError("operands live on different tapes");
    return *a.tape();
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw StructuralError(std::string(op) + ": shape mismatch");
}

} // namespace detail

inline Var matmul(Var a, Var b) {
    Tape& t = detail::common_tape(a, b);
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    if (av.cols() != bv.rows())
        throw StructuralError("matmul: inner dimension mismatch");
    return t.record(av * bv, {a, b}, [a, b](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(a))
            tp.accumulate(a, g * b.value().transpose());
        if (tp.requires_grad(b))
            tp.accumulate(b, a.value().transpose() * g);
    });
}

/// aᵀ·b without materialising the transpose.
inline Var matmul_tn(Var a, Var b) {
    Tape& t = detail::common_tape(a, b);
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    if (av.rows() != bv.rows())
        throw StructuralError("matmul_tn: inner dimension mismatch");
    return t.record(av.transpose() * bv, {a, b}, [a, b](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(a))
            tp.accumulate(a, b.value() * g.transpose());
        if (tp.requires_grad(b))
            tp.accumulate(b, a.value() * g);
    });
}

inline Var add(Var a, Var b) {
    Tape& t = detail::common_tape(a, b);
    detail::require_same_shape(a.value(), b.value(), "add");
    return t.record(a.value() + b.value(), {a, b}, [a, b](Tape& tp, const Matrix& g) {
        tp.accumulate(a, g);
        tp.accumulate(b, g);
    });
}

inline Var sub(Var a, Var b) {
    Tape& t = detail::common_tape(a, b);
    detail::require_same_shape(a.value(), b.value(), "sub");
    return t.record(a.value() - b.value(), {a, b}, [a, b](Tape& tp, const Matrix& g) {
        tp.accumulate(a, g);
        if (tp.requires_grad(b))
            tp.accumulate(b, -g);
    });
}

inline Var scale(Var a, double s) {
    return a.tape()->record(s * a.value(), {a},
                            [a, s](Tape& tp, const Matrix& g) { tp.accumulate(a, s * g); });
}

inline Var add_scalar(Var a, double s) {
    return a.tape()->record(a.value().array() + s, {a},
                            [a](Tape& tp, const Matrix& g) { tp.accumulate(a, g); });
}

/// x + b broadcast over columns; b is rows x 1.
inline Var add_bias(Var x, Var b) {
    Tape& t = detail::common_tape(x, b);
    const Matrix& bv = b.value();
    if (bv.cols() != 1 || bv.rows() != x.rows())
        throw StructuralError("add_bias: bias must be a column matching rows");
    Matrix out = x.value();
    out.colwise() += bv.col(0);
    return t.record(std::move(out), {x, b}, [x, b](Tape& tp, const Matrix& g) {
        tp.accumulate(x, g);
        if (tp.requires_grad(b))
            tp.accumulate(b, g.rowwise().sum());
    });
}

inline Var hadamard(Var a, Var b) {
    Tape& t = detail::common_tape(a, b);
    detail::require_same_shape(a.value(), b.value(), "hadamard");
    return t.record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(a))
            tp.accumulate(a, g.cwiseProduct(b.value()));
        if (tp.requires_grad(b))
            tp.accumulate(b, g.cwiseProduct(a.value()));
    });
}

/// diag(v)·x, v a column with x.rows() entries.
inline Var scale_rows(Var x, Var v) {
    Tape& t = detail::common_tape(x, v);
    const Matrix& vv = v.value();
    if (vv.cols() != 1 || vv.rows() != x.rows())
        throw StructuralError("scale_rows: scale must be a column matching rows");
    return t.record(vv.col(0).asDiagonal() * x.value(), {x, v}, [x, v](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(x))
            tp.accumulate(x, v.value().col(0).asDiagonal() * g);
        if (tp.requires_grad(v))
            tp.accumulate(v, g.cwiseProduct(x.value()).rowwise().sum());
    });
}

inline Var square(Var a) {
    return a.tape()->record(a.value().array().square().matrix(), {a},
                            [a](Tape& tp, const Matrix& g) {
                                tp.accumulate(a, 2.0 * g.cwiseProduct(a.value()));
                            });
}

inline Var tanh(Var a) {
    Tape& t = *a.tape();
    const Var self = t.upcoming();
    return t.record(a.value().array().tanh().matrix(), {a}, [a, self](Tape& tp, const Matrix& g) {
        tp.accumulate(a, g.cwiseProduct((1.0 - self.value().array().square()).matrix()));
    });
}

inline Var relu(Var a) {
    return a.tape()->record(a.value().cwiseMax(0.0), {a}, [a](Tape& tp, const Matrix& g) {
        tp.accumulate(a, (a.value().array() > 0.0).select(g, 0.0).matrix());
    });
}

/// Indicator of positive entries, treated as constant (relu'(0) = 0).
inline Var relu_mask(Var a) {
    return a.tape()->constant((a.value().array() > 0.0).cast<double>().matrix());
}

inline Var sin(Var a) {
    return a.tape()->record(a.value().array().sin().matrix(), {a}, [a](Tape& tp, const Matrix& g) {
        tp.accumulate(a, g.cwiseProduct(a.value().array().cos().matrix()));
    });
}

inline Var clamp(Var a, double lo, double hi) {
    return a.tape()->record(a.value().cwiseMax(lo).cwiseMin(hi), {a},
                            [a, lo, hi](Tape& tp, const Matrix& g) {
                                const auto& v = a.value().array();
                                tp.accumulate(a, ((v > lo) && (v < hi)).select(g, 0.0).matrix());
                            });
}

inline Var transpose(Var a) {
    return a.tape()->record(a.value().transpose(), {a}, [a](Tape& tp, const Matrix& g) {
        tp.accumulate(a, g.transpose());
    });
}

/// Row-wise stacking [a; b].
inline Var vcat(Var a, Var b) {
    Tape& t = detail::common_tape(a, b);
    if (a.cols() != b.cols())
        throw StructuralError("vcat: column mismatch");
    Matrix out(a.rows() + b.rows(), a.cols());
    out << a.value(), b.value();
    const Index ra = a.rows();
    const Index rb = b.rows();
    return t.record(std::move(out), {a, b}, [a, b, ra, rb](Tape& tp, const Matrix& g) {
        tp.accumulate(a, g.topRows(ra));
        tp.accumulate(b, g.bottomRows(rb));
    });
}

inline Var gather_rows(Var x, std::vector<Index> rows) {
    const Matrix& xv = x.value();
    Matrix out(static_cast<Index>(rows.size()), xv.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= xv.rows())
            throw StructuralError("gather_rows: index out of range");
        out.row(static_cast<Index>(i)) = xv.row(rows[i]);
    }
    return x.tape()->record(std::move(out), {x}, [x, rows = std::move(rows)](Tape& tp, const Matrix& g) {
        Matrix gx = Matrix::Zero(x.rows(), x.cols());
        for (std::size_t i = 0; i < rows.size(); ++i)
            gx.row(rows[i]) += g.row(static_cast<Index>(i));
        tp.accumulate(x, gx);
    });
}

/// Places row i of x at row rows[i] of an otherwise zero `nrows` x cols result.
inline Var scatter_rows(Var x, std::vector<Index> rows, Index nrows) {
    const Matrix& xv = x.value();
    if (static_cast<Index>(rows.size()) != xv.rows())
        throw StructuralError("scatter_rows: index count must equal row count");
    Matrix out = Matrix::Zero(nrows, xv.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= nrows)
            throw StructuralError("scatter_rows: index out of range");
        out.row(rows[i]) = xv.row(static_cast<Index>(i));
    }
    return x.tape()->record(std::move(out), {x}, [x, rows = std::move(rows)](Tape& tp, const Matrix& g) {
        Matrix gx(x.rows(), x.cols());
        for (std::size_t i = 0; i < rows.size(); ++i)
            gx.row(static_cast<Index>(i)) = g.row(rows[i]);
        tp.accumulate(x, gx);
    });
}

inline Var sum_squares(Var a) {
    Matrix out(1, 1);
    out(0, 0) = a.value().squaredNorm();
    return a.tape()->record(std::move(out), {a}, [a](Tape& tp, const Matrix& g) {
        tp.accumulate(a, (2.0 * g(0, 0)) * a.value());
    });
}

/// Entrywise L1 norm; sign(0) = 0.
inline Var sum_abs(Var a) {
    Matrix out(1, 1);
    out(0, 0) = a.value().cwiseAbs().sum();
    return a.tape()->record(std::move(out), {a}, [a](Tape& tp, const Matrix& g) {
        tp.accumulate(a, g(0, 0) * a.value().array().sign().matrix());
    });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator-(Var a) { return scale(a, -1.0); }
inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator+(Var a, double s) { return add_scalar(a, s); }
inline Var operator+(double s, Var a) { return add_scalar(a, s); }
inline Var operator-(Var a, double s) { return add_scalar(a, -s); }
inline Var operator-(double s, Var a) { return add_scalar(scale(a, -1.0), s); }

} // namespace phlab::ad
