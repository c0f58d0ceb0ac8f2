#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <random>
#include <string>

#include "phlab/diffcore.hpp"
#include "phlab/errors.hpp"
#include "phlab/param_vector.hpp"

namespace phlab {

/// Dense network d -> h -> h -> m with tanh on the first hidden layer, relu on
/// the second, and a linear output:
///
///     y = W3 relu(W2 tanh(W1 x + b1) + b2) + b3
///
/// Weights are plain members; training goes through ParamVector via
/// flatten_into / unflatten_from (order W1 b1 W2 b2 W3 b3, column-major).
class ScalarNet {
public:
    using Matrix = Eigen::MatrixXd;
    using Vector = Eigen::VectorXd;
    using Index = Eigen::Index;

    ScalarNet() = default;

    ScalarNet(Index input_dim, Index output_dim, Index hidden = 100)
        : W1(Matrix::Zero(hidden, input_dim)), b1(Vector::Zero(hidden)),
          W2(Matrix::Zero(hidden, hidden)), b2(Vector::Zero(hidden)),
          W3(Matrix::Zero(output_dim, hidden)), b3(Vector::Zero(output_dim)) {
        if (input_dim <= 0 || output_dim <= 0 || hidden <= 0)
            throw StructuralError("ScalarNet: dimensions must be positive");
    }

    Index input_dim() const noexcept { return W1.cols(); }
    Index output_dim() const noexcept { return W3.rows(); }
    Index hidden() const noexcept { return W1.rows(); }

    Index param_count() const noexcept {
        return W1.size() + b1.size() + W2.size() + b2.size() + W3.size() + b3.size();
    }

    /// Glorot-uniform weights, zero biases.
    template <class Rng>
    void initialize(Rng& rng) {
        auto fill = [&rng](Matrix& w) {
            const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
            std::uniform_real_distribution<double> u(-limit, limit);
            for (Index j = 0; j < w.cols(); ++j)
                for (Index i = 0; i < w.rows(); ++i)
                    w(i, j) = u(rng);
        };
        fill(W1);
        fill(W2);
        fill(W3);
        b1.setZero();
        b2.setZero();
        b3.setZero();
    }

    Vector forward(const Vector& x) const {
        check_input(x);
        const Vector a1 = (W1 * x + b1).array().tanh().matrix();
        const Vector a2 = (W2 * a1 + b2).cwiseMax(0.0);
        return W3 * a2 + b3;
    }

    /// Exact input gradient of a scalar-output net:
    /// W1ᵀ diag(1 - tanh²(z1)) W2ᵀ diag(relu'(z2)) W3ᵀ, relu'(0) = 0.
    Vector grad_input(const Vector& x) const {
        if (output_dim() != 1)
            throw StructuralError("grad_input requires a scalar-output network");
        check_input(x);
        const Vector a1 = (W1 * x + b1).array().tanh().matrix();
        const Vector z2 = W2 * a1 + b2;
        const Vector d2 = (z2.array() > 0.0).select(W3.row(0).transpose(), 0.0);
        const Vector d1 = (W2.transpose() * d2).cwiseProduct((1.0 - a1.array().square()).matrix());
        return W1.transpose() * d1;
    }

    void flatten_into(Eigen::Ref<Vector> out) const {
        if (out.size() != param_count())
            throw StructuralError("ScalarNet::flatten_into: size mismatch");
        Index k = 0;
        auto put = [&](const auto& m) {
            out.segment(k, m.size()) = Eigen::Map<const Vector>(m.data(), m.size());
            k += m.size();
        };
        put(W1);
        put(b1);
        put(W2);
        put(b2);
        put(W3);
        put(b3);
    }

    void unflatten_from(const Eigen::Ref<const Vector>& in) {
        if (in.size() != param_count())
            throw StructuralError("ScalarNet::unflatten_from: size mismatch");
        Index k = 0;
        auto take = [&](auto& m) {
            Eigen::Map<Vector>(m.data(), m.size()) = in.segment(k, m.size());
            k += m.size();
        };
        take(W1);
        take(b1);
        take(W2);
        take(b2);
        take(W3);
        take(b3);
    }

    /// The net's weights as tape leaves. With a sink offset the leaves are
    /// trainable (their gradients land at the flatten_into positions);
    /// without one they are constants.
    struct Bound {
        ad::Var W1, b1, W2, b2, W3, b3;
    };

    Bound bind(ad::Tape& tape, Index sink_offset = -1) const {
        Bound b;
        if (sink_offset < 0) {
            b.W1 = tape.constant(W1);
            b.b1 = tape.constant(b1);
            b.W2 = tape.constant(W2);
            b.b2 = tape.constant(b2);
            b.W3 = tape.constant(W3);
            b.b3 = tape.constant(b3);
            return b;
        }
        Index k = sink_offset;
        auto leaf = [&](const Matrix& m) {
            ad::Var v = tape.leaf(m, k);
            k += m.size();
            return v;
        };
        b.W1 = leaf(W1);
        b.b1 = leaf(b1);
        b.W2 = leaf(W2);
        b.b2 = leaf(b2);
        b.W3 = leaf(W3);
        b.b3 = leaf(b3);
        return b;
    }

    /// Batched forward: x is input_dim x B.
    static ad::Var forward(const Bound& n, ad::Var x) {
        using namespace ad;
        const Var a1 = ad::tanh(add_bias(matmul(n.W1, x), n.b1));
        const Var a2 = relu(add_bias(matmul(n.W2, a1), n.b2));
        return add_bias(matmul(n.W3, a2), n.b3);
    }

    /// Batched input gradient written as an explicit expression (the
    /// "gradient network"), so ordinary reverse mode differentiates it with
    /// respect to both weights and x. The relu derivative enters as a
    /// constant mask.
    static ad::Var grad_input(const Bound& n, ad::Var x) {
        using namespace ad;
        if (n.W3.rows() != 1)
            throw StructuralError("grad_input requires a scalar-output network");
        const Var a1 = ad::tanh(add_bias(matmul(n.W1, x), n.b1));
        const Var z2 = add_bias(matmul(n.W2, a1), n.b2);
        const Var d2 = scale_rows(relu_mask(z2), transpose(n.W3));
        const Var dtanh = 1.0 - square(a1);
        const Var d1 = hadamard(matmul_tn(n.W2, d2), dtanh);
        return matmul_tn(n.W1, d1);
    }

    Matrix W1;
    Vector b1;
    Matrix W2;
    Vector b2;
    Matrix W3;
    Vector b3;

private:
    void check_input(const Vector& x) const {
        if (x.size() != input_dim())
            throw StructuralError("ScalarNet: input has " + std::to_string(x.size()) +
                                  " entries, expected " + std::to_string(input_dim()));
    }
};

} // namespace phlab
