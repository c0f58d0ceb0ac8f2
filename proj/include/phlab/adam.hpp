#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>

#include "phlab/errors.hpp"

namespace phlab {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    Eigen::VectorXd m;
    Eigen::VectorXd v;
    std::int64_t step = 0;

    explicit AdamState(Eigen::Index n = 0) : m(Eigen::VectorXd::Zero(n)), v(Eigen::VectorXd::Zero(n)) {}
};

/// One bias-corrected Adam update of `theta` in place.
inline void adam_step(Eigen::Ref<Eigen::VectorXd> theta, const Eigen::Ref<const Eigen::VectorXd>& grad,
                      AdamState& state, const AdamConfig& cfg = {}) {
    if (grad.size() != theta.size() || state.m.size() != theta.size() || state.v.size() != theta.size())
        throw StructuralError("adam_step: size mismatch");
    ++state.step;
    state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad;
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    theta.array() -= cfg.lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + cfg.eps);
}

} // namespace phlab
