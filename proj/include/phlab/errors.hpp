#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace phlab {

/// Shape or wiring mistake: mismatched dimensions, foreign tape handles,
/// gradient sinks too small for the parameters they receive.
class StructuralError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Ground-truth or rollout integration produced a non-finite state.
class SimulationDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Newton iteration of an implicit rollout step did not converge.
class StepFailure : public std::runtime_error {
public:
    StepFailure(std::size_t step, const std::string& what)
        : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

/// Non-finite training loss.
class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(std::size_t epoch, const std::string& what)
        : std::runtime_error(what + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}

    std::size_t epoch() const noexcept { return epoch_; }

private:
    std::size_t epoch_;
};

class PlanningError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace phlab
