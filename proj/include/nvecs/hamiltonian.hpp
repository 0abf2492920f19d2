#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "nvecs/tensor_core.hpp"

namespace nvecs {

// One harmonic component: op * exp(i * frequency * t).
struct HamiltonianTerm {
    Operator op;
    double frequency = 0.0;
};

// H(t) = constant + sum_k exp(i w_k t) op_k. Builders pair every term with
// its adjoint at -w_k so H(t) is Hermitian at all t.
class Hamiltonian {
public:
    Hamiltonian() = default;
    explicit Hamiltonian(Operator constant) : constant_(std::move(constant)) {}

    Hamiltonian& add_term(Operator op, double frequency) {
        require_same_signature(constant_.signature(), op.signature(), "Hamiltonian::add_term");
        terms_.push_back({std::move(op), frequency});
        return *this;
    }

    Hamiltonian& operator+=(const Hamiltonian& other) {
        constant_ += other.constant_;
        for (const auto& t : other.terms_) add_term(t.op, t.frequency);
        return *this;
    }

    const SpaceSignature& signature() const noexcept { return constant_.signature(); }
    const Operator& constant() const noexcept { return constant_; }
    const std::vector<HamiltonianTerm>& terms() const noexcept { return terms_; }
    bool is_static() const noexcept { return terms_.empty(); }

    double max_frequency() const {
        double w = 0.0;
        for (const auto& t : terms_) w = std::max(w, std::abs(t.frequency));
        return w;
    }

    Operator at(double t) const {
        Operator h = constant_;
        for (const auto& term : terms_) h += term.op * std::exp(kI * term.frequency * t);
        return h;
    }

private:
    Operator constant_;
    std::vector<HamiltonianTerm> terms_;
};

// Lindblad jump operator sqrt(rate) * op.
struct CollapseOp {
    std::string name;
    Operator op;
    double rate = 0.0;
};

}  // namespace nvecs
