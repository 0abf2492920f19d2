#pragma once

// Physical parameters and Hamiltonian/dissipator builders for the
// coupler-qubit + three-cavity + NV-ensemble system.
//
// Units: angular frequencies in rad/us, times in us, rates in 1/us.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "nvecs/hamiltonian.hpp"
#include "nvecs/tensor_core.hpp"

namespace nvecs {

inline constexpr const char* kCouplerLabel = "A";

// Labels use 1-based block numbers: q1, c1, b1, ...
inline std::string qubit_label(std::size_t block) { return "q" + std::to_string(block + 1); }
inline std::string cavity_label(std::size_t block) { return "c" + std::to_string(block + 1); }
inline std::string nve_label(std::size_t block) { return "b" + std::to_string(block + 1); }

inline double mhz(double nu) { return kTwoPi * nu; }

// Parameters of one cavity block (qubit j, cavity j, NVE j).
struct BlockParams {
    double g_r = 0.0;       // resonant qubit-cavity coupling (step 2)
    double g = 0.0;         // off-resonant qubit-cavity coupling (step 4)
    double g_b = 0.0;       // NVE-cavity coupling
    double Omega_eg = 0.0;  // step-3 Rabi frequency
    double Omega = 0.0;     // step-4 drive Rabi frequency
    double delta_a = 0.0;   // omega_c - omega_eg
    double delta_b = 0.0;   // omega_c - omega_b

    double lambda() const { return 0.25 * g * g_b * (1.0 / delta_a + 1.0 / delta_b); }
    double delta_c() const { return delta_a - delta_b; }
    double stark_shift() const { return g_b * g_b / delta_b; }
    double Delta() const { return delta_c() - stark_shift(); }

    friend bool operator==(const BlockParams&, const BlockParams&) = default;
};

struct BlockOverride {
    std::optional<double> g_r, g, g_b, Omega_eg, Omega, delta_a, delta_b;
};

struct SystemParams {
    std::size_t n_blocks = 3;
    double g_A = mhz(50.0);
    double g_r = mhz(5.0);
    double g = mhz(5.0);
    double g_b = mhz(4.0);
    double Omega_eg = mhz(50.0);
    double Omega = mhz(100.0);
    double phi = -kPi / 2.0;
    double delta_a = 7.2 * mhz(5.0);
    double delta_b = 9.0 * mhz(4.0);
    double kappa = 1.0;          // cavity decay, 1/us
    double kappa_prime = 1e-3;   // NVE decay
    double gamma = 1.0 / 25.0;   // intracavity qubit relaxation
    double gamma_phi = 1.0 / 15.0;
    double gamma_A = 1.0 / 25.0;
    double gamma_A_phi = 1.0 / 15.0;
    std::size_t N_c = 3;
    std::size_t N_b = 12;
    double target_beta = 1.2;
    std::map<std::size_t, BlockOverride> overrides;  // keyed by 0-based block

    BlockParams block(std::size_t j) const {
        if (j >= n_blocks) throw Error("block index " + std::to_string(j) + " out of range");
        BlockParams b{g_r, g, g_b, Omega_eg, Omega, delta_a, delta_b};
        if (auto it = overrides.find(j); it != overrides.end()) {
            const auto& o = it->second;
            if (o.g_r) b.g_r = *o.g_r;
            if (o.g) b.g = *o.g;
            if (o.g_b) b.g_b = *o.g_b;
            if (o.Omega_eg) b.Omega_eg = *o.Omega_eg;
            if (o.Omega) b.Omega = *o.Omega;
            if (o.delta_a) b.delta_a = *o.delta_a;
            if (o.delta_b) b.delta_b = *o.delta_b;
        }
        return b;
    }

    double lambda(std::size_t j = 0) const { return block(j).lambda(); }
    double delta_c(std::size_t j = 0) const { return block(j).delta_c(); }
    double Delta(std::size_t j = 0) const { return block(j).Delta(); }

    bool uniform_blocks() const {
        for (std::size_t j = 1; j < n_blocks; ++j)
            if (!(block(j) == block(0))) return false;
        return true;
    }

    SystemParams lossless() const {
        SystemParams p = *this;
        p.kappa = p.kappa_prime = p.gamma = p.gamma_phi = p.gamma_A = p.gamma_A_phi = 0.0;
        return p;
    }

    void validate() const {
        if (n_blocks < 1 || n_blocks > 5) throw Error("n_blocks must be in [1, 5]");
        if (N_c < 2 || N_b < 2) throw Error("Fock truncations must be >= 2");
        for (double r : {kappa, kappa_prime, gamma, gamma_phi, gamma_A, gamma_A_phi})
            if (!(r >= 0.0)) throw Error("decoherence rates must be >= 0");
        if (!(g_A > 0.0)) throw Error("g_A must be > 0");
        if (!(target_beta >= 0.0)) throw Error("target_beta must be >= 0");
        for (std::size_t j = 0; j < n_blocks; ++j) {
            const auto b = block(j);
            for (double c : {b.g_r, b.g, b.g_b, b.Omega_eg, b.Omega})
                if (!(c > 0.0)) throw Error("couplings must be > 0 (block " + std::to_string(j + 1) + ")");
            if (!(b.delta_a > 0.0) || !(b.delta_b > 0.0))
                throw Error("delta_a and delta_b must be > 0 for the dispersive step");
        }
    }
};

// ---------------------------------------------------------------------------
// Signatures used by the protocol stages

inline SpaceSignature coupler_cavity_signature(const SystemParams& p) {
    std::vector<Factor> f{SpaceSignature::qubit(kCouplerLabel)};
    for (std::size_t j = 0; j < p.n_blocks; ++j) f.push_back(SpaceSignature::boson(cavity_label(j), p.N_c));
    return SpaceSignature(std::move(f));
}

inline SpaceSignature cavity_signature(const SystemParams& p) {
    std::vector<Factor> f;
    for (std::size_t j = 0; j < p.n_blocks; ++j) f.push_back(SpaceSignature::boson(cavity_label(j), p.N_c));
    return SpaceSignature(std::move(f));
}

inline SpaceSignature qubits_signature(const SystemParams& p) {
    std::vector<Factor> f;
    for (std::size_t j = 0; j < p.n_blocks; ++j) f.push_back(SpaceSignature::qubit(qubit_label(j)));
    return SpaceSignature(std::move(f));
}

inline SpaceSignature nve_signature(const SystemParams& p) {
    std::vector<Factor> f;
    for (std::size_t j = 0; j < p.n_blocks; ++j) f.push_back(SpaceSignature::boson(nve_label(j), p.N_b));
    return SpaceSignature(std::move(f));
}

struct BlockParts {
    bool qubit = true;
    bool cavity = true;
    bool nve = true;
};

inline SpaceSignature block_signature(const SystemParams& p, std::size_t j, BlockParts parts = {}) {
    std::vector<Factor> f;
    if (parts.qubit) f.push_back(SpaceSignature::qubit(qubit_label(j)));
    if (parts.cavity) f.push_back(SpaceSignature::boson(cavity_label(j), p.N_c));
    if (parts.nve) f.push_back(SpaceSignature::boson(nve_label(j), p.N_b));
    return SpaceSignature(std::move(f));
}

// All blocks, block-major: q1 c1 b1 q2 c2 b2 ...
inline SpaceSignature blocks_signature(const SystemParams& p, BlockParts parts = {}) {
    SpaceSignature s;
    for (std::size_t j = 0; j < p.n_blocks; ++j) s = s.concat(block_signature(p, j, parts));
    return s;
}

// Restricts a builder to a subset of blocks; empty means every block whose
// qubit is in the signature.
using BlockFilter = std::vector<std::size_t>;

namespace detail {

// Blocks whose qubit factor is present; each must also carry the listed
// companion factors.
inline std::vector<std::size_t> present_blocks(const SystemParams& p, const SpaceSignature& sig, bool need_cavity,
                                               bool need_nve, const char* who, const BlockFilter& only) {
    std::vector<std::size_t> blocks;
    for (std::size_t j = 0; j < p.n_blocks; ++j) {
        if (!sig.contains(qubit_label(j))) continue;
        if (!only.empty() && std::find(only.begin(), only.end(), j) == only.end()) continue;
        if (need_cavity && !sig.contains(cavity_label(j)))
            throw LabelError(std::string(who) + ": block " + std::to_string(j + 1) + " lacks its cavity factor");
        if (need_nve && !sig.contains(nve_label(j)))
            throw LabelError(std::string(who) + ": block " + std::to_string(j + 1) + " lacks its NVE factor");
        blocks.push_back(j);
    }
    if (blocks.empty()) throw LabelError(std::string(who) + ": no block qubit factor in " + sig.describe());
    return blocks;
}

inline DenseMatrix sigma_tilde_z() {
    const Vector plus = ket_plus(), minus = ket_minus();
    return plus * plus.adjoint() - minus * minus.adjoint();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Hamiltonians

// Step 1: sum_j g_A (a_j^+ sigma_A^- + a_j sigma_A^+).
inline Operator build_h_i1(const SystemParams& p, const SpaceSignature& sig) {
    sig.index_of(kCouplerLabel);
    const auto q = make_qubit_ops();
    const Operator sm = embed(q.sigma_minus, kCouplerLabel, sig);
    const Operator sp = embed(q.sigma_plus, kCouplerLabel, sig);
    Operator h = Operator::zero(sig);
    for (std::size_t j = 0; j < p.n_blocks; ++j) {
        const auto c = cavity_label(j);
        const auto b = make_boson_ops(sig.dim_of(c));
        const Operator a = embed(b.annihilation, c, sig);
        const Operator ad = embed(b.creation, c, sig);
        h += p.g_A * (ad * sm + a * sp);
    }
    h.mark_hermitian();
    return h;
}

// Step 2: sum_j g_r (a_j^+ sigma_j^- + a_j sigma_j^+).
inline Operator build_h_i2(const SystemParams& p, const SpaceSignature& sig, const BlockFilter& only = {}) {
    const auto blocks = detail::present_blocks(p, sig, true, false, "build_h_i2", only);
    const auto q = make_qubit_ops();
    Operator h = Operator::zero(sig);
    for (auto j : blocks) {
        const auto c = cavity_label(j);
        const auto b = make_boson_ops(sig.dim_of(c));
        const Operator ad_sm = embed(b.creation, c, sig) * embed(q.sigma_minus, qubit_label(j), sig);
        h += p.block(j).g_r * (ad_sm + ad_sm.adjoint());
    }
    h.mark_hermitian();
    return h;
}

// Step 3: sum_j Omega_eg (e^{i phi} |g><e| + h.c.).
inline Operator build_h_i3(const SystemParams& p, const SpaceSignature& sig, const BlockFilter& only = {}) {
    const auto blocks = detail::present_blocks(p, sig, false, false, "build_h_i3", only);
    const auto q = make_qubit_ops();
    Operator h = Operator::zero(sig);
    for (auto j : blocks) {
        const DenseMatrix local =
            p.block(j).Omega_eg * (std::exp(kI * p.phi) * q.sigma_minus + std::exp(-kI * p.phi) * q.sigma_plus);
        h += embed(local, qubit_label(j), sig);
    }
    h.mark_hermitian();
    return h;
}

inline void check_dispersive(const BlockParams& b, std::size_t j) {
    const double ra = b.delta_a / b.g, rb = b.delta_b / b.g_b;
    if (ra < 3.0 || rb < 3.0)
        throw Error("block " + std::to_string(j + 1) + ": dispersive regime violated (delta_a/g=" + std::to_string(ra) +
                    ", delta_b/g_b=" + std::to_string(rb) + ", need >= 3)");
    if (ra < 5.0 || rb < 5.0)
        spdlog::warn("block {}: weakly dispersive (delta_a/g={:.3g}, delta_b/g_b={:.3g})", j + 1, ra, rb);
}

// Step 4 (interaction picture, drive resonant with omega_eg):
//   sum_j g [e^{i da t} a^+ s^- + h.c.] + g_b [e^{i db t} a^+ b + h.c.] + Omega (s^+ + s^-)
inline Hamiltonian build_h_i4_td(const SystemParams& p, const SpaceSignature& sig, const BlockFilter& only = {}) {
    const auto blocks = detail::present_blocks(p, sig, true, true, "build_h_i4", only);
    const auto q = make_qubit_ops();
    Operator drive = Operator::zero(sig);
    std::vector<std::pair<Operator, double>> terms;
    for (auto j : blocks) {
        const auto bp = p.block(j);
        check_dispersive(bp, j);
        const auto cav = make_boson_ops(sig.dim_of(cavity_label(j)));
        const auto nve = make_boson_ops(sig.dim_of(nve_label(j)));
        const Operator ad = embed(cav.creation, cavity_label(j), sig);
        const Operator sm = embed(q.sigma_minus, qubit_label(j), sig);
        const Operator bb = embed(nve.annihilation, nve_label(j), sig);
        const Operator qc = bp.g * (ad * sm);
        const Operator cb = bp.g_b * (ad * bb);
        terms.emplace_back(qc, bp.delta_a);
        terms.emplace_back(qc.adjoint(), -bp.delta_a);
        terms.emplace_back(cb, bp.delta_b);
        terms.emplace_back(cb.adjoint(), -bp.delta_b);
        drive += embed(DenseMatrix(bp.Omega * (q.sigma_plus + q.sigma_minus)), qubit_label(j), sig);
    }
    Hamiltonian h(drive);
    for (auto& [op, w] : terms) h.add_term(std::move(op), w);
    return h;
}

inline Operator build_h_i4(const SystemParams& p, const SpaceSignature& sig, double t) {
    Operator h = build_h_i4_td(p, sig).at(t);
    h.mark_hermitian();
    return h;
}

// Effective dispersive Hamiltonian in the frame rotating with
// H0' = sum Omega s~z and H0'' = -sum (g_b^2/delta_b) b^+b:
//   -sum_j lambda s~z_j (b_j e^{-i Delta t} + b_j^+ e^{i Delta t}).
// Cavity factors, when present, are untouched.
inline Hamiltonian build_h_eff_td(const SystemParams& p, const SpaceSignature& sig, const BlockFilter& only = {}) {
    const auto blocks = detail::present_blocks(p, sig, false, true, "build_h_eff", only);
    const DenseMatrix sz = detail::sigma_tilde_z();
    Hamiltonian h(Operator::zero(sig));
    for (auto j : blocks) {
        const auto bp = p.block(j);
        const auto nve = make_boson_ops(sig.dim_of(nve_label(j)));
        const Operator szb = embed(sz, qubit_label(j), sig) * embed(nve.annihilation, nve_label(j), sig);
        const Operator coupling = -bp.lambda() * szb;
        h.add_term(coupling, -bp.Delta());
        h.add_term(coupling.adjoint(), bp.Delta());
    }
    return h;
}

inline Operator build_h_eff(const SystemParams& p, const SpaceSignature& sig, double t) {
    Operator h = build_h_eff_td(p, sig).at(t);
    h.mark_hermitian();
    return h;
}

// exp(-i H0' t) exp(-i H0'' t): maps the effective-Hamiltonian frame back to
// the step-4 interaction picture.
inline Operator effective_frame_unitary(const SystemParams& p, const SpaceSignature& sig, double t,
                                        const BlockFilter& only = {}) {
    const auto blocks = detail::present_blocks(p, sig, false, true, "effective_frame_unitary", only);
    const DenseMatrix sz = detail::sigma_tilde_z();
    Operator u = Operator::identity(sig);
    for (auto j : blocks) {
        const auto bp = p.block(j);
        const DenseMatrix uq = std::cos(bp.Omega * t) * DenseMatrix::Identity(2, 2) - kI * std::sin(bp.Omega * t) * sz;
        const auto nb = sig.dim_of(nve_label(j));
        DenseMatrix ub = DenseMatrix::Zero(static_cast<Eigen::Index>(nb), static_cast<Eigen::Index>(nb));
        for (std::size_t n = 0; n < nb; ++n)
            ub(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)) =
                std::exp(kI * bp.stark_shift() * t * static_cast<double>(n));
        u = u * embed(uq, qubit_label(j), sig) * embed(ub, nve_label(j), sig);
    }
    return u;
}

// ---------------------------------------------------------------------------
// Dissipators

// Jump operators for every factor present in `sig`:
//   sqrt(kappa) a_j, sqrt(kappa') b_j, sqrt(gamma) s_j^-, sqrt(gamma_phi) s_z,j,
//   sqrt(gamma_A) s_A^-, sqrt(gamma_A_phi) s_z,A.
// The dephasing form gamma_phi (s_z rho s_z - rho) equals D[sqrt(gamma_phi) s_z]
// because s_z^+ s_z = I. Zero-rate channels are omitted.
inline std::vector<CollapseOp> build_collapse_ops(const SystemParams& p, const SpaceSignature& sig) {
    std::vector<CollapseOp> ops;
    const auto q = make_qubit_ops();
    auto add = [&](std::string name, const DenseMatrix& local, const std::string& label, double rate) {
        if (rate > 0.0) ops.push_back({std::move(name), embed(local, label, sig), rate});
    };
    if (sig.contains(kCouplerLabel)) {
        add("gamma_A", q.sigma_minus, kCouplerLabel, p.gamma_A);
        add("gamma_A_phi", q.sigma_z, kCouplerLabel, p.gamma_A_phi);
    }
    for (std::size_t j = 0; j < p.n_blocks; ++j) {
        if (sig.contains(qubit_label(j))) {
            add("gamma_" + qubit_label(j), q.sigma_minus, qubit_label(j), p.gamma);
            add("gamma_phi_" + qubit_label(j), q.sigma_z, qubit_label(j), p.gamma_phi);
        }
        if (sig.contains(cavity_label(j)))
            add("kappa_" + cavity_label(j), make_boson_ops(sig.dim_of(cavity_label(j))).annihilation, cavity_label(j),
                p.kappa);
        if (sig.contains(nve_label(j)))
            add("kappa_prime_" + nve_label(j), make_boson_ops(sig.dim_of(nve_label(j))).annihilation, nve_label(j),
                p.kappa_prime);
    }
    return ops;
}

// ---------------------------------------------------------------------------
// NV spin-ensemble micro-model

struct EnsembleMicroModel {
    std::vector<double> couplings;  // g_k, rad/us
    double delta = 0.0;             // omega_c - omega_{0,+1}

    std::size_t size() const noexcept { return couplings.size(); }

    // Root-mean-square coupling.
    double g_bar() const {
        double s = 0.0;
        for (double g : couplings) s += g * g;
        return std::sqrt(s / static_cast<double>(couplings.size()));
    }

    static EnsembleMicroModel uniform(std::size_t n, double g, double delta = 0.0) {
        return {std::vector<double>(n, g), delta};
    }
};

inline std::string spin_label(std::size_t k) { return "s" + std::to_string(k + 1); }

// Cavity "c" followed by spins s1..sN (two levels |m_s=+1>, |m_s=0>).
inline SpaceSignature micro_signature(const EnsembleMicroModel& m, std::size_t cavity_dim) {
    std::vector<Factor> f{SpaceSignature::boson("c", cavity_dim)};
    for (std::size_t k = 0; k < m.size(); ++k) f.push_back(SpaceSignature::qubit(spin_label(k)));
    return SpaceSignature(std::move(f));
}

inline std::vector<Operator> micro_lowering_terms(const EnsembleMicroModel& m, const SpaceSignature& sig) {
    if (m.size() == 0) throw Error("micro-model needs at least one spin");
    const auto q = make_qubit_ops();
    const auto cav = make_boson_ops(sig.dim_of("c"));
    const Operator ad = embed(cav.creation, "c", sig);
    std::vector<Operator> out;
    for (std::size_t k = 0; k < m.size(); ++k)
        out.push_back(m.couplings[k] * (ad * embed(q.sigma_minus, spin_label(k), sig)));
    return out;
}

// sum_k g_k (a^+ tau_k^- + a tau_k^+), static frame (delta phase dropped).
inline Operator build_micro_hamiltonian(const EnsembleMicroModel& m, const SpaceSignature& sig) {
    Operator h = Operator::zero(sig);
    for (const auto& t : micro_lowering_terms(m, sig)) h += t + t.adjoint();
    h.mark_hermitian();
    return h;
}

// Same coupling with the e^{+-i delta t} phases as explicit harmonics.
inline Hamiltonian build_micro_hamiltonian_td(const EnsembleMicroModel& m, const SpaceSignature& sig) {
    Hamiltonian h(Operator::zero(sig));
    for (const auto& t : micro_lowering_terms(m, sig)) {
        h.add_term(t, m.delta);
        h.add_term(t.adjoint(), -m.delta);
    }
    return h;
}

// Largest |eigenvalue| of the single-excitation block of the micro-model
// Hamiltonian, i.e. the bright-state vacuum Rabi coupling.
inline double bright_state_coupling(const EnsembleMicroModel& m) {
    const auto sig = micro_signature(m, 2);
    const DenseMatrix h = build_micro_hamiltonian(m, sig).dense();
    // excitation number of each basis index: cavity photons + excited spins
    std::vector<Eigen::Index> one;
    for (std::size_t i = 0; i < sig.total_dim(); ++i) {
        const auto d = sig.digits(i);
        std::size_t n = d[0];
        for (std::size_t k = 1; k < d.size(); ++k) n += (d[k] == 0) ? 1 : 0;
        if (n == 1) one.push_back(static_cast<Eigen::Index>(i));
    }
    const auto n1 = static_cast<Eigen::Index>(one.size());
    DenseMatrix block(n1, n1);
    for (Eigen::Index r = 0; r < n1; ++r)
        for (Eigen::Index c = 0; c < n1; ++c) block(r, c) = h(one[r], one[c]);
    Eigen::SelfAdjointEigenSolver<DenseMatrix> es(block, Eigen::EigenvaluesOnly);
    return es.eigenvalues().cwiseAbs().maxCoeff();
}

struct CollectiveLevel {
    std::size_t n = 0;          // transition n -> n+1
    double element = 0.0;       // <n+1|b^+|n> on normalized symmetric states
    double bosonic = 0.0;       // sqrt(n+1)
    double rel_deviation = 0.0;
};

struct CollectiveModeReport {
    std::size_t spins = 0;
    std::vector<CollectiveLevel> levels;
    double max_rel_deviation = 0.0;
};

// Compares the collective operator b^+ = (1/(sqrt(N) g_bar)) sum_k g_k tau_k^+
// between its own ladder states (b^+)^n|0> against a true boson.
inline CollectiveModeReport collective_mode_check(const EnsembleMicroModel& m, std::size_t n_max) {
    const std::size_t n_spins = m.size();
    if (n_spins == 0) throw Error("collective_mode_check: empty ensemble");
    if (n_max >= n_spins) throw Error("collective_mode_check: n_max must be below the spin count");
    std::vector<Factor> f;
    for (std::size_t k = 0; k < n_spins; ++k) f.push_back(SpaceSignature::qubit(spin_label(k)));
    const SpaceSignature sig(std::move(f));
    const auto q = make_qubit_ops();
    Operator bdag = Operator::zero(sig);
    const double norm = std::sqrt(static_cast<double>(n_spins)) * m.g_bar();
    for (std::size_t k = 0; k < n_spins; ++k) bdag += (m.couplings[k] / norm) * embed(q.sigma_plus, spin_label(k), sig);

    // all spins in |m_s=0> (index 1 on every factor)
    Vector v = Vector::Zero(static_cast<Eigen::Index>(sig.total_dim()));
    v(static_cast<Eigen::Index>(sig.total_dim() - 1)) = 1.0;

    CollectiveModeReport r;
    r.spins = n_spins;
    for (std::size_t n = 0; n <= n_max; ++n) {
        const Vector next = bdag.apply(v);
        CollectiveLevel lvl;
        lvl.n = n;
        lvl.element = next.norm() / v.norm();
        lvl.bosonic = std::sqrt(static_cast<double>(n + 1));
        lvl.rel_deviation = std::abs(lvl.element - lvl.bosonic) / lvl.bosonic;
        r.max_rel_deviation = std::max(r.max_rel_deviation, lvl.rel_deviation);
        r.levels.push_back(lvl);
        v = next;
    }
    return r;
}

}  // namespace nvecs
