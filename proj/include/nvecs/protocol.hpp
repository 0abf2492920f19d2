#pragma once

// Four-step preparation of the three-NVE entangled coherent W state:
// step timings, ideal states, the factorized and brute-force engines,
// measurement of the intracavity qubits and cavity-NVE state transfer.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "nvecs/dynamics.hpp"
#include "nvecs/model.hpp"

namespace nvecs {

// ---------------------------------------------------------------------------
// Displacement amplitude and step timings

// (lambda/Delta)(e^{i Delta t} - 1); i lambda t at Delta = 0.
inline cplx alpha_of_t(const SystemParams& p, double t, std::size_t block = 0) {
    const auto b = p.block(block);
    const double lam = b.lambda(), D = b.Delta();
    const double x = D * t;
    if (std::abs(x) < 1e-4) return lam * t * cplx(-x / 2.0 + x * x * x / 24.0, 1.0 - x * x / 6.0);
    return (lam / D) * (std::exp(kI * x) - 1.0);
}

// Amplitude after undoing the NVE Stark-shift frame: beta = alpha e^{i g_b^2 t / delta_b}.
inline cplx beta_of_t(const SystemParams& p, double t, std::size_t block = 0) {
    return alpha_of_t(p, t, block) * std::exp(kI * p.block(block).stark_shift() * t);
}

// Largest reachable |alpha| = 2 lambda / |Delta| (unbounded at Delta = 0).
inline double max_displacement(const SystemParams& p, std::size_t block = 0) {
    const auto b = p.block(block);
    if (b.Delta() == 0.0) return std::numeric_limits<double>::infinity();
    return 2.0 * b.lambda() / std::abs(b.Delta());
}

// Smallest t > 0 with |alpha(t)| = target.
inline double solve_t4(const SystemParams& p, double target, std::size_t block = 0) {
    if (target < 0.0) throw InfeasibleError("target |beta| must be >= 0");
    if (target == 0.0) return 0.0;
    const auto b = p.block(block);
    const double lam = b.lambda(), D = b.Delta();
    if (D == 0.0) return target / lam;
    const double bound = 2.0 * lam / std::abs(D);
    if (target > bound * (1.0 + 1e-12))
        throw InfeasibleError("target |beta| = " + std::to_string(target) +
                              " exceeds the reachable maximum 2*lambda/|Delta| = " + std::to_string(bound) +
                              " (block " + std::to_string(block + 1) + ")");
    return (2.0 / std::abs(D)) * std::asin(std::min(1.0, target / bound));
}

struct StepPlan {
    double t1 = 0.0;
    std::vector<double> t2, t3, t4;
    std::vector<cplx> beta;

    static double longest(const std::vector<double>& v) { return v.empty() ? 0.0 : *std::max_element(v.begin(), v.end()); }
    double step2() const { return longest(t2); }
    double step3() const { return longest(t3); }
    double step4() const { return longest(t4); }
    double t0() const { return t1 + step2() + step3(); }
    double total() const { return t0() + step4(); }
};

inline StepPlan make_step_plan(const SystemParams& p) {
    StepPlan s;
    s.t1 = kPi / (2.0 * std::sqrt(static_cast<double>(p.n_blocks)) * p.g_A);
    for (std::size_t j = 0; j < p.n_blocks; ++j) {
        const auto b = p.block(j);
        s.t2.push_back(kPi / (2.0 * b.g_r));
        s.t3.push_back(kPi / (4.0 * b.Omega_eg));
        const double t4 = solve_t4(p, p.target_beta, j);
        s.t4.push_back(t4);
        s.beta.push_back(beta_of_t(p, t4, j));
    }
    spdlog::debug("step plan: t1 = {:.4g} ns, t2 = {:.4g} ns, t3 = {:.4g} ns, t0 = {:.4g} ns, t4 = {:.6g} us",
                  s.t1 * 1e3, s.step2() * 1e3, s.step3() * 1e3, s.t0() * 1e3, s.step4());
    return s;
}

// ---------------------------------------------------------------------------
// Ideal states

inline Vector w_vector(std::size_t n, std::size_t dim, std::size_t excited_level, std::size_t ground_level) {
    // (1/sqrt n) sum_j |ground..excited_j..ground> on n factors of dimension dim
    std::size_t total = 1;
    for (std::size_t j = 0; j < n; ++j) total *= dim;
    Vector v = Vector::Zero(static_cast<Eigen::Index>(total));
    for (std::size_t j = 0; j < n; ++j) {
        std::size_t idx = 0;
        for (std::size_t l = 0; l < n; ++l) idx = idx * dim + (l == j ? excited_level : ground_level);
        v(static_cast<Eigen::Index>(idx)) += 1.0 / std::sqrt(static_cast<double>(n));
    }
    return v;
}

// Per-block kets of the target branch states. Branch k carries |-> (and
// -beta_k) on block k and |+> (and +beta_j) elsewhere. With `qubit_phases`
// the drive-frame phases e^{-/+ i Omega_j t4_j} are attached to |+>/|->.
struct BranchKets {
    std::vector<Vector> plus, minus;  // per block
};

inline BranchKets branch_kets(const SystemParams& p, const StepPlan& plan, BlockParts parts, bool qubit_phases) {
    BranchKets bk;
    for (std::size_t j = 0; j < p.n_blocks; ++j) {
        const double w = qubit_phases ? p.block(j).Omega * plan.t4[j] : 0.0;
        Vector plus = std::exp(-kI * w) * ket_plus();
        Vector minus = std::exp(kI * w) * ket_minus();
        auto attach = [&](Vector q, cplx beta) {
            Vector v = q;
            if (parts.cavity) v = Vector(Eigen::kroneckerProduct(v, fock_ket(p.N_c, 0)));
            if (parts.nve) v = Vector(Eigen::kroneckerProduct(v, coherent_state(beta, p.N_b).amplitudes()));
            return v;
        };
        bk.plus.push_back(attach(plus, plan.beta[j]));
        bk.minus.push_back(attach(minus, -plan.beta[j]));
    }
    return bk;
}

inline std::vector<ProductKet> target_product(const SystemParams& p, const StepPlan& plan, BlockParts parts = {},
                                              bool qubit_phases = true) {
    const auto bk = branch_kets(p, plan, parts, qubit_phases);
    std::vector<ProductKet> out;
    for (std::size_t k = 0; k < p.n_blocks; ++k) {
        ProductKet t;
        t.amplitude = 1.0 / std::sqrt(static_cast<double>(p.n_blocks));
        for (std::size_t j = 0; j < p.n_blocks; ++j) t.kets.push_back(j == k ? bk.minus[j] : bk.plus[j]);
        out.push_back(std::move(t));
    }
    return out;
}

inline Vector expand_product(const std::vector<ProductKet>& terms) {
    Vector total;
    for (const auto& t : terms) {
        Vector v = Vector::Ones(1);
        for (const auto& k : t.kets) v = Vector(Eigen::kroneckerProduct(v, k));
        v *= t.amplitude;
        if (total.size() == 0)
            total = v;
        else
            total += v;
    }
    return total;
}

// k = 1: |g>_A |W>_c;  k = 2: qubit W state;  k = 3: |W~> = n^{-1/2} sum_j |->_j |+>...;
// k = 4: |phi> on (q_j, b_j) blocks with beta from the step plan.
inline StateVector ideal_state_after_step(int k, const SystemParams& p, const StepPlan& plan) {
    const std::size_t n = p.n_blocks;
    switch (k) {
        case 1: {
            const Vector w = w_vector(n, p.N_c, 1, 0);
            return StateVector(coupler_cavity_signature(p), Vector(Eigen::kroneckerProduct(ket_g(), w)));
        }
        case 2:
            return StateVector(qubits_signature(p), w_vector(n, 2, 0, 1));
        case 3: {
            // |e> -> |->, |g> -> |+>
            std::vector<ProductKet> terms;
            for (std::size_t b = 0; b < n; ++b) {
                ProductKet t;
                t.amplitude = 1.0 / std::sqrt(static_cast<double>(n));
                for (std::size_t j = 0; j < n; ++j) t.kets.push_back(j == b ? ket_minus() : ket_plus());
                terms.push_back(std::move(t));
            }
            return StateVector(qubits_signature(p), expand_product(terms));
        }
        case 4: {
            const auto terms = target_product(p, plan, {true, false, true}, false);
            return StateVector(blocks_signature(p, {true, false, true}), expand_product(terms));
        }
        default:
            throw Error("ideal_state_after_step: step " + std::to_string(k) + " out of range 1..4");
    }
}

inline StateVector ideal_state_after_step(int k, const SystemParams& p) {
    if (k == 4) return ideal_state_after_step(k, p, make_step_plan(p));
    StepPlan plan;
    return ideal_state_after_step(k, p, plan);
}

// sum_k (-1)^{m_k} |beta..-beta(k)..beta>, normalized with the exact Gram
// matrix. A vanishing combination is returned unnormalized (zero).
inline StateVector ideal_w_state(std::size_t n, const std::vector<int>& m, cplx beta, std::size_t dim) {
    if (m.size() != n) throw Error("ideal_w_state: outcome length differs from n");
    std::vector<Factor> f;
    for (std::size_t j = 0; j < n; ++j) f.push_back(SpaceSignature::boson("b" + std::to_string(j + 1), dim));
    const SpaceSignature sig(std::move(f));
    const Vector plus = coherent_state(beta, dim).amplitudes();
    const Vector minus = coherent_state(-beta, dim).amplitudes();
    std::vector<ProductKet> terms;
    for (std::size_t k = 0; k < n; ++k) {
        ProductKet t;
        t.amplitude = (m[k] % 2 == 0) ? 1.0 : -1.0;
        for (std::size_t j = 0; j < n; ++j) t.kets.push_back(j == k ? minus : plus);
        terms.push_back(std::move(t));
    }
    const double norm2 = product_ket_norm2(terms);
    Vector v = expand_product(terms);
    if (norm2 < 1e-24) {
        spdlog::warn("ideal_w_state: degenerate sign pattern, returning the zero vector");
        return StateVector(sig, Vector::Zero(v.size()), Normalization::unnormalized);
    }
    return StateVector(sig, v / std::sqrt(norm2));
}

// ---------------------------------------------------------------------------
// Measurement of the intracavity qubits

struct MeasurementOutcome {
    double probability = 0.0;
    bool degenerate = false;
    StateVector state;         // remaining factors (pure input only)
    DensityMatrix nve_state;   // reduced to the NVE factors
};

namespace detail {

inline std::vector<std::string> nve_labels_in(const SpaceSignature& sig) {
    std::vector<std::string> out;
    for (const auto& f : sig.factors())
        if (!f.label.empty() && f.label[0] == 'b') out.push_back(f.label);
    return out;
}

// Index map from the remaining factors to the full space with the qubits
// fixed to the measured outcome (m = 1 -> |e> index 0, m = 0 -> |g> index 1).
inline std::pair<SpaceSignature, std::vector<std::size_t>> projection_map(const SpaceSignature& sig,
                                                                         const std::vector<int>& m) {
    std::vector<std::string> keep;
    std::vector<std::optional<std::size_t>> fixed(sig.size());
    std::size_t found = 0;
    for (std::size_t i = 0; i < sig.size(); ++i) {
        const auto& l = sig[i].label;
        bool is_meas = false;
        for (std::size_t j = 0; j < m.size(); ++j)
            if (l == qubit_label(j)) {
                fixed[i] = m[j] ? 0u : 1u;
                is_meas = true;
                ++found;
            }
        if (!is_meas) keep.push_back(l);
    }
    if (found != m.size()) throw LabelError("measure_intracavity_qubits: state lacks some intracavity qubits");
    if (keep.empty()) throw LabelError("measure_intracavity_qubits: nothing left after measurement");
    const SpaceSignature rest = sig.subset(keep);
    std::vector<std::size_t> map(rest.total_dim());
    const auto strides = sig.strides();
    for (std::size_t r = 0; r < map.size(); ++r) {
        const auto dg = rest.digits(r);
        std::size_t idx = 0, k = 0;
        for (std::size_t i = 0; i < sig.size(); ++i) idx += (fixed[i] ? *fixed[i] : dg[k++]) * strides[i];
        map[r] = idx;
    }
    return {rest, map};
}

}  // namespace detail

inline MeasurementOutcome measure_intracavity_qubits(const StateVector& psi, const std::vector<int>& m) {
    const auto [rest, map] = detail::projection_map(psi.signature(), m);
    Vector v(static_cast<Eigen::Index>(map.size()));
    for (std::size_t r = 0; r < map.size(); ++r)
        v(static_cast<Eigen::Index>(r)) = psi.amplitudes()(static_cast<Eigen::Index>(map[r]));
    MeasurementOutcome out;
    out.probability = v.squaredNorm();
    out.degenerate = out.probability < 1e-14;
    if (!out.degenerate) v /= std::sqrt(out.probability);
    out.state = StateVector(rest, v, out.degenerate ? Normalization::unnormalized : Normalization::normalized);
    const auto nves = detail::nve_labels_in(rest);
    DensityMatrix full = DensityMatrix::from_pure(out.state);
    out.nve_state = (nves.empty() || nves.size() == rest.size()) ? full : partial_trace(full, nves);
    return out;
}

inline MeasurementOutcome measure_intracavity_qubits(const DensityMatrix& rho, const std::vector<int>& m) {
    const auto [rest, map] = detail::projection_map(rho.signature(), m);
    const auto d = static_cast<Eigen::Index>(map.size());
    DenseMatrix r(d, d);
    for (Eigen::Index c = 0; c < d; ++c)
        for (Eigen::Index k = 0; k < d; ++k)
            r(k, c) = rho.data()(static_cast<Eigen::Index>(map[k]), static_cast<Eigen::Index>(map[c]));
    MeasurementOutcome out;
    out.probability = r.trace().real();
    out.degenerate = out.probability < 1e-14;
    if (!out.degenerate) r /= out.probability;
    const DensityMatrix full(rest, r, out.degenerate ? DensityMatrix::Trace::recorded : DensityMatrix::Trace::unit, 1e-8,
                             1e-6);
    const auto nves = detail::nve_labels_in(rest);
    out.nve_state = (nves.empty() || nves.size() == rest.size()) ? full : partial_trace(full, nves);
    return out;
}

// ---------------------------------------------------------------------------
// State transfer

struct TransferResult {
    StateVector initial;
    StateVector final_state;
    double fidelity = 0.0;
    double mean_photon_cavity = 0.0;
    double mean_photon_nve = 0.0;
};

// |0>_c |beta>_b under g_b (a^+ b + a b^+) for time t (default pi / (2 g_b)),
// compared with |-i beta sin(g_b t)>_c |beta cos(g_b t)>_b.
inline TransferResult state_transfer(const SystemParams& p, cplx beta, std::optional<double> t = std::nullopt) {
    const double gb = p.g_b;
    const double time = t.value_or(kPi / (2.0 * gb));
    const SpaceSignature sig({SpaceSignature::boson("c", p.N_c), SpaceSignature::boson("b", p.N_b)});
    const auto a = make_boson_ops(p.N_c), b = make_boson_ops(p.N_b);
    const Operator ab = embed(a.creation, "c", sig) * embed(b.annihilation, "b", sig);
    Operator h = gb * (ab + ab.adjoint());
    h.mark_hermitian();
    TransferResult r;
    r.initial = kron(coherent_state(0.0, p.N_c, "c"), coherent_state(beta, p.N_b, "b"));
    r.final_state = propagate_exact(h, r.initial, time);
    const StateVector target = kron(coherent_state(-kI * beta * std::sin(gb * time), p.N_c, "c"),
                                    coherent_state(beta * std::cos(gb * time), p.N_b, "b"));
    r.fidelity = std::abs(target.inner(r.final_state));
    const auto rho = DensityMatrix::from_pure(r.final_state);
    r.mean_photon_cavity = mean_photon(rho, "c");
    r.mean_photon_nve = mean_photon(rho, "b");
    return r;
}

// ---------------------------------------------------------------------------
// Protocol engines

enum class Engine { factorized, brute };
enum class Step4Model { full, effective };

struct ProtocolMode {
    bool lossy = true;
    Step4Model step4 = Step4Model::full;
    Engine engine = Engine::factorized;
    bool ideal_prefix = false;        // ideal unitaries for steps 1-3
    bool idle_coupler_decay = false;  // coupler keeps decaying after step 1
    bool step_fidelities = false;     // also run the isolated step 1-3 checks
    std::size_t jobs = 1;
    IntegratorOptions integrator;

    std::string describe() const {
        std::string s = lossy ? "lossy" : "lossless";
        s += step4 == Step4Model::full ? ", full step-4 Hamiltonian" : ", effective step-4 Hamiltonian";
        s += engine == Engine::factorized ? ", factorized" : ", brute force";
        if (ideal_prefix) s += ", ideal steps 1-3";
        if (idle_coupler_decay) s += ", idle coupler decay";
        return s;
    }
};

struct TraceSample {
    double t = 0.0;  // step-4 local time
    double fidelity = 0.0;
    double beta_abs = 0.0;
    std::vector<double> mean_photon_c;
};

struct ProtocolResult {
    ProtocolMode mode;
    StepPlan plan;
    double fidelity = 0.0;
    std::vector<double> step_fidelities;
    std::vector<cplx> beta;
    std::vector<double> mean_photon_c, mean_photon_b;
    std::vector<TraceSample> trace;
    double wall_ms = 0.0;
};

namespace detail {

inline std::vector<CollapseOp> collapse_for(const SystemParams& p, const SpaceSignature& sig, bool lossy) {
    return lossy ? build_collapse_ops(p, sig) : std::vector<CollapseOp>{};
}

inline Hamiltonian zero_hamiltonian(const SpaceSignature& sig) { return Hamiltonian(Operator::zero(sig)); }

// Step 1 on (A, c_1..c_n) from |e>|0..0>.
inline DensityMatrix run_step1(const SystemParams& p, const StepPlan& plan, bool lossy, const IntegratorOptions& opt) {
    const auto sig = coupler_cavity_signature(p);
    std::map<std::string, Vector> kets{{kCouplerLabel, ket_e()}};
    for (std::size_t j = 0; j < p.n_blocks; ++j) kets[cavity_label(j)] = fock_ket(p.N_c, 0);
    const StateVector psi0 = product_state(sig, kets, Normalization::normalized);
    const Operator h = build_h_i1(p, sig);
    if (!lossy) return DensityMatrix::from_pure(propagate_exact(h, psi0, plan.t1));
    EvolutionTask task;
    task.hamiltonian = Hamiltonian(h);
    task.collapse_ops = build_collapse_ops(p, sig);
    task.initial = psi0;
    task.t_final = plan.t1;
    task.options = opt;
    return evolve_lindblad(task).state;
}

// Cavity state handed to the blocks: the |g>_A component of the step-1
// output. With idle coupler decay the |e>_A population relaxes into |g>_A
// over the remaining protocol time.
inline DenseMatrix cavity_input(const SystemParams& p, const DensityMatrix& rho1, double idle_time, bool idle_decay) {
    const auto& sig = rho1.signature();
    const auto dc = static_cast<Eigen::Index>(cavity_signature(p).total_dim());
    // A is the first (slowest) factor: index 0 = |e>, 1 = |g>
    DenseMatrix gg = rho1.data().block(dc, dc, dc, dc);
    if (sig[0].label != kCouplerLabel) throw LabelError("cavity_input: coupler must be the first factor");
    if (idle_decay && p.gamma_A > 0.0) gg += (1.0 - std::exp(-p.gamma_A * idle_time)) * rho1.data().block(0, 0, dc, dc);
    return gg;
}

inline DenseMatrix ideal_qubit_input(const SystemParams& p) {
    const Vector w = ideal_state_after_step(3, p, StepPlan{}).amplitudes();
    return w * w.adjoint();
}

// Block j's composite channel (steps 2-4, or step 4 alone with an ideal
// prefix) as a sequence of stages. Blocks shorter than the slowest block of
// a step idle under dissipation until the step ends.
inline std::vector<EvolutionStage> block_stages(const SystemParams& p, std::size_t j, const StepPlan& plan,
                                                const ProtocolMode& mode, double step4_duration, bool frame_at_end) {
    std::vector<EvolutionStage> st;
    auto add = [&](std::string name, const SpaceSignature& sig, Hamiltonian h, double dur, double idle,
                   std::map<std::string, Vector> pad, std::optional<Operator> post = std::nullopt) {
        EvolutionStage s;
        s.name = name;
        s.hamiltonian = std::move(h);
        s.collapse_ops = collapse_for(p, sig, mode.lossy);
        s.duration = dur;
        s.padding = std::move(pad);
        s.post_unitary = std::move(post);
        st.push_back(std::move(s));
        if (idle > 1e-15) {
            EvolutionStage i;
            i.name = name + " idle";
            i.hamiltonian = zero_hamiltonian(sig);
            i.collapse_ops = collapse_for(p, sig, mode.lossy);
            i.duration = idle;
            st.push_back(std::move(i));
        }
    };
    const auto qc = block_signature(p, j, {true, true, false});
    const auto qcb = block_signature(p, j);
    if (!mode.ideal_prefix) {
        add("step 2", qc, Hamiltonian(build_h_i2(p, qc)), plan.t2[j], plan.step2() - plan.t2[j],
            {{qubit_label(j), ket_g()}});
        add("step 3", qc, Hamiltonian(build_h_i3(p, qc)), plan.t3[j], plan.step3() - plan.t3[j], {});
    }
    std::map<std::string, Vector> pad{{nve_label(j), fock_ket(p.N_b, 0)}};
    if (mode.ideal_prefix) pad[cavity_label(j)] = fock_ket(p.N_c, 0);
    const double active = step4_duration;
    const double idle = std::max(0.0, std::max(plan.step4(), step4_duration) - active);
    if (mode.step4 == Step4Model::full) {
        add("step 4", qcb, build_h_i4_td(p, qcb), active, idle, pad);
    } else {
        std::optional<Operator> frame;
        if (frame_at_end) frame = effective_frame_unitary(p, qcb, active);
        add("step 4", qcb, build_h_eff_td(p, qcb), active, idle, pad, frame);
    }
    return st;
}

struct BlockRun {
    QuantumChannel channel;
    std::vector<QuantumChannel> snapshots;  // per trace sample, step-4 frame
};

inline BlockRun run_block(const SystemParams& p, std::size_t j, const StepPlan& plan, const ProtocolMode& mode,
                          const std::vector<double>& trace_times) {
    const bool tracing = !trace_times.empty();
    const double step4 = tracing ? std::max(plan.t4[j], trace_times.back()) : plan.t4[j];
    auto stages = block_stages(p, j, plan, mode, step4, !tracing);
    std::size_t step4_index = 0;
    for (std::size_t s = 0; s < stages.size(); ++s)
        if (stages[s].name == "step 4") step4_index = s;
    if (tracing) stages[step4_index].samples = trace_times;

    SpaceSignature in_sig;
    std::vector<Vector> kets;
    if (mode.ideal_prefix) {
        in_sig = SpaceSignature({SpaceSignature::qubit(qubit_label(j))});
        kets = {ket_e(), ket_g()};
    } else {
        in_sig = SpaceSignature({SpaceSignature::boson(cavity_label(j), p.N_c)});
        for (std::size_t n = 0; n < p.N_c; ++n) kets.push_back(fock_ket(p.N_c, n));
    }
    const auto out_sig = block_signature(p, j);
    const std::size_t nk = kets.size();
    std::vector<std::vector<DenseMatrix>> snaps(nk * nk);
    ChannelEvolution evolve = [&](const DenseMatrix& x, std::size_t i, std::size_t k) {
        StageObserver obs;
        auto& slot = snaps[i * nk + k];
        if (tracing) {
            slot.resize(trace_times.size());
            obs.fn = [&](std::size_t stage, std::size_t sample, double, const DenseMatrix& y) {
                if (stage == step4_index) slot[sample] = y;
            };
        }
        return run_stages(stages, x, in_sig, mode.integrator, nullptr, obs);
    };
    BlockRun run;
    run.channel = extract_channel(evolve, in_sig, kets, out_sig, mode.jobs);
    if (tracing) {
        for (std::size_t s = 0; s < trace_times.size(); ++s) {
            std::vector<DenseMatrix> outs(nk * nk);
            for (std::size_t i = 0; i < nk; ++i)
                for (std::size_t k = 0; k < nk; ++k)
                    outs[i * nk + k] = i <= k ? snaps[i * nk + k][s] : DenseMatrix(snaps[k * nk + i][s].adjoint());
            run.snapshots.emplace_back(in_sig, kets, out_sig, std::move(outs));
        }
    }
    return run;
}

inline std::vector<ProductTerm> single_block_observable(const std::vector<const QuantumChannel*>& ch, std::size_t j,
                                                        const DenseMatrix& op) {
    ProductTerm t;
    for (std::size_t l = 0; l < ch.size(); ++l) {
        const auto d = static_cast<Eigen::Index>(ch[l]->output_signature().total_dim());
        t.factors.push_back(l == j ? op : DenseMatrix(DenseMatrix::Identity(d, d)));
    }
    return {t};
}

inline DenseMatrix local_number(const SpaceSignature& block_sig, const std::string& label) {
    return embed(make_boson_ops(block_sig.dim_of(label)).number, label, block_sig).dense();
}

// Target kets mapped by U(t)^+ when the step-4 engine runs in the
// effective frame.
inline std::vector<ProductKet> frame_target(const SystemParams& p, const std::vector<ProductKet>& target, double t,
                                            bool effective) {
    if (!effective) return target;
    std::vector<DenseMatrix> u;
    for (std::size_t j = 0; j < p.n_blocks; ++j)
        u.push_back(effective_frame_unitary(p, block_signature(p, j), t).dense().adjoint());
    auto out = target;
    for (auto& term : out)
        for (std::size_t j = 0; j < term.kets.size(); ++j) term.kets[j] = u[j] * term.kets[j];
    return out;
}

inline ProtocolResult run_factorized(const SystemParams& p, const ProtocolMode& mode, const StepPlan& plan,
                                     std::vector<double> trace_times) {
    ProtocolResult res;
    DenseMatrix rho_in;
    if (mode.ideal_prefix) {
        rho_in = ideal_qubit_input(p);
    } else {
        const auto rho1 = run_step1(p, plan, mode.lossy, mode.integrator);
        rho_in = cavity_input(p, rho1, plan.step2() + plan.step3() + plan.step4(), mode.idle_coupler_decay);
    }
    if (!trace_times.empty()) {
        std::sort(trace_times.begin(), trace_times.end());
        if (!std::binary_search(trace_times.begin(), trace_times.end(), plan.step4())) {
            trace_times.push_back(plan.step4());
            std::sort(trace_times.begin(), trace_times.end());
        }
    }

    std::vector<BlockRun> runs;
    std::vector<const QuantumChannel*> ch;
    const bool uniform = p.uniform_blocks();
    runs.reserve(p.n_blocks);
    for (std::size_t j = 0; j < p.n_blocks; ++j) {
        if (uniform && j > 0) break;
        runs.push_back(run_block(p, j, plan, mode, trace_times));
    }
    auto channel_set = [&](std::function<const QuantumChannel*(const BlockRun&)> pick) {
        std::vector<const QuantumChannel*> v;
        for (std::size_t j = 0; j < p.n_blocks; ++j) v.push_back(pick(runs[uniform ? 0 : j]));
        return v;
    };
    // identical blocks share the channel; relabeling is not needed because
    // the contraction only uses matrix entries
    const auto target = target_product(p, plan);
    const bool effective = mode.step4 == Step4Model::effective;

    auto evaluate = [&](const std::vector<const QuantumChannel*>& chans, const std::vector<ProductKet>& tgt,
                        std::vector<double>& photons_c, std::vector<double>* photons_b) {
        const double f = compose_block_channels(chans, rho_in, tgt);
        photons_c.clear();
        for (std::size_t j = 0; j < p.n_blocks; ++j) {
            const auto& bs = chans[j]->output_signature();
            const auto lbl_c = bs[1].label, lbl_b = bs[2].label;
            photons_c.push_back(
                evaluate_product_observable(chans, rho_in, single_block_observable(chans, j, local_number(bs, lbl_c))).real());
            if (photons_b)
                photons_b->push_back(
                    evaluate_product_observable(chans, rho_in, single_block_observable(chans, j, local_number(bs, lbl_b)))
                        .real());
        }
        return f;
    };

    if (trace_times.empty()) {
        ch = channel_set([](const BlockRun& r) { return &r.channel; });
        res.fidelity = evaluate(ch, target, res.mean_photon_c, &res.mean_photon_b);
    } else {
        for (std::size_t s = 0; s < trace_times.size(); ++s) {
            const auto chans = channel_set([s](const BlockRun& r) { return &r.snapshots[s]; });
            TraceSample ts;
            ts.t = trace_times[s];
            ts.fidelity = evaluate(chans, frame_target(p, target, ts.t, effective), ts.mean_photon_c, nullptr);
            ts.beta_abs = std::abs(alpha_of_t(p, ts.t));
            if (std::abs(ts.t - plan.step4()) < 1e-12) {
                res.fidelity = ts.fidelity;
                std::vector<double> nb;
                evaluate(chans, frame_target(p, target, ts.t, effective), res.mean_photon_c, &nb);
                res.mean_photon_b = nb;
            }
            res.trace.push_back(std::move(ts));
        }
    }
    return res;
}

// Evolves x through one protocol step in which block j's Hamiltonian acts
// for tau[j]; the step lasts max(tau). Segments are split where blocks
// finish, and each block's time-dependent phases keep their own clock.
inline DenseMatrix run_block_step(const SpaceSignature& sig, DenseMatrix x, const std::vector<double>& tau,
                                  const std::function<Hamiltonian(std::size_t)>& block_h,
                                  const std::vector<CollapseOp>& cops,
                                  const std::function<std::optional<Operator>(std::size_t)>& post,
                                  const IntegratorOptions& opt, const std::vector<double>& samples = {},
                                  const SampleObserver& observer = {}) {
    std::vector<double> cuts{0.0};
    for (double t : tau) cuts.push_back(t);
    for (double t : samples) cuts.push_back(t);
    std::sort(cuts.begin(), cuts.end());
    cuts.erase(std::unique(cuts.begin(), cuts.end(), [](double a, double b) { return std::abs(a - b) < 1e-15; }),
               cuts.end());
    std::size_t next_sample = 0;
    auto emit = [&](double t) {
        while (next_sample < samples.size() && samples[next_sample] <= t + 1e-12) {
            if (observer) observer(next_sample, samples[next_sample], x);
            ++next_sample;
        }
    };
    emit(0.0);
    for (std::size_t s = 0; s + 1 < cuts.size(); ++s) {
        const double a = cuts[s], b = cuts[s + 1];
        Hamiltonian h(Operator::zero(sig));
        for (std::size_t j = 0; j < tau.size(); ++j)
            if (tau[j] > a + 1e-15) h += shift_time(block_h(j), a);
        const LindbladGenerator gen(h, cops);
        evolve_operator(gen, x, 0.0, b - a, opt);
        for (std::size_t j = 0; j < tau.size(); ++j)
            if (std::abs(tau[j] - b) < 1e-15 && post) {
                if (auto u = post(j)) {
                    const DenseMatrix ud = u->dense();
                    x = (ud * x * ud.adjoint()).eval();
                }
            }
        emit(b);
    }
    return x;
}

inline ProtocolResult run_brute(const SystemParams& p, const ProtocolMode& mode, const StepPlan& plan,
                                const std::vector<double>& trace_times) {
    ProtocolResult res;
    const auto sig2 = blocks_signature(p, {true, true, false});
    const auto sig4 = blocks_signature(p);
    DenseMatrix x;
    SpaceSignature sig;
    if (mode.ideal_prefix) {
        x = ideal_qubit_input(p);
        sig = qubits_signature(p);
    } else {
        const auto rho1 = run_step1(p, plan, mode.lossy, mode.integrator);
        x = cavity_input(p, rho1, plan.step2() + plan.step3() + plan.step4(), mode.idle_coupler_decay);
        sig = cavity_signature(p);
        std::map<std::string, Vector> pad;
        for (std::size_t j = 0; j < p.n_blocks; ++j) pad[qubit_label(j)] = ket_g();
        x = extend(x, sig, sig2, pad);
        sig = sig2;
        const auto cops = collapse_for(p, sig2, mode.lossy);
        x = run_block_step(
            sig2, std::move(x), plan.t2, [&](std::size_t j) { return Hamiltonian(build_h_i2(p, sig2, {j})); }, cops, {},
            mode.integrator);
        x = run_block_step(
            sig2, std::move(x), plan.t3, [&](std::size_t j) { return Hamiltonian(build_h_i3(p, sig2, {j})); }, cops, {},
            mode.integrator);
    }
    {
        std::map<std::string, Vector> pad;
        for (std::size_t j = 0; j < p.n_blocks; ++j) {
            pad[nve_label(j)] = fock_ket(p.N_b, 0);
            pad[cavity_label(j)] = fock_ket(p.N_c, 0);
        }
        x = extend(x, sig, sig4, pad);
        sig = sig4;
    }
    const bool effective = mode.step4 == Step4Model::effective;
    const auto target = target_product(p, plan);
    const Vector psi_id = expand_product(target);
    const auto cops = collapse_for(p, sig4, mode.lossy);
    std::vector<double> tau = plan.t4;
    const bool tracing = !trace_times.empty();
    if (tracing)
        for (auto& t : tau) t = std::max(t, trace_times.back());
    auto block_h = [&](std::size_t j) {
        return effective ? build_h_eff_td(p, sig4, {j}) : build_h_i4_td(p, sig4, {j});
    };
    auto post = [&](std::size_t j) -> std::optional<Operator> {
        if (!effective || tracing) return std::nullopt;
        return effective_frame_unitary(p, sig4, plan.t4[j], {j});
    };
    auto photons = [&](const DenseMatrix& r, const std::string& prefix) {
        std::vector<double> v;
        for (std::size_t j = 0; j < p.n_blocks; ++j)
            v.push_back(mean_photon(r, sig4, prefix + std::to_string(j + 1)));
        return v;
    };
    SampleObserver observer;
    if (tracing) {
        observer = [&](std::size_t, double t, const DenseMatrix& r) {
            Vector tgt = psi_id;
            if (effective) tgt = effective_frame_unitary(p, sig4, t).dense().adjoint() * psi_id;
            TraceSample ts;
            ts.t = t;
            ts.fidelity = std::sqrt(std::clamp(tgt.dot(r * tgt).real(), 0.0, 1.0));
            ts.beta_abs = std::abs(alpha_of_t(p, t));
            ts.mean_photon_c = photons(r, "c");
            res.trace.push_back(std::move(ts));
        };
    }
    x = run_block_step(sig4, std::move(x), tau, block_h, cops, post, mode.integrator, trace_times, observer);
    if (tracing) {
        for (const auto& ts : res.trace)
            if (std::abs(ts.t - plan.step4()) < 1e-12) res.fidelity = ts.fidelity;
    } else {
        res.fidelity = std::sqrt(std::clamp(psi_id.dot(x * psi_id).real(), 0.0, 1.0));
    }
    res.mean_photon_c = photons(x, "c");
    res.mean_photon_b = photons(x, "b");
    return res;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Isolated step checks

struct StepFidelity {
    double fidelity = 0.0;
    double duration = 0.0;
};

// Runs step k (1..3) alone from the ideal output of the previous step and
// compares with its ideal output.
inline StepFidelity step_fidelity(const SystemParams& p, int k, bool lossy = true, const IntegratorOptions& opt = {}) {
    StepPlan plan;
    plan.t1 = kPi / (2.0 * std::sqrt(static_cast<double>(p.n_blocks)) * p.g_A);
    for (std::size_t j = 0; j < p.n_blocks; ++j) {
        plan.t2.push_back(kPi / (2.0 * p.block(j).g_r));
        plan.t3.push_back(kPi / (4.0 * p.block(j).Omega_eg));
    }
    StepFidelity r;
    switch (k) {
        case 1: {
            const auto rho = detail::run_step1(p, plan, lossy, opt);
            r.fidelity = fidelity_pure_target(rho, ideal_state_after_step(1, p, plan));
            r.duration = plan.t1;
            return r;
        }
        case 2: {
            const auto sig = blocks_signature(p, {true, true, false});
            const Vector w = w_vector(p.n_blocks, p.N_c, 1, 0);
            std::map<std::string, Vector> pad;
            for (std::size_t j = 0; j < p.n_blocks; ++j) pad[qubit_label(j)] = ket_g();
            const StateVector in = extend(StateVector(cavity_signature(p), w), sig, pad);
            std::map<std::string, Vector> vac;
            for (std::size_t j = 0; j < p.n_blocks; ++j) vac[cavity_label(j)] = fock_ket(p.N_c, 0);
            const StateVector target(sig, extend(ideal_state_after_step(2, p, plan), sig, vac).amplitudes());
            DenseMatrix x = in.amplitudes() * in.amplitudes().adjoint();
            x = detail::run_block_step(
                sig, std::move(x), plan.t2, [&](std::size_t j) { return Hamiltonian(build_h_i2(p, sig, {j})); },
                detail::collapse_for(p, sig, lossy), {}, opt);
            r.fidelity = fidelity_pure_target(DensityMatrix(sig, x, DensityMatrix::Trace::unit, 1e-6, 1e-6), target);
            r.duration = plan.step2();
            return r;
        }
        case 3: {
            const auto sig = qubits_signature(p);
            const Vector w = ideal_state_after_step(2, p, plan).amplitudes();
            DenseMatrix x = w * w.adjoint();
            x = detail::run_block_step(
                sig, std::move(x), plan.t3, [&](std::size_t j) { return Hamiltonian(build_h_i3(p, sig, {j})); },
                detail::collapse_for(p, sig, lossy), {}, opt);
            r.fidelity = fidelity_pure_target(DensityMatrix(sig, x, DensityMatrix::Trace::unit, 1e-6, 1e-6),
                                              ideal_state_after_step(3, p, plan));
            r.duration = plan.step3();
            return r;
        }
        default:
            throw Error("step_fidelity: step must be 1, 2 or 3");
    }
}

// Full four-step run. With `trace_times` (step-4 local times) the result
// also carries F(t), |alpha(t)| and the cavity photon numbers sampled
// during step 4; the step then runs until the last sample.
inline ProtocolResult run_protocol(const SystemParams& p, const ProtocolMode& mode,
                                   const std::vector<double>& trace_times = {}) {
    p.validate();
    const auto start = std::chrono::steady_clock::now();
    const SystemParams q = mode.lossy ? p : p.lossless();
    const StepPlan plan = make_step_plan(q);
    spdlog::info("protocol ({}): t0 = {:.4g} ns, t4 = {:.6g} us, |beta| = {:.6g}", mode.describe(), plan.t0() * 1e3,
                 plan.step4(), std::abs(plan.beta[0]));
    ProtocolResult res = mode.engine == Engine::factorized ? detail::run_factorized(q, mode, plan, trace_times)
                                                           : detail::run_brute(q, mode, plan, trace_times);
    res.mode = mode;
    res.plan = plan;
    res.beta = plan.beta;
    if (mode.step_fidelities)
        for (int k = 1; k <= 3; ++k) res.step_fidelities.push_back(step_fidelity(q, k, mode.lossy, mode.integrator).fidelity);
    res.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return res;
}

}  // namespace nvecs
