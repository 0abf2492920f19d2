#pragma once

// Time evolution: exact propagators, a Dormand-Prince 5(4) integrator for
// Lindblad and Schrodinger dynamics, channel extraction and block-product
// contraction.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <spdlog/spdlog.h>

#include "nvecs/errors.hpp"
#include "nvecs/hamiltonian.hpp"
#include "nvecs/parallel.hpp"
#include "nvecs/tensor_core.hpp"

namespace nvecs {

struct IntegratorOptions {
    double rel_tol = 1e-8;
    double abs_tol = 1e-10;
    double dt_hint = 0.0;     // initial (or fixed) step; 0 picks one automatically
    double max_step = 0.0;    // 0: (2 pi / w_max) / 20 from the Hamiltonian harmonics
    bool fixed_step = false;  // no error control, step = dt_hint
    double trace_tol = 1e-6;
    bool check_trace = true;
    std::size_t max_steps = 20'000'000;
};

struct IntegratorStats {
    std::size_t accepted = 0;
    std::size_t rejected = 0;
    std::size_t rhs_evals = 0;
    double min_step = 0.0;
    double max_step = 0.0;
};

// Called with (sample index, time, state) whenever the integrator reaches a
// requested sample time.
using SampleObserver = std::function<void(std::size_t, double, const DenseMatrix&)>;

namespace detail {

// Dormand-Prince 5(4) tableau.
struct Dopri5 {
    static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
    static constexpr double a21 = 1.0 / 5;
    static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
    static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
    static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
    static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                            a65 = -5103.0 / 18656;
    static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
    // b - b*, the embedded 4th-order difference
    static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                            e6 = 22.0 / 525, e7 = -1.0 / 40;
};

}  // namespace detail

// Integrates y' = f(t, y) from t0 to t1 in place. f(t, y, out) writes into
// `out`. `samples` must be sorted and lie in [t0, t1].
template <class Rhs>
IntegratorStats integrate_dopri5(Rhs&& f, DenseMatrix& y, double t0, double t1, const IntegratorOptions& opt,
                                 const std::vector<double>& samples = {}, const SampleObserver& observer = {}) {
    using T = detail::Dopri5;
    IntegratorStats st;
    const double span = t1 - t0;
    if (!(span >= 0.0)) throw IntegrationError("integration interval is reversed", t0);
    std::size_t next_sample = 0;
    auto emit = [&](double t) {
        while (next_sample < samples.size() && samples[next_sample] <= t + 1e-12 * std::max(1.0, std::abs(t))) {
            if (observer) observer(next_sample, samples[next_sample], y);
            ++next_sample;
        }
    };
    emit(t0);
    if (span == 0.0) return st;

    const double max_step = opt.max_step > 0.0 ? std::min(opt.max_step, span) : span;
    DenseMatrix k1, k2, k3, k4, k5, k6, k7, arg;
    f(t0, y, k1);
    ++st.rhs_evals;

    double h;
    if (opt.fixed_step) {
        if (!(opt.dt_hint > 0.0)) throw IntegrationError("fixed-step mode needs dt_hint > 0", t0);
        h = opt.dt_hint;
    } else if (opt.dt_hint > 0.0) {
        h = std::min(opt.dt_hint, max_step);
    } else {
        const double fy = k1.norm(), ny = y.norm();
        h = (fy > 0.0 && ny > 0.0) ? 0.01 * ny / fy : max_step;
        h = std::min(h, max_step);
    }
    st.min_step = h;

    double t = t0;
    while (t < t1) {
        if (st.accepted + st.rejected >= opt.max_steps)
            throw IntegrationError("step budget exhausted", t);
        const double stop = next_sample < samples.size() ? std::min(t1, samples[next_sample]) : t1;
        const double h_prop = h;
        bool clipped = false;
        if (t + h >= stop - 1e-12 * std::max(1.0, std::abs(stop))) {
            h = stop - t;
            clipped = true;
        }
        if (h < 1e-14 * std::max(1.0, std::abs(t)) && !clipped)
            throw IntegrationError("step size underflow (h = " + std::to_string(h) + ")", t);

        arg = y + h * T::a21 * k1;
        f(t + T::c2 * h, arg, k2);
        arg = y + h * (T::a31 * k1 + T::a32 * k2);
        f(t + T::c3 * h, arg, k3);
        arg = y + h * (T::a41 * k1 + T::a42 * k2 + T::a43 * k3);
        f(t + T::c4 * h, arg, k4);
        arg = y + h * (T::a51 * k1 + T::a52 * k2 + T::a53 * k3 + T::a54 * k4);
        f(t + T::c5 * h, arg, k5);
        arg = y + h * (T::a61 * k1 + T::a62 * k2 + T::a63 * k3 + T::a64 * k4 + T::a65 * k5);
        f(t + h, arg, k6);
        arg = y + h * (T::b1 * k1 + T::b3 * k3 + T::b4 * k4 + T::b5 * k5 + T::b6 * k6);  // y_new
        f(t + h, arg, k7);
        st.rhs_evals += 6;

        if (opt.fixed_step) {
            y.swap(arg);
            k1.swap(k7);
            t = clipped ? stop : t + h;
            ++st.accepted;
            emit(t);
            h = h_prop;
            continue;
        }

        k2 = h * (T::e1 * k1 + T::e3 * k3 + T::e4 * k4 + T::e5 * k5 + T::e6 * k6 + T::e7 * k7);
        const double err = k2.norm();
        const double scale = opt.rel_tol * std::max(y.norm(), arg.norm()) + opt.abs_tol;
        const double ratio = err / scale;

        if (ratio <= 1.0) {
            y.swap(arg);
            k1.swap(k7);
            t = clipped ? stop : t + h;
            ++st.accepted;
            st.min_step = std::min(st.min_step, h);
            st.max_step = std::max(st.max_step, h);
            emit(t);
            const double fac = ratio == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(ratio, -0.2), 0.2, 5.0);
            h = std::min(h * fac, max_step);
            if (clipped) h = std::max(h, std::min(h_prop, max_step));
        } else {
            ++st.rejected;
            h *= std::clamp(0.9 * std::pow(ratio, -0.2), 0.1, 0.9);
            if (h < 1e-14 * std::max(1.0, std::abs(t)))
                throw IntegrationError("step size underflow (h = " + std::to_string(h) + ")", t);
        }
    }
    return st;
}

// ---------------------------------------------------------------------------
// Lindblad generator

// Y = X S for dense X and column-compressed S, as column axpys.
inline void right_multiply(const DenseMatrix& x, const SparseMatrix& s, DenseMatrix& y) {
    y.resize(x.rows(), s.cols());
    const auto* outer = s.outerIndexPtr();
    const auto* inner = s.innerIndexPtr();
    const cplx* val = s.valuePtr();
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
        auto col = y.col(j);
        col.setZero();
        for (auto n = outer[j]; n < outer[j + 1]; ++n) col += val[n] * x.col(inner[n]);
    }
}

// Holds G(t) = K(t)^+ with K = -i H(t) - 1/2 sum L^+ L in a fixed sparsity
// pattern, so per-stage assembly is a value scatter. All products are taken
// from the right (X G), which keeps them column-contiguous.
class LindbladGenerator {
public:
    LindbladGenerator(const Hamiltonian& h, const std::vector<CollapseOp>& collapse) : sig_(h.signature()) {
        SparseMatrix k0 = cplx(0.0, -1.0) * h.constant().sparse();
        for (const auto& c : collapse) {
            require_same_signature(sig_, c.op.signature(), "LindbladGenerator");
            if (c.rate < 0.0) throw Error("negative collapse rate for " + c.name);
            if (c.rate == 0.0) continue;
            SparseMatrix l = std::sqrt(c.rate) * c.op.sparse();
            l.prune(cplx(0.0));
            const SparseMatrix ladj = l.adjoint();
            k0 -= 0.5 * SparseMatrix(ladj * l);
            Jump jump;
            if (!monomial(l, jump)) {
                jump.adj = ladj;
                jump.adj.makeCompressed();
            }
            jumps_.push_back(std::move(jump));
        }
        k0.prune(cplx(0.0));
        const SparseMatrix g0 = k0.adjoint();
        std::vector<SparseMatrix> terms;
        for (const auto& term : h.terms()) {
            SparseMatrix m = cplx(0.0, -1.0) * term.op.sparse();
            m.prune(cplx(0.0));
            terms.push_back(m.adjoint());
            freqs_.push_back(term.frequency);
        }
        SparseMatrix pattern = pattern_of(g0);
        for (const auto& m : terms) pattern = SparseMatrix(pattern + pattern_of(m));
        pattern.makeCompressed();
        pattern_ = pattern;
        g0_vals_ = scatter(pattern_, g0);
        for (const auto& m : terms) {
            term_maps_.push_back(positions(pattern_, m));
            term_vals_.push_back(values_of(m));
        }
        static_ = terms.empty();
    }

    const SpaceSignature& signature() const noexcept { return sig_; }
    bool is_static() const noexcept { return static_; }
    bool has_jumps() const noexcept { return !jumps_.empty(); }

    double max_frequency() const {
        double w = 0.0;
        for (double f : freqs_) w = std::max(w, std::abs(f));
        return w;
    }

    const SparseMatrix& pattern() const noexcept { return pattern_; }

    // K(t)^+ written into `g`, which must share pattern().
    void assemble(double t, SparseMatrix& g) const {
        cplx* v = g.valuePtr();
        std::copy(g0_vals_.begin(), g0_vals_.end(), v);
        for (std::size_t i = 0; i < term_maps_.size(); ++i) {
            const cplx c = std::exp(-kI * freqs_[i] * t);  // conj(e^{i w t})
            const auto& map = term_maps_[i];
            const auto& vals = term_vals_[i];
            for (std::size_t n = 0; n < map.size(); ++n) v[map[n]] += c * vals[n];
        }
    }

    struct Workspace {
        SparseMatrix g;
        DenseMatrix a, b, c;
        bool ready = false;
    };

    // d rho/dt = K rho + rho K^+ + sum L rho L^+. With `hermitian` set, rho
    // is assumed Hermitian and K rho is taken as (rho K^+)^+.
    void lindblad(double t, const DenseMatrix& rho, DenseMatrix& out, Workspace& ws, bool hermitian) const {
        prepare(t, ws);
        right_multiply(rho, ws.g, ws.a);  // rho K^+
        if (hermitian) {
            out = ws.a + ws.a.adjoint();
        } else {
            ws.b = rho.adjoint();
            right_multiply(ws.b, ws.g, ws.c);  // rho^+ K^+ = (K rho)^+
            out = ws.a + ws.c.adjoint();
        }
        for (const auto& j : jumps_) {
            if (!j.rows.empty()) {
                // L rho L^+ (r, r') = l_r conj(l_r') rho(src_r, src_r')
                const auto n = j.rows.size();
                for (std::size_t b = 0; b < n; ++b) {
                    const cplx wb = std::conj(j.vals[b]);
                    const cplx* x = rho.col(j.src[b]).data();
                    cplx* o = out.col(j.rows[b]).data();
                    for (std::size_t a = 0; a < n; ++a) o[j.rows[a]] += j.vals[a] * wb * x[j.src[a]];
                }
            } else {
                right_multiply(rho, j.adj, ws.a);  // rho L^+
                ws.b = ws.a.adjoint();             // L rho^+
                right_multiply(ws.b, j.adj, ws.c); // L rho^+ L^+
                if (hermitian)
                    out += ws.c;
                else
                    out += ws.c.adjoint();
            }
        }
    }

    // -i H(t) psi for column states, via (psi^+ K^+)^+.
    void schrodinger(double t, const DenseMatrix& psi, DenseMatrix& out, Workspace& ws) const {
        prepare(t, ws);
        ws.b = psi.adjoint();
        right_multiply(ws.b, ws.g, ws.c);
        out = ws.c.adjoint();
    }

private:
    // Jump operators with at most one entry per row and column (ladder,
    // lowering and diagonal operators) are kept as (row, source column,
    // value) triples; anything else as a sparse adjoint.
    struct Jump {
        SparseMatrix adj;
        std::vector<Eigen::Index> rows, src;
        std::vector<cplx> vals;
    };

    static bool monomial(const SparseMatrix& l, Jump& j) {
        std::vector<int> row_count(static_cast<std::size_t>(l.rows()), 0);
        for (Eigen::Index c = 0; c < l.outerSize(); ++c) {
            int col_count = 0;
            for (SparseMatrix::InnerIterator it(l, c); it; ++it) {
                if (++col_count > 1 || ++row_count[static_cast<std::size_t>(it.row())] > 1) {
                    j.rows.clear();
                    j.src.clear();
                    j.vals.clear();
                    return false;
                }
                j.rows.push_back(it.row());
                j.src.push_back(c);
                j.vals.push_back(it.value());
            }
        }
        return true;
    }

    void prepare(double t, Workspace& ws) const {
        if (ws.g.rows() == 0) ws.g = pattern_;
        if (!static_ || !ws.ready) {
            assemble(t, ws.g);
            ws.ready = true;
        }
    }

    static SparseMatrix pattern_of(const SparseMatrix& m) {
        SparseMatrix p = m;
        for (Eigen::Index i = 0; i < p.nonZeros(); ++i) p.valuePtr()[i] = 1.0;
        return p;
    }

    static std::vector<std::size_t> positions(const SparseMatrix& pattern, const SparseMatrix& m) {
        std::vector<std::size_t> out;
        out.reserve(static_cast<std::size_t>(m.nonZeros()));
        const auto* outer = pattern.outerIndexPtr();
        const auto* inner = pattern.innerIndexPtr();
        for (Eigen::Index c = 0; c < m.outerSize(); ++c)
            for (SparseMatrix::InnerIterator it(m, c); it; ++it) {
                const auto* lo = inner + outer[c];
                const auto* hi = inner + outer[c + 1];
                const auto* pos = std::lower_bound(lo, hi, static_cast<int>(it.row()));
                out.push_back(static_cast<std::size_t>(pos - inner));
            }
        return out;
    }

    static std::vector<cplx> values_of(const SparseMatrix& m) {
        std::vector<cplx> v;
        for (Eigen::Index c = 0; c < m.outerSize(); ++c)
            for (SparseMatrix::InnerIterator it(m, c); it; ++it) v.push_back(it.value());
        return v;
    }

    static std::vector<cplx> scatter(const SparseMatrix& pattern, const SparseMatrix& m) {
        std::vector<cplx> v(static_cast<std::size_t>(pattern.nonZeros()), cplx(0.0));
        const auto pos = positions(pattern, m);
        const auto vals = values_of(m);
        for (std::size_t i = 0; i < pos.size(); ++i) v[pos[i]] += vals[i];
        return v;
    }

    SpaceSignature sig_;
    SparseMatrix pattern_;
    std::vector<cplx> g0_vals_;
    std::vector<std::vector<std::size_t>> term_maps_;
    std::vector<std::vector<cplx>> term_vals_;
    std::vector<double> freqs_;
    std::vector<Jump> jumps_;
    bool static_ = true;
};

inline IntegratorOptions with_step_ceiling(IntegratorOptions opt, double max_frequency) {
    if (opt.max_step <= 0.0 && max_frequency > 0.0) opt.max_step = (kTwoPi / max_frequency) / 20.0;
    return opt;
}

// Evolves an operator (density matrix or any |u><v| input) from t0 to t1.
inline IntegratorStats evolve_operator(const LindbladGenerator& gen, DenseMatrix& x, double t0, double t1,
                                       const IntegratorOptions& options, const std::vector<double>& samples = {},
                                       const SampleObserver& observer = {}) {
    const bool hermitian = x.rows() == 0 || (x - x.adjoint()).cwiseAbs().maxCoeff() == 0.0;
    const IntegratorOptions opt = with_step_ceiling(options, gen.max_frequency());
    LindbladGenerator::Workspace ws;
    const cplx tr0 = x.trace();
    auto rhs = [&](double t, const DenseMatrix& r, DenseMatrix& out) { gen.lindblad(t, r, out, ws, hermitian); };
    auto st = integrate_dopri5(rhs, x, t0, t1, opt, samples, observer);
    if (hermitian) x = (0.5 * (x + x.adjoint())).eval();
    if (opt.check_trace && std::abs(x.trace() - tr0) > opt.trace_tol)
        throw AccuracyError("trace drifted by " + std::to_string(std::abs(x.trace() - tr0)) + " over [" +
                            std::to_string(t0) + ", " + std::to_string(t1) + "] us");
    return st;
}

// ---------------------------------------------------------------------------
// Exact propagation for static Hermitian Hamiltonians

inline DenseMatrix exact_propagator(const Operator& h, double t) {
    if (!h.is_hermitian(1e-12))
        throw Error("propagate_exact: Hamiltonian is not Hermitian (deviation " +
                    std::to_string(h.max_abs_deviation_from_hermitian()) + ")");
    DenseMatrix m = h.dense();
    m = (0.5 * (m + m.adjoint())).eval();
    Eigen::SelfAdjointEigenSolver<DenseMatrix> es(m);
    const Vector phases = (cplx(0.0, -t) * es.eigenvalues().cast<cplx>()).array().exp();
    return es.eigenvectors() * phases.asDiagonal() * es.eigenvectors().adjoint();
}

inline StateVector propagate_exact(const Operator& h, const StateVector& psi, double t) {
    require_same_signature(h.signature(), psi.signature(), "propagate_exact");
    Vector v = exact_propagator(h, t) * psi.amplitudes();
    return StateVector(psi.signature(), std::move(v),
                       psi.is_normalized() ? Normalization::normalized : Normalization::unnormalized);
}

inline DensityMatrix propagate_exact(const Operator& h, const DensityMatrix& rho, double t) {
    require_same_signature(h.signature(), rho.signature(), "propagate_exact");
    const DenseMatrix u = exact_propagator(h, t);
    DenseMatrix r = u * rho.data() * u.adjoint();
    r = (0.5 * (r + r.adjoint())).eval();
    return DensityMatrix(rho.signature(), std::move(r),
                         rho.unit_trace() ? DensityMatrix::Trace::unit : DensityMatrix::Trace::recorded, 1e-8, 1e-6);
}

// ---------------------------------------------------------------------------
// Tasks

struct Observable {
    std::string name;
    Operator op;
};

struct EvolutionTask {
    Hamiltonian hamiltonian;
    std::vector<CollapseOp> collapse_ops;
    std::variant<StateVector, DensityMatrix> initial;
    double t_final = 0.0;
    double dt_hint = 0.0;
    std::vector<Observable> record;
    double sample_interval = 0.0;  // 0 records the two endpoints only
    IntegratorOptions options;
};

struct TimeSeries {
    std::vector<double> times;
    std::map<std::string, std::vector<double>> values;
};

struct EvolutionResult {
    DensityMatrix state;
    TimeSeries series;
    IntegratorStats stats;
};

inline std::vector<double> sample_grid(double t_final, double interval) {
    std::vector<double> out{0.0};
    if (interval > 0.0) {
        const auto n = static_cast<std::size_t>(std::floor(t_final / interval + 1e-9));
        for (std::size_t i = 1; i <= n; ++i) out.push_back(std::min(t_final, static_cast<double>(i) * interval));
    }
    if (out.back() < t_final) out.push_back(t_final);
    return out;
}

inline DensityMatrix as_density(const std::variant<StateVector, DensityMatrix>& s) {
    if (const auto* psi = std::get_if<StateVector>(&s)) return DensityMatrix::from_pure(*psi);
    return std::get<DensityMatrix>(s);
}

inline EvolutionResult evolve_lindblad(const EvolutionTask& task) {
    if (!(task.t_final > 0.0)) throw Error("evolve_lindblad: t_final must be > 0");
    if (task.dt_hint > task.t_final) throw Error("evolve_lindblad: dt_hint exceeds t_final");
    const DensityMatrix rho0 = as_density(task.initial);
    require_same_signature(task.hamiltonian.signature(), rho0.signature(), "evolve_lindblad");
    for (const auto& obs : task.record) require_same_signature(rho0.signature(), obs.op.signature(), "evolve_lindblad");

    const LindbladGenerator gen(task.hamiltonian, task.collapse_ops);
    IntegratorOptions opt = task.options;
    if (task.dt_hint > 0.0) opt.dt_hint = task.dt_hint;

    EvolutionResult res;
    res.series.times = sample_grid(task.t_final, task.sample_interval);
    std::vector<DenseMatrix> obs_dense;
    for (const auto& o : task.record) {
        obs_dense.push_back(o.op.dense());
        res.series.values[o.name].assign(res.series.times.size(), 0.0);
    }
    SampleObserver observer = [&](std::size_t i, double, const DenseMatrix& r) {
        for (std::size_t k = 0; k < obs_dense.size(); ++k)
            res.series.values[task.record[k].name][i] = (obs_dense[k] * r).trace().real();
    };
    DenseMatrix x = rho0.data();
    res.stats = evolve_operator(gen, x, 0.0, task.t_final, opt, res.series.times, observer);
    res.state = DensityMatrix(rho0.signature(), std::move(x),
                              rho0.unit_trace() ? DensityMatrix::Trace::unit : DensityMatrix::Trace::recorded,
                              opt.trace_tol, 1e-6);
    return res;
}

inline StateVector evolve_schrodinger(const Hamiltonian& h, const StateVector& psi, double t_final,
                                      const IntegratorOptions& options = {}) {
    require_same_signature(h.signature(), psi.signature(), "evolve_schrodinger");
    const LindbladGenerator gen(h, {});
    const IntegratorOptions opt = with_step_ceiling(options, gen.max_frequency());
    LindbladGenerator::Workspace ws;
    DenseMatrix y = psi.amplitudes();
    auto rhs = [&](double t, const DenseMatrix& v, DenseMatrix& out) { gen.schrodinger(t, v, out, ws); };
    integrate_dopri5(rhs, y, 0.0, t_final, opt);
    const double drift = std::abs(y.norm() - psi.norm());
    if (opt.check_trace && drift > opt.trace_tol)
        throw AccuracyError("norm drifted by " + std::to_string(drift));
    return StateVector(psi.signature(), Vector(y.col(0)), Normalization::unnormalized);
}

// Tr(n_mode rho).
inline double mean_photon(const DenseMatrix& rho, const SpaceSignature& sig, const std::string& label) {
    const auto idx = sig.index_of(label);
    std::vector<double> diag(sig.total_dim());
    for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = static_cast<double>(sig.digits(i)[idx]);
    return diagonal_expectation(rho, diag);
}

inline double mean_photon(const DensityMatrix& rho, const std::string& label) {
    return mean_photon(rho.data(), rho.signature(), label);
}

// ---------------------------------------------------------------------------
// Staged evolution

// One segment of a piecewise protocol. Factors of `hamiltonian.signature()`
// missing from the incoming state are padded with the kets in `padding`.
struct EvolutionStage {
    std::string name;
    Hamiltonian hamiltonian;
    std::vector<CollapseOp> collapse_ops;
    double duration = 0.0;
    std::map<std::string, Vector> padding;
    std::optional<Operator> post_unitary;  // X -> U X U^+ after the stage
    std::vector<double> samples;           // local sample times for `observer`
};

struct StageObserver {
    std::function<void(std::size_t stage, std::size_t sample, double t, const DenseMatrix& x)> fn;
};

inline DenseMatrix run_stages(const std::vector<EvolutionStage>& stages, DenseMatrix x, SpaceSignature sig,
                              const IntegratorOptions& opt, SpaceSignature* out_sig = nullptr,
                              const StageObserver& observer = {}) {
    for (std::size_t s = 0; s < stages.size(); ++s) {
        const auto& st = stages[s];
        const auto& to = st.hamiltonian.signature();
        if (!(sig == to)) {
            x = extend(x, sig, to, st.padding);
            sig = to;
        }
        if (st.duration > 0.0) {
            const LindbladGenerator gen(st.hamiltonian, st.collapse_ops);
            SampleObserver obs;
            if (observer.fn && !st.samples.empty())
                obs = [&](std::size_t i, double t, const DenseMatrix& y) { observer.fn(s, i, t, y); };
            evolve_operator(gen, x, 0.0, st.duration, opt, st.samples, obs);
        }
        if (st.post_unitary) {
            require_same_signature(sig, st.post_unitary->signature(), "run_stages");
            const SparseMatrix u = st.post_unitary->sparse();
            DenseMatrix ux = u * x;
            x = (u * ux.adjoint()).adjoint();
        }
    }
    if (out_sig) *out_sig = sig;
    return x;
}

// Shifts the time origin: H'(t) = H(t + t0).
inline Hamiltonian shift_time(const Hamiltonian& h, double t0) {
    Hamiltonian out(h.constant());
    for (const auto& term : h.terms()) out.add_term(term.op * std::exp(kI * term.frequency * t0), term.frequency);
    return out;
}

// ---------------------------------------------------------------------------
// Channels

// Completely positive map known through its action on |u_i><u_k| for a
// finite set of input kets.
class QuantumChannel {
public:
    QuantumChannel() = default;

    QuantumChannel(SpaceSignature input_sig, std::vector<Vector> input_kets, SpaceSignature output_sig,
                   std::vector<DenseMatrix> outputs)
        : in_sig_(std::move(input_sig)), in_(std::move(input_kets)), out_sig_(std::move(output_sig)),
          out_(std::move(outputs)) {
        if (out_.size() != in_.size() * in_.size()) throw DimensionError("QuantumChannel: output count mismatch");
        const auto d = static_cast<Eigen::Index>(out_sig_.total_dim());
        for (const auto& o : out_)
            if (o.rows() != d || o.cols() != d) throw DimensionError("QuantumChannel: output shape mismatch");
    }

    std::size_t input_size() const noexcept { return in_.size(); }
    const std::vector<Vector>& input_kets() const noexcept { return in_; }
    const SpaceSignature& input_signature() const noexcept { return in_sig_; }
    const SpaceSignature& output_signature() const noexcept { return out_sig_; }

    // E(|u_i><u_k|)
    const DenseMatrix& output(std::size_t i, std::size_t k) const { return out_.at(i * in_.size() + k); }

    // E(sum c_ik |u_i><u_k|)
    DenseMatrix apply(const DenseMatrix& coeffs) const {
        const auto n = static_cast<Eigen::Index>(in_.size());
        if (coeffs.rows() != n || coeffs.cols() != n) throw DimensionError("QuantumChannel::apply: coefficient shape");
        const auto d = static_cast<Eigen::Index>(out_sig_.total_dim());
        DenseMatrix r = DenseMatrix::Zero(d, d);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index k = 0; k < n; ++k)
                if (coeffs(i, k) != cplx(0.0)) r += coeffs(i, k) * output(static_cast<std::size_t>(i), static_cast<std::size_t>(k));
        return r;
    }

    double max_trace_deviation() const {
        double dev = 0.0;
        for (std::size_t i = 0; i < in_.size(); ++i)
            for (std::size_t k = 0; k < in_.size(); ++k) {
                const cplx expect = in_[k].dot(in_[i]);  // Tr |u_i><u_k|
                dev = std::max(dev, std::abs(output(i, k).trace() - expect));
            }
        return dev;
    }

    double max_hermiticity_deviation() const {
        double dev = 0.0;
        for (std::size_t i = 0; i < in_.size(); ++i)
            for (std::size_t k = 0; k < in_.size(); ++k)
                dev = std::max(dev, (output(i, k) - output(k, i).adjoint()).cwiseAbs().maxCoeff());
        return dev;
    }

    static QuantumChannel identity(const SpaceSignature& sig, const std::vector<Vector>& kets) {
        std::vector<DenseMatrix> out;
        for (const auto& u : kets)
            for (const auto& v : kets) out.push_back(u * v.adjoint());
        return QuantumChannel(sig, kets, sig, std::move(out));
    }

private:
    SpaceSignature in_sig_;
    std::vector<Vector> in_;
    SpaceSignature out_sig_;
    std::vector<DenseMatrix> out_;
};

// Maps an input operator (on the channel input signature) to the output. The
// indices identify the basis pair being evolved.
using ChannelEvolution = std::function<DenseMatrix(const DenseMatrix& input, std::size_t i, std::size_t k)>;

// Runs `evolve` for |u_i><u_k| with i <= k and fills the lower half by
// Hermitian conjugation.
inline QuantumChannel extract_channel(const ChannelEvolution& evolve, const SpaceSignature& input_sig,
                                      const std::vector<Vector>& input_kets, const SpaceSignature& output_sig,
                                      std::size_t jobs = 1) {
    const std::size_t n = input_kets.size();
    for (const auto& u : input_kets)
        if (static_cast<std::size_t>(u.size()) != input_sig.total_dim())
            throw DimensionError("extract_channel: input ket does not match " + input_sig.describe());
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = i; k < n; ++k) pairs.emplace_back(i, k);
    std::vector<DenseMatrix> out(n * n);
    parallel_for(pairs.size(), jobs, [&](std::size_t p) {
        const auto [i, k] = pairs[p];
        DenseMatrix x = input_kets[i] * input_kets[k].adjoint();
        out[i * n + k] = evolve(x, i, k);
    });
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < i; ++k) out[i * n + k] = out[k * n + i].adjoint();
    return QuantumChannel(input_sig, input_kets, output_sig, std::move(out));
}

// ---------------------------------------------------------------------------
// Block-product contraction

// sum_{N,N'} rho[N,N'] prod_j M_j[n_j, n'_j] where N = (n_1, ..., n_B) is
// block-major (first block slowest) and M_j is d_j x d_j.
inline cplx contract_product(const DenseMatrix& rho, const std::vector<DenseMatrix>& m) {
    std::size_t d = 1;
    for (const auto& mj : m) d *= static_cast<std::size_t>(mj.rows());
    if (static_cast<std::size_t>(rho.rows()) != d || rho.rows() != rho.cols())
        throw DimensionError("contract_product: input dimension " + std::to_string(rho.rows()) + " vs " +
                             std::to_string(d));
    // fold one block at a time: vec(rho) -> contract the last block's indices
    // into a vector over (rest, rest').
    DenseMatrix cur = rho;
    for (std::size_t b = m.size(); b-- > 0;) {
        const auto db = m[b].rows();
        const auto rest = cur.rows() / db;
        DenseMatrix next = DenseMatrix::Zero(rest, rest);
        for (Eigen::Index r = 0; r < rest; ++r)
            for (Eigen::Index c = 0; c < rest; ++c) {
                cplx s = 0.0;
                for (Eigen::Index i = 0; i < db; ++i)
                    for (Eigen::Index k = 0; k < db; ++k) s += cur(r * db + i, c * db + k) * m[b](i, k);
                next(r, c) = s;
            }
        cur.swap(next);
    }
    return cur(0, 0);
}

// A product operator sum: sum_t weight_t * (x)_j factors_t[j].
struct ProductTerm {
    cplx weight{1.0};
    std::vector<DenseMatrix> factors;
};

// Tr(F E(|u_i><u_k|)) for every basis pair.
inline DenseMatrix channel_functional(const QuantumChannel& ch, const DenseMatrix& f) {
    const auto n = static_cast<Eigen::Index>(ch.input_size());
    DenseMatrix m(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index k = 0; k < n; ++k)
            m(i, k) = (f.transpose().array() * ch.output(static_cast<std::size_t>(i), static_cast<std::size_t>(k)).array()).sum();
    return m;
}

// Tr[(sum_t w_t (x)_j F_tj) (x)_j E_j (rho)] without forming the global state.
inline cplx evaluate_product_observable(const std::vector<const QuantumChannel*>& channels, const DenseMatrix& rho_in,
                                        const std::vector<ProductTerm>& terms) {
    cplx total = 0.0;
    for (const auto& term : terms) {
        if (term.factors.size() != channels.size()) throw DimensionError("product term has wrong block count");
        std::vector<DenseMatrix> m;
        for (std::size_t j = 0; j < channels.size(); ++j) {
            if (!(term.factors[j].rows() == static_cast<Eigen::Index>(channels[j]->output_signature().total_dim())))
                throw DimensionError("product factor does not match channel output " +
                                     channels[j]->output_signature().describe());
            m.push_back(channel_functional(*channels[j], term.factors[j]));
        }
        total += term.weight * contract_product(rho_in, m);
    }
    return total;
}

// Pure target written as sum_a c_a (x)_j |phi_aj>.
struct ProductKet {
    cplx amplitude{1.0};
    std::vector<Vector> kets;
};

// |psi><psi| as product terms: sum_{a,a'} c_a c_a'^* (x)_j |phi_aj><phi_a'j|.
// Tr(|psi><psi| X) = <psi|X|psi>.
inline std::vector<ProductTerm> projector_terms(const std::vector<ProductKet>& target) {
    std::vector<ProductTerm> out;
    for (const auto& a : target)
        for (const auto& b : target) {
            ProductTerm t;
            t.weight = a.amplitude * std::conj(b.amplitude);
            for (std::size_t j = 0; j < a.kets.size(); ++j) t.factors.push_back(a.kets[j] * b.kets[j].adjoint());
            out.push_back(std::move(t));
        }
    return out;
}

inline double product_ket_norm2(const std::vector<ProductKet>& target) {
    cplx s = 0.0;
    for (const auto& a : target)
        for (const auto& b : target) {
            cplx p = std::conj(a.amplitude) * b.amplitude;
            for (std::size_t j = 0; j < a.kets.size(); ++j) p *= a.kets[j].dot(b.kets[j]);
            s += p;
        }
    return s.real();
}

// sqrt(<psi| (x)_j E_j (rho_in) |psi>) with rho_in given in coordinates of
// the product of the channel input bases.
inline double compose_block_channels(const std::vector<const QuantumChannel*>& channels, const DenseMatrix& rho_in,
                                     const std::vector<ProductKet>& target) {
    if (std::abs(product_ket_norm2(target) - 1.0) > 1e-10) throw Error("compose_block_channels: target not normalized");
    const double f2 = evaluate_product_observable(channels, rho_in, projector_terms(target)).real();
    return std::sqrt(std::clamp(f2, 0.0, 1.0));
}

inline double compose_block_channels(const std::vector<const QuantumChannel*>& channels, const Vector& psi_in,
                                     const std::vector<ProductKet>& target) {
    return compose_block_channels(channels, DenseMatrix(psi_in * psi_in.adjoint()), target);
}

}  // namespace nvecs
