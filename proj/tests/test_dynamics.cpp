#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "nvecs/dynamics.hpp"
#include "nvecs/model.hpp"
#include "nvecs/protocol.hpp"

using namespace nvecs;

namespace {

Operator random_hermitian(const SpaceSignature& sig, unsigned seed) {
    std::mt19937 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    const auto d = static_cast<Eigen::Index>(sig.total_dim());
    DenseMatrix m(d, d);
    for (Eigen::Index r = 0; r < d; ++r)
        for (Eigen::Index c = 0; c < d; ++c) m(r, c) = cplx(n(rng), n(rng));
    Operator h(sig, DenseMatrix(0.5 * (m + m.adjoint())));
    h.mark_hermitian();
    return h;
}

StateVector random_state(const SpaceSignature& sig, unsigned seed) {
    std::mt19937 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    Vector v(static_cast<Eigen::Index>(sig.total_dim()));
    for (auto& x : v) x = cplx(n(rng), n(rng));
    return StateVector(sig, v.normalized());
}

SpaceSignature qubit_sig() { return SpaceSignature({SpaceSignature::qubit("q1")}); }

// Lossy single-block step-4 settings small enough for unit tests.
SystemParams small_block() {
    SystemParams p;
    p.n_blocks = 1;
    p.N_c = 2;
    p.N_b = 4;
    p.target_beta = 0.4;
    return p;
}

}  // namespace

TEST(PropagateExact, IdentityAndRabi) {
    const auto sig = qubit_sig();
    const StateVector g(sig, ket_g()), e(sig, ket_e());
    EXPECT_LT((propagate_exact(Operator::zero(sig), g, 3.0).amplitudes() - ket_g()).norm(), 1e-15);
    const auto q = make_qubit_ops();
    const double w = 2.3;
    Operator h(sig, DenseMatrix(w * (q.sigma_plus + q.sigma_minus)));
    const auto out = propagate_exact(h, g, kPi / (2.0 * w));
    EXPECT_LT(std::abs(e.inner(out) - cplx(0, -1)), 1e-12);
    EXPECT_NEAR(out.norm(), 1.0, 1e-12);
    Operator bad(sig, DenseMatrix(q.sigma_plus));
    EXPECT_THROW(propagate_exact(bad, g, 1.0), Error);
}

TEST(PropagateExact, AgreesWithIntegratorOnRandomInstances) {
    const SpaceSignature sig({SpaceSignature::boson("x", 20)});
    for (unsigned seed : {1u, 2u, 3u}) {
        const auto h = random_hermitian(sig, seed);
        const auto psi = random_state(sig, seed + 10);
        const double t = 0.8;
        const auto exact = propagate_exact(h, psi, t);
        IntegratorOptions tight;
        tight.rel_tol = 1e-10;
        tight.abs_tol = 1e-12;
        const auto rk = evolve_schrodinger(Hamiltonian(h), psi, t, tight);
        EXPECT_LT((exact.amplitudes() - rk.amplitudes()).norm(), 1e-8) << "seed " << seed;

        EvolutionTask task;
        task.hamiltonian = Hamiltonian(h);
        task.initial = psi;
        task.t_final = t;
        task.options = tight;
        const auto rho = evolve_lindblad(task).state;
        EXPECT_LT((rho.data() - DensityMatrix::from_pure(exact).data()).cwiseAbs().maxCoeff(), 1e-8);
    }
}

TEST(Lindblad, TracePositivityAndHermiticityOnLossyBlock) {
    const SystemParams p = small_block();
    const auto sig = block_signature(p, 0);
    const auto psi = product_state(sig, {{"q1", ket_minus()}, {"c1", fock_ket(2, 0)}, {"b1", fock_ket(4, 0)}});
    EvolutionTask task;
    task.hamiltonian = build_h_i4_td(p, sig);
    task.collapse_ops = build_collapse_ops(p, sig);
    task.initial = psi;
    task.t_final = 0.3;
    task.record = {{"n_b", embed(make_boson_ops(4).number, "b1", sig)}};
    task.sample_interval = 0.05;
    const auto r = evolve_lindblad(task);
    EXPECT_NEAR(r.state.trace(), 1.0, 1e-6);
    EXPECT_GE(r.state.min_eigenvalue(), -1e-6);
    EXPECT_LT((r.state.data() - r.state.data().adjoint()).cwiseAbs().maxCoeff(), 1e-12);
    ASSERT_EQ(r.series.times.size(), r.series.values.at("n_b").size());
    EXPECT_GE(r.series.times.size(), 7u);
    for (double v : r.series.values.at("n_b")) EXPECT_GE(v, -1e-10);
}

TEST(Lindblad, ToleranceConvergenceOnStep1) {
    const SystemParams p;
    const auto sig = coupler_cavity_signature(p);
    const auto target = ideal_state_after_step(1, p);
    auto run = [&](double rel, double abs) {
        EvolutionTask task;
        task.hamiltonian = Hamiltonian(build_h_i1(p, sig));
        task.collapse_ops = build_collapse_ops(p, sig);
        task.initial = product_state(sig, {{"A", ket_e()}, {"c1", fock_ket(3, 0)}, {"c2", fock_ket(3, 0)}, {"c3", fock_ket(3, 0)}});
        task.t_final = kPi / (2.0 * std::sqrt(3.0) * p.g_A);
        task.options.rel_tol = rel;
        task.options.abs_tol = abs;
        return fidelity_pure_target(evolve_lindblad(task).state, target);
    };
    const double f = run(1e-8, 1e-10);
    EXPECT_GE(f, 0.998);
    EXPECT_LT(std::abs(f - run(5e-9, 5e-11)), 1e-7);
}

TEST(Integrator, FixedStepOrderAtLeastFour) {
    // driven qubit with a time-dependent drive, reference from a fine adaptive run
    const auto sig = qubit_sig();
    const auto q = make_qubit_ops();
    Hamiltonian h(Operator(sig, DenseMatrix(0.7 * q.sigma_z)));
    h.add_term(Operator(sig, DenseMatrix(1.3 * q.sigma_plus)), 2.0);
    h.add_term(Operator(sig, DenseMatrix(1.3 * q.sigma_minus)), -2.0);
    const LindbladGenerator gen(h, {});
    const DenseMatrix rho0 = ket_g() * ket_g().adjoint();
    IntegratorOptions ref_opt;
    ref_opt.rel_tol = 1e-13;
    ref_opt.abs_tol = 1e-15;
    DenseMatrix ref = rho0;
    evolve_operator(gen, ref, 0.0, 2.0, ref_opt);
    auto err = [&](double dt) {
        IntegratorOptions o;
        o.fixed_step = true;
        o.dt_hint = dt;
        o.max_step = dt;
        DenseMatrix x = rho0;
        evolve_operator(gen, x, 0.0, 2.0, o);
        return (x - ref).norm();
    };
    const double e1 = err(0.1), e2 = err(0.05);
    const double order = std::log2(e1 / e2);
    EXPECT_GE(order, 4.0) << "errors " << e1 << " " << e2;
}

TEST(Integrator, ReportsStepBudgetExhaustion) {
    const auto sig = qubit_sig();
    const LindbladGenerator gen(Hamiltonian(Operator(sig, DenseMatrix(50.0 * make_qubit_ops().sigma_z))), {});
    DenseMatrix x = ket_plus() * ket_plus().adjoint();
    IntegratorOptions o;
    o.max_steps = 5;
    try {
        evolve_operator(gen, x, 0.0, 10.0, o);
        FAIL() << "expected an integration error";
    } catch (const IntegrationError& e) {
        EXPECT_GT(e.time(), 0.0);
    }
}

TEST(MeanPhoton, VacuumAndCoherent) {
    const SpaceSignature sig({SpaceSignature::boson("c1", 12)});
    EXPECT_NEAR(mean_photon(DensityMatrix::from_pure(coherent_state(0.0, 12, "c1")), "c1"), 0.0, 1e-15);
    EXPECT_NEAR(mean_photon(DensityMatrix::from_pure(coherent_state(1.2, 12, "c1")), "c1"), 1.44, 1e-6);
}

TEST(Channel, IdentityAndUnitary) {
    const SpaceSignature sig({SpaceSignature::boson("x", 5)});
    std::vector<Vector> kets;
    for (std::size_t n = 0; n < 3; ++n) kets.push_back(fock_ket(5, n));
    const auto id = extract_channel([](const DenseMatrix& x, std::size_t, std::size_t) { return x; }, sig, kets, sig);
    const auto ref = QuantumChannel::identity(sig, kets);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 3; ++k) EXPECT_LT((id.output(i, k) - ref.output(i, k)).norm(), 1e-15);

    const auto h = random_hermitian(sig, 7);
    const LindbladGenerator gen(Hamiltonian(h), {});
    const auto ch = extract_channel(
        [&](const DenseMatrix& x, std::size_t, std::size_t) {
            DenseMatrix y = x;
            evolve_operator(gen, y, 0.0, 0.6, {});
            return y;
        },
        sig, kets, sig, 2);
    const DenseMatrix u = exact_propagator(h, 0.6);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 3; ++k)
            EXPECT_LT((ch.output(i, k) - u * kets[i] * kets[k].adjoint() * u.adjoint()).norm(), 1e-8);
    EXPECT_LT(ch.max_trace_deviation(), 1e-8);
    EXPECT_LT(ch.max_hermiticity_deviation(), 1e-12);
}

TEST(Channel, DephasingScalesOffDiagonal) {
    SystemParams p = SystemParams{}.lossless();
    p.n_blocks = 1;
    p.gamma_phi = 0.25;
    const auto sig = qubits_signature(p);
    const LindbladGenerator gen(Hamiltonian(Operator::zero(sig)), build_collapse_ops(p, sig));
    const auto ch = extract_channel(
        [&](const DenseMatrix& x, std::size_t, std::size_t) {
            DenseMatrix y = x;
            evolve_operator(gen, y, 0.0, 1.5, {});
            return y;
        },
        sig, {ket_e(), ket_g()}, sig);
    EXPECT_NEAR(std::abs(ch.output(0, 1)(0, 1)), std::exp(-2.0 * 0.25 * 1.5), 1e-9);
    EXPECT_NEAR(ch.output(0, 0)(0, 0).real(), 1.0, 1e-12);
}

TEST(Compose, IdentityChannelsGiveUnitFidelity) {
    const SpaceSignature q1({SpaceSignature::qubit("q1")}), q2({SpaceSignature::qubit("q2")});
    const auto c1 = QuantumChannel::identity(q1, {ket_e(), ket_g()});
    const auto c2 = QuantumChannel::identity(q2, {ket_e(), ket_g()});
    Vector bell = Vector::Zero(4);
    bell(1) = bell(2) = 1.0 / std::sqrt(2.0);
    std::vector<ProductKet> target{{1.0 / std::sqrt(2.0), {ket_e(), ket_g()}}, {1.0 / std::sqrt(2.0), {ket_g(), ket_e()}}};
    EXPECT_NEAR(compose_block_channels({&c1, &c2}, bell, target), 1.0, 1e-14);
}

TEST(Compose, DepolarizedBlockClosedForm) {
    // Bell-type input (|eg> + |ge>)/sqrt2, block 1 fully depolarized:
    // rho = I/2 (x) I/2 on the kept correlations -> F^2 = 1/4 for this target.
    const SpaceSignature q1({SpaceSignature::qubit("q1")}), q2({SpaceSignature::qubit("q2")});
    std::vector<DenseMatrix> outs;
    const std::vector<Vector> kets{ket_e(), ket_g()};
    for (const auto& u : kets)
        for (const auto& v : kets) outs.push_back(v.dot(u) * DenseMatrix::Identity(2, 2) / 2.0);
    const QuantumChannel dep(q1, kets, q1, outs);
    const auto id = QuantumChannel::identity(q2, kets);
    Vector in = Vector::Zero(4);
    in(1) = in(2) = 1.0 / std::sqrt(2.0);
    std::vector<ProductKet> target{{1.0 / std::sqrt(2.0), {ket_e(), ket_g()}}, {1.0 / std::sqrt(2.0), {ket_g(), ket_e()}}};
    EXPECT_NEAR(compose_block_channels({&dep, &id}, in, target), 0.5, 1e-14);
}

TEST(Compose, LosslessChannelsMatchGlobalUnitary) {
    // two step-4 blocks, lossless, against the full-space unitary evolution
    SystemParams p = small_block().lossless();
    p.n_blocks = 2;
    const double t = 0.35;
    IntegratorOptions opt;
    opt.rel_tol = 1e-11;
    opt.abs_tol = 1e-13;
    std::vector<QuantumChannel> ch;
    for (std::size_t j = 0; j < 2; ++j) {
        const auto bs = block_signature(p, j);
        const SpaceSignature in({SpaceSignature::qubit(qubit_label(j))});
        const LindbladGenerator gen(build_h_i4_td(p, bs), {});
        ch.push_back(extract_channel(
            [&](const DenseMatrix& x, std::size_t, std::size_t) {
                DenseMatrix y = extend(x, in, bs, {{cavity_label(j), fock_ket(2, 0)}, {nve_label(j), fock_ket(4, 0)}});
                evolve_operator(gen, y, 0.0, t, opt);
                return y;
            },
            in, {ket_e(), ket_g()}, bs));
    }
    // input (|-+> + |+->)/sqrt2 in the (e, g) qubit coordinates
    const Vector in = (Vector(Eigen::kroneckerProduct(ket_minus(), ket_plus())) +
                       Vector(Eigen::kroneckerProduct(ket_plus(), ket_minus()))) / std::sqrt(2.0);
    // arbitrary product-sum target
    const auto c0 = coherent_state(0.2, 4).amplitudes(), c1 = coherent_state(cplx(0, 0.3), 4).amplitudes();
    auto block_ket = [&](const Vector& q, const Vector& b) {
        return Vector(Eigen::kroneckerProduct(Vector(Eigen::kroneckerProduct(q, fock_ket(2, 0))), b));
    };
    std::vector<ProductKet> target{{1.0 / std::sqrt(2.0), {block_ket(ket_minus(), c0), block_ket(ket_plus(), c1)}},
                                   {1.0 / std::sqrt(2.0), {block_ket(ket_plus(), c1), block_ket(ket_minus(), c0)}}};
    const double norm = std::sqrt(product_ket_norm2(target));
    for (auto& tk : target) tk.amplitude /= norm;
    const double f_fact = compose_block_channels({&ch[0], &ch[1]}, in, target);

    const auto full = blocks_signature(p);
    const SpaceSignature qs = qubits_signature(p);
    std::map<std::string, Vector> pad;
    for (std::size_t j = 0; j < 2; ++j) {
        pad[cavity_label(j)] = fock_ket(2, 0);
        pad[nve_label(j)] = fock_ket(4, 0);
    }
    DenseMatrix x = extend(DenseMatrix(in * in.adjoint()), qs, full, pad);
    evolve_operator(LindbladGenerator(build_h_i4_td(p, full), {}), x, 0.0, t, opt);
    const Vector psi = expand_product(target);
    const double f_full = std::sqrt(psi.dot(x * psi).real());
    EXPECT_NEAR(f_fact, f_full, 1e-8);
}

TEST(Stages, PaddingPostUnitaryAndShift) {
    const auto sig = qubit_sig();
    const auto q = make_qubit_ops();
    Hamiltonian h(Operator::zero(sig));
    h.add_term(Operator(sig, DenseMatrix(q.sigma_plus)), 3.0);
    h.add_term(Operator(sig, DenseMatrix(q.sigma_minus)), -3.0);
    const auto shifted = shift_time(h, 0.4);
    EXPECT_LT((shifted.at(0.1).dense() - h.at(0.5).dense()).norm(), 1e-14);

    EvolutionStage s;
    s.hamiltonian = Hamiltonian(Operator::zero(sig));
    s.duration = 0.0;
    s.post_unitary = Operator(sig, DenseMatrix(q.sigma_plus + q.sigma_minus));
    const DenseMatrix out = run_stages({s}, DenseMatrix(ket_g() * ket_g().adjoint()), sig, {});
    EXPECT_NEAR(out(0, 0).real(), 1.0, 1e-15);
}
