#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "nvecs/dynamics.hpp"
#include "nvecs/model.hpp"

using namespace nvecs;

namespace {

// sum over labeled boson factors of a^+a plus sigma+sigma- on qubit factors
Operator excitation_number(const SpaceSignature& sig) {
    Operator n = Operator::zero(sig);
    for (const auto& f : sig.factors()) {
        if (f.kind == FactorKind::qubit)
            n += embed(make_qubit_ops().proj_e, f.label, sig);
        else
            n += embed(make_boson_ops(f.dim).number, f.label, sig);
    }
    return n;
}

}  // namespace

TEST(Params, DerivedQuantitiesAtDefaults) {
    const SystemParams p;
    EXPECT_NEAR(p.lambda() / kTwoPi, 0.2777777777777778, 1e-12);
    EXPECT_NEAR(p.delta_c(), 0.0, 1e-12);
    EXPECT_NEAR(p.Delta() / kTwoPi, -0.4444444444444444, 1e-12);
    // pure functions of the fields
    SystemParams q = p;
    q.delta_a = mhz(30);
    q.delta_b = mhz(40);
    const double lam = q.g * q.g_b / 4.0 * (1.0 / q.delta_a + 1.0 / q.delta_b);
    EXPECT_DOUBLE_EQ(q.lambda(), lam);
    EXPECT_DOUBLE_EQ(q.Delta(), q.delta_a - q.delta_b - q.g_b * q.g_b / q.delta_b);
}

TEST(Params, OverridesAndValidation) {
    SystemParams p;
    EXPECT_TRUE(p.uniform_blocks());
    p.overrides[1].g_r = mhz(7);
    EXPECT_FALSE(p.uniform_blocks());
    EXPECT_DOUBLE_EQ(p.block(1).g_r, mhz(7));
    EXPECT_DOUBLE_EQ(p.block(0).g_r, mhz(5));
    SystemParams bad;
    bad.kappa = -1;
    EXPECT_THROW(bad.validate(), Error);
    bad = SystemParams{};
    bad.n_blocks = 6;
    EXPECT_THROW(bad.validate(), Error);
}

TEST(HI1, StructureAndConservation) {
    const SystemParams p;
    const auto sig = coupler_cavity_signature(p);
    const auto h = build_h_i1(p, sig);
    EXPECT_TRUE(h.is_hermitian());
    const StateVector e000 = product_state(sig, {{"A", ket_e()}, {"c1", fock_ket(3, 0)}, {"c2", fock_ket(3, 0)}, {"c3", fock_ket(3, 0)}});
    const Vector row = h.apply(e000.amplitudes());
    int nonzero = 0;
    for (Eigen::Index i = 0; i < row.size(); ++i)
        if (std::abs(row(i)) > 1e-12) {
            EXPECT_NEAR(std::abs(row(i)), p.g_A, 1e-12);
            ++nonzero;
        }
    EXPECT_EQ(nonzero, 3);
    EXPECT_LT(commutator(h, excitation_number(sig)).dense().norm(), 1e-14 * h.dense().norm());
}

TEST(HI1, CreatesCavityWState) {
    const SystemParams p;
    const auto sig = coupler_cavity_signature(p);
    const StateVector in = product_state(sig, {{"A", ket_e()}, {"c1", fock_ket(3, 0)}, {"c2", fock_ket(3, 0)}, {"c3", fock_ket(3, 0)}});
    const auto out = propagate_exact(build_h_i1(p, sig), in, kPi / (2.0 * std::sqrt(3.0) * p.g_A));
    Vector w = Vector::Zero(static_cast<Eigen::Index>(sig.total_dim()));
    // |g>_A (index 1), one photon in each cavity in turn
    for (std::size_t j = 0; j < 3; ++j) {
        std::vector<std::size_t> d{1, 0, 0, 0};
        d[1 + j] = 1;
        w(static_cast<Eigen::Index>(sig.compose(d))) = 1.0 / std::sqrt(3.0);
    }
    EXPECT_NEAR(std::abs(StateVector(sig, w).inner(out)), 1.0, 1e-10);
}

TEST(HI2, SinglePhotonSwapAndRabiScaling) {
    SystemParams p;
    p.n_blocks = 1;
    const auto sig = block_signature(p, 0, {true, true, false});
    const auto h = build_h_i2(p, sig);
    EXPECT_TRUE(h.is_hermitian());
    EXPECT_LT(commutator(h, excitation_number(sig)).dense().norm(), 1e-12);

    const auto g1 = product_state(sig, {{"q1", ket_g()}, {"c1", fock_ket(3, 1)}});
    const auto e0 = product_state(sig, {{"q1", ket_e()}, {"c1", fock_ket(3, 0)}});
    const auto out = propagate_exact(h, g1, kPi / (2.0 * p.g_r));
    EXPECT_LT(std::abs(e0.inner(out) - cplx(0, -1)), 1e-10);

    const auto g0 = product_state(sig, {{"q1", ket_g()}, {"c1", fock_ket(3, 0)}});
    EXPECT_NEAR(std::abs(propagate_exact(h, g0, 0.37).inner(g0)), 1.0, 1e-12);

    const auto g2 = product_state(sig, {{"q1", ket_g()}, {"c1", fock_ket(3, 2)}});
    const auto e1 = product_state(sig, {{"q1", ket_e()}, {"c1", fock_ket(3, 1)}});
    const auto flip = propagate_exact(h, g2, kPi / (2.0 * std::sqrt(2.0) * p.g_r));
    EXPECT_NEAR(std::abs(flip.inner(e1)), 1.0, 1e-10);
}

TEST(HI2, BlockDiagonal) {
    const SystemParams p;
    const auto sig = blocks_signature(p, {true, true, false});
    const DenseMatrix h = build_h_i2(p, sig).dense();
    // no element connects states that differ on two different blocks
    for (Eigen::Index r = 0; r < h.rows(); ++r)
        for (Eigen::Index c = 0; c < h.cols(); ++c) {
            if (std::abs(h(r, c)) < 1e-14) continue;
            const auto dr = sig.digits(static_cast<std::size_t>(r)), dc = sig.digits(static_cast<std::size_t>(c));
            std::set<std::size_t> blocks;
            for (std::size_t i = 0; i < dr.size(); ++i)
                if (dr[i] != dc[i]) blocks.insert(i / 2);
            EXPECT_LE(blocks.size(), 1u);
        }
}

TEST(HI3, PulseRotations) {
    SystemParams p;
    p.n_blocks = 1;
    const auto sig = qubits_signature(p);
    const auto h = build_h_i3(p, sig);
    EXPECT_TRUE(h.is_hermitian());
    const double t = kPi / (4.0 * p.Omega_eg);
    const StateVector e(sig, ket_e()), g(sig, ket_g());
    EXPECT_NEAR(std::abs(propagate_exact(h, e, t).inner(StateVector(sig, ket_minus()))), 1.0, 1e-10);
    EXPECT_NEAR(std::abs(propagate_exact(h, g, t).inner(StateVector(sig, ket_plus()))), 1.0, 1e-10);
    // ket phases, not just moduli
    EXPECT_LT((propagate_exact(h, e, t).amplitudes() - ket_minus()).norm(), 1e-10);
    EXPECT_LT((propagate_exact(h, g, t).amplitudes() - ket_plus()).norm(), 1e-10);

    SystemParams q = p;
    q.phi = 0.0;
    const auto h0 = build_h_i3(q, sig);
    EXPECT_LT(std::abs(e.inner(propagate_exact(h0, g, kPi / (2.0 * q.Omega_eg))) - cplx(0, -1)), 1e-10);

    const DenseMatrix u1 = exact_propagator(h, t);
    EXPECT_LT((u1 * u1 - exact_propagator(h, 2 * t)).norm(), 1e-12);
}

TEST(HI4, HermitianBlockLocalAndStaticAtZero) {
    const SystemParams p;
    SystemParams two = p;
    two.n_blocks = 2;
    const auto sig = blocks_signature(two);
    for (double t : {0.0, 0.013, 0.21, 0.777}) {
        const auto h = build_h_i4(two, sig, t);
        EXPECT_TRUE(h.is_hermitian(1e-12)) << "t = " << t;
    }
    const auto td = build_h_i4_td(two, sig);
    DenseMatrix sum = td.constant().dense();
    for (const auto& term : td.terms()) sum += term.op.dense();
    EXPECT_LT((build_h_i4(two, sig, 0.0).dense() - sum).norm(), 1e-12);

    const DenseMatrix h = build_h_i4(two, sig, 0.3).dense();
    const std::size_t per_block = 3;
    for (Eigen::Index r = 0; r < h.rows(); ++r)
        for (Eigen::Index c = 0; c < h.cols(); ++c) {
            if (std::abs(h(r, c)) < 1e-14) continue;
            const auto dr = sig.digits(static_cast<std::size_t>(r)), dc = sig.digits(static_cast<std::size_t>(c));
            std::set<std::size_t> blocks;
            for (std::size_t i = 0; i < dr.size(); ++i)
                if (dr[i] != dc[i]) blocks.insert(i / per_block);
            EXPECT_LE(blocks.size(), 1u);
        }
}

TEST(HI4, QubitCavityTermPeriodic) {
    SystemParams p;
    p.n_blocks = 1;
    p.delta_b = 2.0 * p.delta_a;  // commensurate detunings
    const auto sig = block_signature(p, 0);
    const double period = kTwoPi / p.delta_a;
    EXPECT_LT((build_h_i4(p, sig, 0.1).dense() - build_h_i4(p, sig, 0.1 + period).dense()).norm(), 1e-9);
}

TEST(HI4, DispersiveGuard) {
    SystemParams p;
    p.n_blocks = 1;
    p.delta_a = 2.0 * p.g;
    EXPECT_THROW(build_h_i4_td(p, block_signature(p, 0)), Error);
}

TEST(HEff, PreservesPlusMinusEigenspaces) {
    SystemParams p;
    p.n_blocks = 1;
    const auto sig = block_signature(p, 0);
    const DenseMatrix h = build_h_eff(p, sig, 0.4).dense();
    EXPECT_TRUE(build_h_eff(p, sig, 0.4).is_hermitian());
    const DenseMatrix proj_plus = embed(DenseMatrix(ket_plus() * ket_plus().adjoint()), "q1", sig).dense();
    EXPECT_LT((h * proj_plus - proj_plus * h).norm(), 1e-12);
    // acts trivially on the cavity
    const DenseMatrix nc = embed(make_boson_ops(p.N_c).number, "c1", sig).dense();
    EXPECT_LT((h * nc - nc * h).norm(), 1e-12);
}

TEST(Collapse, RatesAndNames) {
    SystemParams p;
    p.n_blocks = 1;
    const auto ops = build_collapse_ops(p, block_signature(p, 0));
    std::set<std::string> names;
    for (const auto& c : ops) names.insert(c.name);
    EXPECT_EQ(names, (std::set<std::string>{"kappa_c1", "kappa_prime_b1", "gamma_q1", "gamma_phi_q1"}));
    EXPECT_TRUE(build_collapse_ops(p.lossless(), block_signature(p, 0)).empty());
}

TEST(Collapse, CavityDecayLaw) {
    SystemParams p;
    p.n_blocks = 1;
    const SpaceSignature sig({SpaceSignature::boson("c1", 4)});
    EvolutionTask task;
    task.hamiltonian = Hamiltonian(Operator::zero(sig));
    task.collapse_ops = build_collapse_ops(p, sig);
    task.initial = StateVector(sig, fock_ket(4, 1));
    task.t_final = 1.7;
    const auto r = evolve_lindblad(task);
    EXPECT_NEAR(mean_photon(r.state, "c1"), std::exp(-p.kappa * 1.7), 1e-8);
}

TEST(Collapse, DephasingScalesCoherence) {
    SystemParams p = SystemParams{}.lossless();
    p.n_blocks = 1;
    p.gamma_phi = 0.3;
    const auto sig = qubits_signature(p);
    EvolutionTask task;
    task.hamiltonian = Hamiltonian(Operator::zero(sig));
    task.collapse_ops = build_collapse_ops(p, sig);
    task.initial = StateVector(sig, ket_plus());
    task.t_final = 2.0;
    const auto r = evolve_lindblad(task);
    EXPECT_NEAR(r.state.data()(0, 1).real(), 0.5 * std::exp(-2.0 * 0.3 * 2.0), 1e-9);
    EXPECT_NEAR(r.state.data()(0, 0).real(), 0.5, 1e-12);
}

TEST(MicroModel, SingleSpinIsJaynesCummings) {
    const auto m = EnsembleMicroModel::uniform(1, 0.8);
    const auto sig = micro_signature(m, 3);
    const auto h = build_micro_hamiltonian(m, sig);
    const SpaceSignature jc_sig({SpaceSignature::boson("c", 3), SpaceSignature::qubit("s1")});
    const auto a = make_boson_ops(3);
    const auto q = make_qubit_ops();
    const Operator jc = 0.8 * (embed(a.creation, "c", jc_sig) * embed(q.sigma_minus, "s1", jc_sig) +
                               embed(a.annihilation, "c", jc_sig) * embed(q.sigma_plus, "s1", jc_sig));
    EXPECT_LT((h.dense() - jc.dense()).norm(), 1e-14);
}

TEST(MicroModel, BrightStateCouplingAndDarkStates) {
    const auto m = EnsembleMicroModel::uniform(4, 0.5);
    EXPECT_NEAR(bright_state_coupling(m), 2.0 * 0.5, 1e-12);
    EXPECT_NEAR(bright_state_coupling(m), std::sqrt(4.0) * m.g_bar(), 1e-12);

    // coupling row from |1>_c|all ground> into the one-excitation spin states
    const auto sig = micro_signature(m, 2);
    const DenseMatrix h = build_micro_hamiltonian(m, sig).dense();
    std::vector<std::size_t> photon(5, 1);
    photon[0] = 1;
    const auto src = static_cast<Eigen::Index>(sig.compose(photon));
    Eigen::MatrixXcd row(1, 4);
    for (std::size_t k = 0; k < 4; ++k) {
        std::vector<std::size_t> d(5, 1);
        d[0] = 0;
        d[1 + k] = 0;
        row(0, static_cast<Eigen::Index>(k)) = h(static_cast<Eigen::Index>(sig.compose(d)), src);
    }
    Eigen::FullPivLU<Eigen::MatrixXcd> lu(row);
    EXPECT_EQ(lu.dimensionOfKernel(), 3);
}

TEST(MicroModel, CollectiveDeviation) {
    const auto r6 = collective_mode_check(EnsembleMicroModel::uniform(6, 1.0), 2);
    EXPECT_NEAR(r6.levels[0].rel_deviation, 0.0, 1e-12);
    EXPECT_NEAR(r6.levels[1].rel_deviation, 1.0 - std::sqrt(1.0 - 1.0 / 6.0), 1e-8);
    EXPECT_NEAR(r6.levels[1].rel_deviation, 0.0871, 1e-4);
    double prev = 1.0;
    for (std::size_t n : {4u, 6u, 8u}) {
        const double d = collective_mode_check(EnsembleMicroModel::uniform(n, 1.0), 1).levels[1].rel_deviation;
        EXPECT_LT(d, prev);
        prev = d;
    }
    EXPECT_THROW(collective_mode_check(EnsembleMicroModel::uniform(3, 1.0), 3), Error);
}
