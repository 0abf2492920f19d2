#pragma once

// Closed-form reference evolutions. Written with plain complex arithmetic so
// they stay independent of the operator and integrator code they check.

#include <array>
#include <cmath>
#include <complex>
#include <string>
#include <utility>

#include "nvecs/model.hpp"

namespace nvecs {

// cos(sqrt(n) g_A t)|0..0>|e>  -  i sin(sqrt(n) g_A t)|W>|g>, W = n^{-1/2} sum_j |1_j>.
struct Step1Amplitudes {
    cplx excited_vacuum;  // <0..0, e|psi>
    cplx single_photon;   // <1_j, g|psi>, identical for every j
};

inline Step1Amplitudes oracle_step1(double g_A, double t, std::size_t n = 3) {
    const double rn = std::sqrt(static_cast<double>(n));
    const double x = rn * g_A * t;
    return {cplx(std::cos(x), 0.0), cplx(0.0, -std::sin(x)) / rn};
}

// Amplitudes on (|g, n>, |e, n-1>) starting from |g, n>.
inline std::array<cplx, 2> oracle_jc(double g_r, unsigned n, double t) {
    const double x = std::sqrt(static_cast<double>(n)) * g_r * t;
    if (n == 0) return {cplx(1.0, 0.0), cplx(0.0, 0.0)};
    return {cplx(std::cos(x), 0.0), cplx(0.0, -std::sin(x))};
}

// U[row][col] in the (e, g) basis for H = Omega (e^{i phi}|g><e| + e^{-i phi}|e><g|):
//   U|g> = cos|g> - i e^{-i phi} sin|e>,  U|e> = cos|e> - i e^{i phi} sin|g>.
inline std::array<std::array<cplx, 2>, 2> oracle_rotation(double Omega_eg, double phi, double t) {
    const double c = std::cos(Omega_eg * t), s = std::sin(Omega_eg * t);
    const cplx i(0.0, 1.0);
    std::array<std::array<cplx, 2>, 2> u{};
    u[0][0] = c;
    u[1][1] = c;
    u[1][0] = -i * std::exp(i * phi) * s;   // <g|U|e>
    u[0][1] = -i * std::exp(-i * phi) * s;  // <e|U|g>
    return u;
}

// Driven-oscillator solution of -lambda s~z (b e^{-i Delta t} + h.c.) in the
// s~z = qubit_sign eigenspace: e^{i theta} |qubit_sign * alpha(t)> with
//   alpha = (lambda/Delta)(e^{i Delta t} - 1),
//   theta = (lambda/Delta)^2 (Delta t - sin(Delta t)),
// and the limits alpha -> i lambda t, theta -> lambda^2 Delta t^3 / 6 as Delta -> 0.
struct DisplacementOracle {
    cplx amplitude;
    double phase;
};

inline DisplacementOracle oracle_displacement(double lambda, double Delta, double t, int qubit_sign) {
    const cplx i(0.0, 1.0);
    const double x = Delta * t;
    cplx alpha;
    double theta;
    if (std::abs(x) < 1e-3) {
        // series in x keeps full precision near the removable singularity
        alpha = lambda * t * (i - x / 2.0 - i * x * x / 6.0 + x * x * x / 24.0);
        theta = lambda * lambda * t * t * (x / 6.0 - x * x * x / 120.0);
    } else {
        alpha = (lambda / Delta) * (std::exp(i * x) - 1.0);
        theta = (lambda * lambda / (Delta * Delta)) * (x - std::sin(x));
    }
    return {static_cast<double>(qubit_sign) * alpha, theta};
}

inline DisplacementOracle oracle_displacement(const SystemParams& p, double t, int qubit_sign, std::size_t block = 0) {
    return oracle_displacement(p.lambda(block), p.Delta(block), t, qubit_sign);
}

// Beam splitter g_b (a^+ b + a b^+) acting on |0>_c |beta>_b.
struct TransferAmplitudes {
    cplx cavity;
    cplx nve;
};

inline TransferAmplitudes oracle_transfer(double g_b, cplx beta, double t) {
    return {cplx(0.0, -1.0) * beta * std::sin(g_b * t), beta * std::cos(g_b * t)};
}

struct OracleReport {
    std::string name;
    std::string parameters;
    double max_deviation = 0.0;
    double tolerance = 0.0;

    bool pass() const { return max_deviation <= tolerance; }
};

}  // namespace nvecs
