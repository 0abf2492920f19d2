#pragma once

// Experiment drivers behind the command-line subcommands. Each writes one
// CSV (config echo, header, rows in sweep order).

#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "nvecs/config.hpp"
#include "nvecs/model.hpp"
#include "nvecs/parallel.hpp"
#include "nvecs/protocol.hpp"

namespace nvecs {

namespace detail {

inline double elapsed_ms(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

inline std::vector<std::string> with_wall(std::vector<std::string> cols, const RunConfig& c) {
    if (c.wall_clock) cols.push_back("wall_ms");
    return cols;
}

inline SweepSpec sweep_or(const RunConfig& c, std::string variable, double lo, double hi, std::size_t points) {
    SweepSpec s = c.sweep;
    if (s.variable.empty()) s.variable = std::move(variable);
    if (s.points == 0) {
        s.min = lo;
        s.max = hi;
        s.points = points;
    }
    return s;
}

inline void set_frequency(SystemParams& p, const std::string& name, double nu) {
    if (name == "g_A") p.g_A = mhz(nu);
    else if (name == "g_r") p.g_r = mhz(nu);
    else if (name == "Omega_eg") p.Omega_eg = mhz(nu);
    else throw ConfigError("step-fidelity sweeps g_A, g_r or Omega_eg (got '" + name + "')");
}

}  // namespace detail

// D = delta_b / g_b. Holding delta_c keeps the two-photon detuning
// delta_a - delta_b at its configured value; holding delta_a keeps the
// qubit-cavity detuning fixed instead.
inline SystemParams with_reduced_detuning(const SystemParams& p, double D, const std::string& hold = "delta_c") {
    SystemParams q = p;
    const double dc = p.delta_a - p.delta_b;
    q.delta_b = D * p.g_b;
    if (hold == "delta_c") q.delta_a = q.delta_b + dc;
    return q;
}

inline void cmd_step_fidelity(const RunConfig& c, std::ostream& out) {
    static const char* vars[] = {"g_A", "g_r", "Omega_eg"};
    const SweepSpec s = detail::sweep_or(c, vars[c.step - 1], 5.0, 50.0, 19);
    CsvWriter csv(out, c, "step-fidelity", detail::with_wall({"sweep_value", "fidelity", "step_time_us"}, c));
    const auto values = s.values();
    std::vector<std::vector<double>> rows(values.size());
    const ProtocolMode mode = protocol_mode(c);
    parallel_for(values.size(), c.jobs, [&](std::size_t i) {
        const auto start = std::chrono::steady_clock::now();
        SystemParams p = c.params;
        detail::set_frequency(p, s.variable, values[i]);
        p.validate();
        const auto r = step_fidelity(p, c.step, mode.lossy, mode.integrator);
        rows[i] = {values[i], r.fidelity, r.duration};
        if (c.wall_clock) rows[i].push_back(detail::elapsed_ms(start));
    });
    for (const auto& r : rows) csv.row(r);
}

// Full protocol per D in both modes: lossy steps 1-3 (fidelity) and ideal
// steps 1-3 (fidelity_ideal_steps). Infeasible points are written as nan.
inline void cmd_sweep_d(const RunConfig& c, std::ostream& out) {
    const SweepSpec s = detail::sweep_or(c, "D", 5.0, 15.0, 11);
    if (s.variable != "D") throw ConfigError("sweep-d sweeps D (got '" + s.variable + "')");
    const std::size_t n = c.params.n_blocks;
    std::vector<std::string> cols{"sweep_value", "fidelity", "fidelity_ideal_steps", "beta_abs"};
    for (std::size_t j = 0; j < n; ++j) cols.push_back("mean_photon_c" + std::to_string(j + 1));
    cols.push_back("t4_us");
    CsvWriter csv(out, c, "sweep-d", detail::with_wall(cols, c));
    const auto values = s.values();
    std::vector<std::vector<double>> rows(values.size());
    parallel_for(values.size(), c.jobs, [&](std::size_t i) {
        const auto start = std::chrono::steady_clock::now();
        const double nan = std::numeric_limits<double>::quiet_NaN();
        const SystemParams p = with_reduced_detuning(c.params, values[i], c.sweep_hold);
        auto& row = rows[i];
        try {
            ProtocolMode mode = protocol_mode(c);
            const auto blue = run_protocol(p, mode);
            mode.ideal_prefix = true;
            const auto red = run_protocol(p, mode);
            row = {values[i], blue.fidelity, red.fidelity, std::abs(blue.beta[0])};
            for (double m : blue.mean_photon_c) row.push_back(m);
            row.push_back(blue.plan.step4());
        } catch (const InfeasibleError& e) {
            spdlog::warn("D = {}: {}", values[i], e.what());
            row = {values[i], nan, nan, nan};
            for (std::size_t j = 0; j < n; ++j) row.push_back(nan);
            row.push_back(nan);
        }
        if (c.wall_clock) row.push_back(detail::elapsed_ms(start));
    });
    for (const auto& r : rows) csv.row(r);
}

// Step-4 trace over [0, trace_span * t4]: F(t), |beta(t)|/2 and ten times
// the mean photon number of each cavity.
inline void cmd_time_trace(const RunConfig& c, std::ostream& out) {
    const SystemParams& p = c.params;
    p.validate();
    const double t4 = make_step_plan(p.lossless()).step4();
    std::vector<double> times;
    for (std::size_t i = 0; i < c.trace_points; ++i)
        times.push_back(c.trace_span * t4 * static_cast<double>(i) / static_cast<double>(c.trace_points - 1));
    ProtocolMode mode = protocol_mode(c);
    mode.jobs = c.jobs;
    const auto r = run_protocol(p, mode, times);
    std::vector<std::string> cols{"t_us", "fidelity", "beta_abs_half"};
    for (std::size_t j = 0; j < p.n_blocks; ++j) cols.push_back("photon_c" + std::to_string(j + 1) + "_x10");
    CsvWriter csv(out, c, "time-trace", cols);
    for (const auto& s : r.trace) {
        std::vector<double> row{s.t, s.fidelity, s.beta_abs / 2.0};
        for (double m : s.mean_photon_c) row.push_back(10.0 * m);
        csv.row(row);
    }
}

inline void cmd_full_run(const RunConfig& c, std::ostream& out) {
    ProtocolMode mode = protocol_mode(c);
    mode.jobs = c.jobs;
    mode.step_fidelities = true;
    const auto r = run_protocol(c.params, mode);
    const std::size_t n = c.params.n_blocks;
    std::vector<std::string> cols{"fidelity", "fidelity_step1", "fidelity_step2", "fidelity_step3",
                                  "beta_abs", "beta_arg", "t0_us", "t4_us"};
    for (std::size_t j = 0; j < n; ++j) cols.push_back("mean_photon_c" + std::to_string(j + 1));
    for (std::size_t j = 0; j < n; ++j) cols.push_back("mean_photon_b" + std::to_string(j + 1));
    CsvWriter csv(out, c, "full-run", detail::with_wall(cols, c));
    std::vector<double> row{r.fidelity,
                            r.step_fidelities[0],
                            r.step_fidelities[1],
                            r.step_fidelities[2],
                            std::abs(r.beta[0]),
                            std::arg(r.beta[0]),
                            r.plan.t0(),
                            r.plan.step4()};
    row.insert(row.end(), r.mean_photon_c.begin(), r.mean_photon_c.end());
    row.insert(row.end(), r.mean_photon_b.begin(), r.mean_photon_b.end());
    if (c.wall_clock) row.push_back(r.wall_ms);
    csv.row(row);
}

// Beam-splitter transfer |0>_c|beta>_b -> |-i beta>_c|0>_b sampled over
// [0, pi/(2 g_b)] with both modes truncated at transfer_cutoff.
inline void cmd_state_transfer(const RunConfig& c, std::ostream& out) {
    SystemParams p = c.params;
    p.N_c = p.N_b = c.transfer_cutoff;
    p.validate();
    CsvWriter csv(out, c, "state-transfer", {"t_us", "fidelity", "mean_photon_cavity", "mean_photon_nve"});
    const double T = kPi / (2.0 * p.g_b);
    const std::size_t m = std::max<std::size_t>(2, c.transfer_points);
    for (std::size_t i = 0; i < m; ++i) {
        const double t = T * static_cast<double>(i) / static_cast<double>(m - 1);
        const auto r = state_transfer(p, p.target_beta, t);
        csv.row({t, r.fidelity, r.mean_photon_cavity, r.mean_photon_nve});
    }
}

// Collective-mode ladder of an equal-coupling ensemble for each spin count,
// with g_bar = g_b / sqrt(N).
inline void cmd_bosonization_check(const RunConfig& c, std::ostream& out) {
    CsvWriter csv(out, c, "bosonization-check",
                  {"spins", "n", "element", "bosonic", "rel_deviation", "bright_coupling", "sqrt_n_g_bar"});
    for (std::size_t n : c.spins) {
        if (n < 2 || n > 14) throw ConfigError("spins must lie in [2, 14]");
        const auto m = EnsembleMicroModel::uniform(n, c.params.g_b / std::sqrt(static_cast<double>(n)));
        const double bright = bright_state_coupling(m);
        const double expect = std::sqrt(static_cast<double>(n)) * m.g_bar();
        const auto rep = collective_mode_check(m, std::min<std::size_t>(n - 1, 3));
        for (const auto& l : rep.levels)
            csv.row({static_cast<double>(n), static_cast<double>(l.n), l.element, l.bosonic, l.rel_deviation, bright,
                     expect});
    }
}

}  // namespace nvecs
