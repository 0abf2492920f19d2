#pragma once

// Run configuration: flat `key = value` files with `#` comments, frequencies
// entered as nu = omega / 2pi in MHz, rates in 1/us, times in us.

#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "nvecs/dynamics.hpp"
#include "nvecs/model.hpp"
#include "nvecs/protocol.hpp"

namespace nvecs {

struct SweepSpec {
    std::string variable;
    double min = 0.0;
    double max = 0.0;
    std::size_t points = 0;

    std::vector<double> values() const {
        std::vector<double> v;
        for (std::size_t i = 0; i < points; ++i)
            v.push_back(points == 1 ? min : min + (max - min) * static_cast<double>(i) / static_cast<double>(points - 1));
        return v;
    }
};

struct RunConfig {
    SystemParams params;
    std::string engine = "factorized";
    bool idle_coupler_decay = false;
    int step = 1;
    SweepSpec sweep;              // variable empty: subcommand default
    std::string sweep_hold = "delta_c";
    std::size_t trace_points = 261;
    double trace_span = 1.3;
    std::size_t transfer_cutoff = 12;
    std::size_t transfer_points = 11;
    std::vector<std::size_t> spins{4, 6, 8};
    double rel_tol = 1e-8;
    double abs_tol = 1e-10;
    bool wall_clock = true;
    unsigned long seed = 0;  // reserved
    std::size_t jobs = 1;
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

inline double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size() || !std::isfinite(x)) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("'" + key + "': expected a number, got '" + v + "'");
    }
}

inline std::size_t to_count(const std::string& key, const std::string& v) {
    const double x = to_double(key, v);
    if (x < 0 || x != std::floor(x) || x > 1e9) throw ConfigError("'" + key + "': expected a non-negative integer, got '" + v + "'");
    return static_cast<std::size_t>(x);
}

inline bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw ConfigError("'" + key + "': expected true/false, got '" + v + "'");
}

inline std::string num(double x) { return fmt::format("{:.12g}", x); }

}  // namespace detail

// Per-block keys are written `block<j>.<name>` with j counted from 1.
inline void apply_setting(RunConfig& c, const std::string& key_in, const std::string& value_in) {
    using detail::to_bool;
    using detail::to_count;
    using detail::to_double;
    const std::string key = detail::trim(key_in), v = detail::trim(value_in);
    auto& p = c.params;
    auto freq = [&] { return mhz(to_double(key, v)); };

    if (key.rfind("block", 0) == 0) {
        const auto dot = key.find('.');
        if (dot == std::string::npos) throw ConfigError("'" + key + "': expected block<j>.<name>");
        const std::size_t j = to_count(key, key.substr(5, dot - 5));
        if (j < 1) throw ConfigError("'" + key + "': blocks are numbered from 1");
        auto& o = p.overrides[j - 1];
        const std::string name = key.substr(dot + 1);
        if (name == "g_r") o.g_r = freq();
        else if (name == "g") o.g = freq();
        else if (name == "g_b") o.g_b = freq();
        else if (name == "Omega_eg") o.Omega_eg = freq();
        else if (name == "Omega") o.Omega = freq();
        else if (name == "delta_a") o.delta_a = freq();
        else if (name == "delta_b") o.delta_b = freq();
        else throw ConfigError("unknown per-block key '" + key + "'");
        return;
    }

    if (key == "n_blocks") p.n_blocks = to_count(key, v);
    else if (key == "g_A") p.g_A = freq();
    else if (key == "g_r") p.g_r = freq();
    else if (key == "g") p.g = freq();
    else if (key == "g_b") p.g_b = freq();
    else if (key == "Omega_eg") p.Omega_eg = freq();
    else if (key == "Omega") p.Omega = freq();
    else if (key == "phi") p.phi = to_double(key, v);
    else if (key == "delta_a") p.delta_a = freq();
    else if (key == "delta_b") p.delta_b = freq();
    else if (key == "D") p.delta_b = to_double(key, v) * p.g_b;
    else if (key == "kappa") p.kappa = to_double(key, v);
    else if (key == "kappa_prime") p.kappa_prime = to_double(key, v);
    else if (key == "gamma") p.gamma = to_double(key, v);
    else if (key == "gamma_phi") p.gamma_phi = to_double(key, v);
    else if (key == "gamma_A") p.gamma_A = to_double(key, v);
    else if (key == "gamma_A_phi") p.gamma_A_phi = to_double(key, v);
    else if (key == "N_c") p.N_c = to_count(key, v);
    else if (key == "N_b") p.N_b = to_count(key, v);
    else if (key == "target_beta") p.target_beta = to_double(key, v);
    else if (key == "engine") {
        if (v != "factorized" && v != "brute" && v != "effective" && v != "lossless")
            throw ConfigError("engine must be factorized, brute, effective or lossless (got '" + v + "')");
        c.engine = v;
    } else if (key == "idle_coupler_decay") c.idle_coupler_decay = to_bool(key, v);
    else if (key == "step") {
        const auto s = to_count(key, v);
        if (s < 1 || s > 3) throw ConfigError("step must be 1, 2 or 3");
        c.step = static_cast<int>(s);
    } else if (key == "sweep_variable") c.sweep.variable = v;
    else if (key == "sweep_min") c.sweep.min = to_double(key, v);
    else if (key == "sweep_max") c.sweep.max = to_double(key, v);
    else if (key == "sweep_points") c.sweep.points = to_count(key, v);
    else if (key == "sweep_hold") {
        if (v != "delta_c" && v != "delta_a") throw ConfigError("sweep_hold must be delta_c or delta_a");
        c.sweep_hold = v;
    } else if (key == "trace_points") c.trace_points = to_count(key, v);
    else if (key == "trace_span") c.trace_span = to_double(key, v);
    else if (key == "transfer_cutoff") c.transfer_cutoff = to_count(key, v);
    else if (key == "transfer_points") c.transfer_points = to_count(key, v);
    else if (key == "spins") {
        c.spins.clear();
        std::stringstream ss(v);
        std::string item;
        while (std::getline(ss, item, ',')) c.spins.push_back(to_count(key, detail::trim(item)));
        if (c.spins.empty()) throw ConfigError("spins: empty list");
    } else if (key == "rel_tol") c.rel_tol = to_double(key, v);
    else if (key == "abs_tol") c.abs_tol = to_double(key, v);
    else if (key == "wall_clock") c.wall_clock = to_bool(key, v);
    else if (key == "seed") c.seed = to_count(key, v);
    else if (key == "jobs") c.jobs = std::max<std::size_t>(1, to_count(key, v));
    else throw ConfigError("unknown key '" + key + "'");
}

// `key=value` as given on the command line.
inline void apply_assignment(RunConfig& c, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
    apply_setting(c, assignment.substr(0, eq), assignment.substr(eq + 1));
}

inline void validate(const RunConfig& c) {
    try {
        c.params.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    for (const auto& [j, o] : c.params.overrides)
        if (j >= c.params.n_blocks) throw ConfigError("override for block " + std::to_string(j + 1) + " beyond n_blocks");
    if (!c.sweep.variable.empty() || c.sweep.points != 0) {
        if (!(c.sweep.min < c.sweep.max)) throw ConfigError("sweep_min must be below sweep_max");
        if (c.sweep.points < 2) throw ConfigError("sweep_points must be >= 2");
    }
    if (c.trace_points < 2) throw ConfigError("trace_points must be >= 2");
    if (!(c.trace_span > 0.0)) throw ConfigError("trace_span must be > 0");
    if (!(c.rel_tol > 0.0) || !(c.abs_tol > 0.0)) throw ConfigError("tolerances must be > 0");
}

inline RunConfig parse_config(std::istream& in, const std::string& origin = "<config>", RunConfig c = {}) {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
        if (detail::trim(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
        try {
            apply_setting(c, line.substr(0, eq), line.substr(eq + 1));
        } catch (const ConfigError& e) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return c;
}

inline RunConfig load_config(const std::string& path, RunConfig c = {}) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    return parse_config(f, path, std::move(c));
}

// Every resolved setting in input units, in a fixed order.
inline std::vector<std::pair<std::string, std::string>> resolved_settings(const RunConfig& c) {
    using detail::num;
    const auto& p = c.params;
    auto nu = [](double w) { return num(w / (2.0 * kPi)); };
    std::vector<std::pair<std::string, std::string>> s{
        {"n_blocks", std::to_string(p.n_blocks)},
        {"g_A", nu(p.g_A)},
        {"g_r", nu(p.g_r)},
        {"g", nu(p.g)},
        {"g_b", nu(p.g_b)},
        {"Omega_eg", nu(p.Omega_eg)},
        {"Omega", nu(p.Omega)},
        {"phi", num(p.phi)},
        {"delta_a", nu(p.delta_a)},
        {"delta_b", nu(p.delta_b)},
        {"kappa", num(p.kappa)},
        {"kappa_prime", num(p.kappa_prime)},
        {"gamma", num(p.gamma)},
        {"gamma_phi", num(p.gamma_phi)},
        {"gamma_A", num(p.gamma_A)},
        {"gamma_A_phi", num(p.gamma_A_phi)},
        {"N_c", std::to_string(p.N_c)},
        {"N_b", std::to_string(p.N_b)},
        {"target_beta", num(p.target_beta)},
    };
    for (const auto& [j, o] : p.overrides) {
        const std::string b = "block" + std::to_string(j + 1) + ".";
        if (o.g_r) s.emplace_back(b + "g_r", nu(*o.g_r));
        if (o.g) s.emplace_back(b + "g", nu(*o.g));
        if (o.g_b) s.emplace_back(b + "g_b", nu(*o.g_b));
        if (o.Omega_eg) s.emplace_back(b + "Omega_eg", nu(*o.Omega_eg));
        if (o.Omega) s.emplace_back(b + "Omega", nu(*o.Omega));
        if (o.delta_a) s.emplace_back(b + "delta_a", nu(*o.delta_a));
        if (o.delta_b) s.emplace_back(b + "delta_b", nu(*o.delta_b));
    }
    std::string spins;
    for (auto n : c.spins) spins += (spins.empty() ? "" : ",") + std::to_string(n);
    s.insert(s.end(), {
                          {"engine", c.engine},
                          {"idle_coupler_decay", c.idle_coupler_decay ? "true" : "false"},
                          {"step", std::to_string(c.step)},
                          {"sweep_variable", c.sweep.variable},
                          {"sweep_min", num(c.sweep.min)},
                          {"sweep_max", num(c.sweep.max)},
                          {"sweep_points", std::to_string(c.sweep.points)},
                          {"sweep_hold", c.sweep_hold},
                          {"trace_points", std::to_string(c.trace_points)},
                          {"trace_span", num(c.trace_span)},
                          {"transfer_cutoff", std::to_string(c.transfer_cutoff)},
                          {"transfer_points", std::to_string(c.transfer_points)},
                          {"spins", spins},
                          {"rel_tol", num(c.rel_tol)},
                          {"abs_tol", num(c.abs_tol)},
                          {"wall_clock", c.wall_clock ? "true" : "false"},
                          {"seed", std::to_string(c.seed)},
                      });
    return s;
}

inline ProtocolMode protocol_mode(const RunConfig& c) {
    ProtocolMode m;
    m.idle_coupler_decay = c.idle_coupler_decay;
    m.integrator.rel_tol = c.rel_tol;
    m.integrator.abs_tol = c.abs_tol;
    if (c.engine == "brute") m.engine = Engine::brute;
    if (c.engine == "effective") m.step4 = Step4Model::effective;
    if (c.engine == "lossless") m.lossy = false;
    return m;
}

// CSV with a `#` block echoing the resolved configuration.
class CsvWriter {
public:
    CsvWriter(std::ostream& out, const RunConfig& c, std::string command, std::vector<std::string> columns)
        : out_(out), columns_(std::move(columns)) {
        out_ << "# nvecs " << command << "\n";
        for (const auto& [k, v] : resolved_settings(c)) out_ << "# " << k << " = " << v << "\n";
        for (std::size_t i = 0; i < columns_.size(); ++i) out_ << (i ? "," : "") << columns_[i];
        out_ << "\n";
    }

    void row(const std::vector<double>& values) {
        if (values.size() != columns_.size())
            throw Error("CsvWriter: row has " + std::to_string(values.size()) + " values for " +
                        std::to_string(columns_.size()) + " columns");
        for (std::size_t i = 0; i < values.size(); ++i) out_ << (i ? "," : "") << detail::num(values[i]);
        out_ << "\n";
    }

    const std::vector<std::string>& columns() const { return columns_; }

private:
    std::ostream& out_;
    std::vector<std::string> columns_;
};

}  // namespace nvecs
