// nvecs: protocol runs and parameter sweeps written as CSV.

#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "nvecs/config.hpp"
#include "nvecs/errors.hpp"
#include "nvecs/sweeps.hpp"

namespace {

enum Exit { ok = 0, usage = 1, config_error = 2, numerical_error = 3, infeasible = 4 };

struct Options {
    std::string config;
    std::string out;
    std::string engine;
    std::size_t jobs = 0;
    std::vector<std::string> sets;
    std::string log_level = "warn";
};

int run(const std::string& name, const Options& o, const std::function<void(const nvecs::RunConfig&, std::ostream&)>& cmd) {
    using namespace nvecs;
    try {
        RunConfig c;
        if (!o.config.empty()) c = load_config(o.config);
        for (const auto& s : o.sets) apply_assignment(c, s);
        if (!o.engine.empty()) apply_setting(c, "engine", o.engine);
        if (o.jobs > 0) c.jobs = o.jobs;
        validate(c);

        std::ofstream file;
        if (!o.out.empty()) {
            file.open(o.out);
            if (!file) throw ConfigError("cannot write '" + o.out + "'");
        }
        std::ostream& out = o.out.empty() ? std::cout : file;
        spdlog::info("{}: engine {}, {} job(s)", name, c.engine, c.jobs);
        cmd(c, out);
        out.flush();
        if (!out) throw Error("write to output failed");
        return ok;
    } catch (const nvecs::ConfigError& e) {
        spdlog::error("config: {}", e.what());
        return config_error;
    } catch (const nvecs::InfeasibleError& e) {
        spdlog::error("infeasible: {}", e.what());
        return infeasible;
    } catch (const nvecs::IntegrationError& e) {
        spdlog::error("integration failed at t = {}: {}", e.time(), e.what());
        return numerical_error;
    } catch (const nvecs::AccuracyError& e) {
        spdlog::error("accuracy: {}", e.what());
        return numerical_error;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return numerical_error;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Entangled coherent W states of NV ensembles: protocol runs and sweeps"};
    app.require_subcommand(1);
    Options o;
    app.add_option("--log-level", o.log_level, "trace, debug, info, warn, error")->capture_default_str();

    const std::map<std::string, std::function<void(const nvecs::RunConfig&, std::ostream&)>> commands{
        {"step-fidelity", nvecs::cmd_step_fidelity},
        {"sweep-d", nvecs::cmd_sweep_d},
        {"time-trace", nvecs::cmd_time_trace},
        {"full-run", nvecs::cmd_full_run},
        {"state-transfer", nvecs::cmd_state_transfer},
        {"bosonization-check", nvecs::cmd_bosonization_check},
    };
    const std::map<std::string, std::string> help{
        {"step-fidelity", "fidelity of step 1, 2 or 3 versus its coupling (set step=1..3)"},
        {"sweep-d", "full-protocol fidelity versus D = delta_b / g_b"},
        {"time-trace", "fidelity, |beta|/2 and cavity photons during step 4"},
        {"full-run", "one full protocol run"},
        {"state-transfer", "NVE to cavity coherent-state transfer"},
        {"bosonization-check", "collective-mode check of a small spin ensemble"},
    };
    std::vector<CLI::App*> subs;
    for (const auto& [name, fn] : commands) {
        auto* sub = app.add_subcommand(name, help.at(name));
        sub->add_option("--config", o.config, "key = value config file");
        sub->add_option("--out", o.out, "CSV output path (default stdout)");
        sub->add_option("--jobs", o.jobs, "worker threads");
        sub->add_option("--engine", o.engine, "factorized, brute, effective or lossless")
            ->check(CLI::IsMember({"factorized", "brute", "effective", "lossless"}));
        sub->add_option("--set", o.sets, "override a config key (key=value, repeatable)");
        subs.push_back(sub);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : usage;
    }
    spdlog::set_default_logger(spdlog::stderr_color_mt("nvecs"));
    spdlog::set_level(spdlog::level::from_str(o.log_level));

    for (auto* sub : subs)
        if (sub->parsed()) return run(sub->get_name(), o, commands.at(sub->get_name()));
    return usage;
}
