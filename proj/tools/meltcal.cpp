// meltcal command line: runs one pipeline stage (and whatever it depends on)
// or the whole sequence.
#include <cstdlib>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "meltcal/meltcal.hpp"

namespace {

std::string one_line(std::string s) {
    for (char& c : s)
        if (c == '\n' || c == '\r') c = ' ';
    return s;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bayesian calibration of melt pool model parameters"};
    app.require_subcommand(1, 1);
    app.fallthrough();

    std::string config_path;
    const char* env_out = std::getenv("MELTCAL_OUT");
    std::string out_dir = env_out && *env_out ? env_out : "";
    std::uint64_t seed = 0;
    unsigned threads = 1;
    bool quiet = false;
    app.add_option("--config", config_path, "JSON run configuration (defaults apply when omitted)");
    auto* out_opt = app.add_option("--out", out_dir, "output directory (default: config output_dir, or $MELTCAL_OUT)");
    auto* seed_opt = app.add_option("--seed", seed, "override the configured seed");
    app.add_option("--threads", threads, "worker thread cap")->check(CLI::Range(1u, 1024u));
    app.add_flag("-q,--quiet", quiet, "suppress stage progress on stderr");

    for (const auto& s : meltcal::stage_names()) app.add_subcommand(s, "run the " + s + " stage and its prerequisites");
    app.add_subcommand("run-all", "run every stage");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << "error: usage: " << e.what() << '\n';
        return 2;
    }

    try {
        meltcal::RunConfig cfg;
        if (!config_path.empty()) cfg = meltcal::load_config(config_path);
        if (*seed_opt) cfg.seed = seed;
        if (out_opt->count() == 0 && out_dir.empty()) out_dir = cfg.output_dir;
        cfg.output_dir = out_dir;
        meltcal::fs::create_directories(out_dir);
        meltcal::Pipeline pipeline(cfg, out_dir, threads, quiet ? nullptr : &std::cerr);
        const std::string cmd = app.get_subcommands().front()->get_name();
        if (cmd == "run-all") pipeline.run_all();
        else pipeline.run(cmd);
        std::cout << "ok: " << cmd << " -> " << out_dir << '\n';
        return 0;
    } catch (const meltcal::Error& e) {
        std::cerr << "error: " << e.category() << ": " << one_line(e.what()) << '\n';
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << one_line(e.what()) << '\n';
    }
    return 1;
}
