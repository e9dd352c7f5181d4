// Command-line front end: one subcommand per experiment kind.
//
//   fip_cli <continual|sparsify|ensemble|compose|spectrum> --config FILE [--out DIR] [--seed N]
//
// Exit status 0 on success. On failure a single JSON object
// {"error": {"code": ..., "message": ...}} is written to stderr and the status is 1
// (2 for command-line usage errors).

#include "fip/experiments.hpp"

#include "CLI11.hpp"

#include <fstream>
#include <iostream>

namespace {

int fail(std::string_view code, const std::string& message, int status = 1)
{
    const fip::Json err = {{"error", {{"code", std::string(code)}, {"message", message}}}};
    std::cerr << err.dump() << '\n';
    return status;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Functionally invariant path experiments"};
    app.require_subcommand(1);

    std::string config_file;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    for (const char* kind : {"continual", "sparsify", "ensemble", "compose", "spectrum"}) {
        auto* sub = app.add_subcommand(kind, std::string("run the ") + kind + " experiment");
        sub->add_option("--config", config_file, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
        sub->add_option("--out", out_dir, "output directory (overrides the config)");
        sub->add_option("--seed", seed, "experiment seed (overrides the config)");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage", e.what(), 2);
    }
    const std::string kind = app.get_subcommands().front()->get_name();

    try {
        std::ifstream in(config_file);
        fip::Json j;
        try {
            j = fip::Json::parse(in);
        } catch (const fip::Json::exception& e) {
            throw fip::Error(fip::Errc::config_error, std::string("config is not valid JSON: ") + e.what());
        }
        if (j.contains("kind") && j["kind"] != kind)
            throw fip::Error(fip::Errc::config_error,
                             "config kind '" + j["kind"].get<std::string>() + "' does not match subcommand '" + kind + "'");
        j["kind"] = kind;
        if (seed)
            j["seed"] = *seed;
        if (!out_dir.empty())
            j["output_dir"] = out_dir;
        const auto cfg = fip::experiment_config_from_json(j, std::filesystem::path(config_file).parent_path());
        const fip::RunLog log = fip::run_experiment(cfg);
        std::cout << log.records().back().dump() << '\n';
        return 0;
    } catch (const fip::Error& e) {
        return fail(fip::to_string(e.code()), e.what());
    } catch (const std::exception& e) {
        return fail("internal", e.what());
    }
}
