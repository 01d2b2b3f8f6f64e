#include "substeer/config.hpp"
#include "substeer/error.hpp"
#include "substeer/workflow.hpp"

#include <cstdlib>
#include <iostream>
#include <optional>

#include "CLI11.hpp"

namespace {

const char* stage_help(const std::string& s) {
    static const std::map<std::string, const char*> help{
        {"gen-corpus", "generate training corpus, prompt pools, held-out set and lexicon"},
        {"train-lm", "train the toy transformer"},
        {"collect", "decode continuations of the discovery prompts and keep head-point states"},
        {"attribute", "leave-one-out attribution of continuation tokens"},
        {"grads", "build the normalized gradient matrix and its permutation control"},
        {"discover", "top-k right singular vectors of the gradient matrix"},
        {"steer-eval", "evaluate the configured steering against vanilla decoding"},
        {"sweep", "beta x layer grid of evaluations"},
        {"strategies", "train the gate and compare intervention strategies"},
        {"theory-check", "containment, locality, stability and null-model checks"},
        {"bench", "per-token runtime overhead and projection cost scaling"},
        {"report", "verify provenance and write aggregates, matrices and summary"},
    };
    return help.at(s);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Gradient-derived toxicity subspace discovery and inference-time steering"};
    app.require_subcommand(1);
    std::string config_file, workdir;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    app.add_option("--config", config_file, "JSON run-config file")->check(CLI::ExistingFile);
    app.add_option("--workdir", workdir, "artifact directory (default: paths.workdir, then $SUBSPACE_STEER_WORKDIR)");
    app.add_option("--set", sets, "override a config key, section.key=value (repeatable)");
    app.add_option("--seed", seed, "sets corpus.seed and model.seed; --set takes precedence");

    for (const auto& s : substeer::workflow::stage_names()) app.add_subcommand(s, stage_help(s));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        std::vector<std::string> all;
        if (seed) {
            all.push_back("corpus.seed=" + std::to_string(*seed));
            all.push_back("model.seed=" + std::to_string(*seed));
        }
        all.insert(all.end(), sets.begin(), sets.end());
        auto cfg = substeer::load_run_config(config_file, all);
        if (!workdir.empty()) {
            cfg.workdir = workdir;
        } else if (cfg.workdir.empty()) {
            if (const char* env = std::getenv("SUBSPACE_STEER_WORKDIR")) cfg.workdir = env;
        }
        const auto name = app.get_subcommands().front()->get_name();
        std::cout << substeer::workflow::run_stage(name, cfg) << std::endl;
        return 0;
    } catch (const substeer::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return substeer::exit_code_for(e.kind());
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
