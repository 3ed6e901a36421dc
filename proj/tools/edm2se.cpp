// Command-line front end: self-tests, training runs, post-hoc EMA
// reconstruction and sweeps, and waveform enhancement. Every command is
// deterministic given its config and seed; CSV/JSON outputs are byte-stable
// across reruns. Exit codes: 0 success, 1 runtime failure, 2 config error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "edm2se/config.hpp"
#include "edm2se/pipeline.hpp"
#include "edm2se/selftest.hpp"
#include "edm2se/trainer.hpp"
#include "edm2se/wavio.hpp"

namespace {

using namespace edm2se;

RunConfig load_run_config(const std::string& path) {
    RunConfig cfg = path.empty() ? RunConfig{} : config_from_file(path);
    if (const char* env = std::getenv("EDM2SE_SEED")) {
        try {
            size_t used = 0;
            const unsigned long long v = std::stoull(env, &used);
            if (used != std::string(env).size()) throw std::invalid_argument("trailing characters");
            cfg.seed = v;
        } catch (const std::exception&) {
            throw std::invalid_argument("config: EDM2SE_SEED must be a non-negative integer, got \"" +
                                        std::string(env) + "\"");
        }
    }
    return cfg;
}

std::vector<double> parse_grid(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
            throw std::invalid_argument("config: grid entry \"" + item + "\" is not a number");
        }
    }
    if (out.empty()) throw std::invalid_argument("config: --grid must list at least one value");
    return out;
}

// Evaluation knobs for a sweep come from the config echoed next to the
// store when present, so a sweep rates models the way the run defined it.
RunConfig sweep_config(const std::string& store_dir) {
    namespace fs = std::filesystem;
    const auto paths = resolve_store(store_dir);
    const auto echo = fs::path(paths.snapshots).parent_path() / "config.json";
    if (fs::exists(echo)) return load_run_config(echo.string());
    return load_run_config("");
}

int cmd_selftest(const std::string& config_path) {
    const auto cfg = load_run_config(config_path);
    return print_selftest(run_selftest(cfg), std::cout);
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
    const auto cfg = load_run_config(config_path);
    cfg.train_config().validate(); // reject before touching the disk
    std::filesystem::create_directories(out_dir);
    {
        std::ofstream echo(std::filesystem::path(out_dir) / "config.json");
        if (!echo) throw std::runtime_error("train: cannot write config echo in " + out_dir);
        echo << config_to_json(cfg);
    }
    train_run(cfg.train_config(), out_dir, cfg.net_config(), cfg.schedule(), cfg.stft_config(),
              cfg.compression(), &std::cout);
    std::cout << "wrote " << (std::filesystem::path(out_dir) / "model_base.bin").string() << "\n";
    return 0;
}

int cmd_ema_reconstruct(const std::string& store, double sigma_rel, const std::string& out) {
    const auto model = reconstruct_model(store, sigma_rel);
    save_model(out, model.net, model.meta);
    std::cout << "wrote " << out << "\n";
    return 0;
}

int cmd_ema_sweep(const std::string& store, const std::string& grid_text, const std::string& metric,
                  const std::string& out) {
    if (metric != "si_sdr")
        throw std::invalid_argument("config: unsupported metric \"" + metric + "\" (only si_sdr)");
    const auto grid = parse_grid(grid_text);
    const auto cfg = sweep_config(store);
    const auto points = ema_sweep_run(store, grid, cfg.seed, cfg.eval_items, cfg.eval_snr_db,
                                      cfg.eval_length, cfg.eval_steps);
    write_sweep_csv(out, points);
    for (const auto& p : points) {
        if (p.ok)
            std::printf("sigma_rel=%.10g  si_sdr=%.10g dB  loss=%.10g\n", p.sigma_rel, p.si_sdr_out,
                        p.loss);
        else
            std::printf("sigma_rel=%.10g  failed: %s\n", p.sigma_rel, p.error.c_str());
    }
    std::cout << "wrote " << out << "\n";
    return 0;
}

int cmd_enhance(const std::string& model_path, const std::string& in_wav, const std::string& out_wav,
                int steps) {
    if (steps < 1) throw std::invalid_argument("config: --steps must be >= 1");
    const auto model = load_model(model_path);
    const auto noisy = read_wav<float>(in_wav);
    const auto out = enhance_with_model(noisy, model.net, model.meta, steps);
    write_wav(out_wav, out);
    std::cout << "wrote " << out_wav << " (" << out.samples.size() << " samples at "
              << out.sample_rate << " Hz)\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Schroedinger-bridge speech enhancement toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_dir, store, out_file, grid_text, metric = "si_sdr";
    std::string model_path, in_wav, out_wav;
    double sigma_rel = 0.0;
    int steps = 50;

    auto* selftest = app.add_subcommand("selftest", "run the built-in invariant suite");
    selftest->add_option("--config", config_path, "JSON run config");

    auto* train = app.add_subcommand("train", "train a model on synthetic mixtures");
    train->add_option("--config", config_path, "JSON run config")->required();
    train->add_option("--out", out_dir, "output directory")->required();

    auto* rec = app.add_subcommand("ema-reconstruct", "synthesize a model at a target sigma_rel");
    rec->add_option("--store", store, "training output or snapshot directory")->required();
    rec->add_option("--sigma-rel", sigma_rel, "target relative averaging width (<= 0: raw final)")
        ->required();
    rec->add_option("--out", out_file, "output model file")->required();

    auto* sweep = app.add_subcommand("ema-sweep", "evaluate a grid of sigma_rel values");
    sweep->add_option("--store", store, "training output or snapshot directory")->required();
    sweep->add_option("--grid", grid_text, "comma-separated sigma_rel values")->required();
    sweep->add_option("--metric", metric, "metric column (si_sdr)");
    sweep->add_option("--out", out_file, "output CSV")->required();

    auto* enh = app.add_subcommand("enhance", "denoise a WAV file with a trained model");
    enh->add_option("--model", model_path, "model file")->required();
    enh->add_option("--in", in_wav, "input WAV (mono)")->required();
    enh->add_option("--out", out_wav, "output WAV")->required();
    enh->add_option("--steps", steps, "sampler steps");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) ? 2 : 0;
    }

    try {
        if (selftest->parsed()) return cmd_selftest(config_path);
        if (train->parsed()) return cmd_train(config_path, out_dir);
        if (rec->parsed()) return cmd_ema_reconstruct(store, sigma_rel, out_file);
        if (sweep->parsed()) return cmd_ema_sweep(store, grid_text, metric, out_file);
        if (enh->parsed()) return cmd_enhance(model_path, in_wav, out_wav, steps);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
