// End-to-end checks of the command-line binary: exit codes, artifact layout,
// determinism of CSV/JSON outputs, config echo round-trips, EMA
// reconstruction against stored snapshots, and WAV enhancement.

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <catch2/catch_amalgamated.hpp>

#include "edm2se/ema.hpp"
#include "edm2se/serialize.hpp"
#include "edm2se/store.hpp"
#include "edm2se/wavio.hpp"

using namespace edm2se;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string output; // stdout and stderr combined
};

RunResult run_cli(const std::string& args, const std::string& env = "") {
    const std::string cmd = (env.empty() ? "" : env + " ") + std::string(EDM2SE_CLI_PATH) + " " +
                            args + " 2>&1";
    std::array<char, 4096> buf{};
    RunResult r;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    while (size_t got = std::fread(buf.data(), 1, buf.size(), pipe)) r.output.append(buf.data(), got);
    const int status = pclose(pipe);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path fresh_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    return dir;
}

const char* kTinyConfig = R"({
  "seed": 7,
  "batch_size": 2,
  "total_steps": 4,
  "snapshot_every": 2,
  "segment_samples": 160,
  "measure_stats": false,
  "sigma_x2": 0.029,
  "sigma_n2": 0.023,
  "width0": 8,
  "width1": 12,
  "emb_dim": 16,
  "eval_items": 2,
  "eval_length": 1024,
  "eval_steps": 4
})";

fs::path write_tiny_config(const std::string& name) {
    const auto p = fs::temp_directory_path() / name;
    std::ofstream out(p);
    out << kTinyConfig << "\n";
    return p;
}

// One shared tiny training run; several sections read it.
const fs::path& tiny_run() {
    static const fs::path dir = [] {
        const auto d = fresh_dir("edm2se_cli_run");
        const auto cfg = write_tiny_config("edm2se_cli_tiny.json");
        const auto r = run_cli("train --config " + cfg.string() + " --out " + d.string());
        REQUIRE(r.exit_code == 0);
        return d;
    }();
    return dir;
}

} // namespace

TEST_CASE("selftest passes on the default config") {
    const auto r = run_cli("selftest");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("all checks passed") != std::string::npos);
    CHECK(r.output.find("FAIL") == std::string::npos);
}

TEST_CASE("selftest names the schedule invariant when a constant is corrupted") {
    const auto p = fs::temp_directory_path() / "edm2se_cli_bad_sched.json";
    std::ofstream(p) << R"({"sched_c": -0.4})";
    const auto r = run_cli("selftest --config " + p.string());
    CHECK(r.exit_code != 0);
    CHECK(r.output.find("schedule.positive-constants") != std::string::npos);
    CHECK(r.output.find("FAIL") != std::string::npos);
    CHECK(r.output.find("c must be positive") != std::string::npos);
}

TEST_CASE("invalid configs exit with code 2 and name the offender") {
    const auto dir = fresh_dir("edm2se_cli_never");
    auto write = [](const char* name, const char* text) {
        const auto p = fs::temp_directory_path() / name;
        std::ofstream(p) << text;
        return p.string();
    };

    const auto unknown = run_cli("train --config " +
                                 write("edm2se_cli_unknown.json", R"({"batchsize": 4})") + " --out " +
                                 dir.string());
    CHECK(unknown.exit_code == 2);
    CHECK(unknown.output.find("batchsize") != std::string::npos);

    const auto badtype = run_cli("train --config " +
                                 write("edm2se_cli_badtype.json", R"({"lr0": "fast"})") + " --out " +
                                 dir.string());
    CHECK(badtype.exit_code == 2);
    CHECK(badtype.output.find("lr0") != std::string::npos);

    const auto badval = run_cli("train --config " +
                                write("edm2se_cli_badval.json", R"({"batch_size": 0})") + " --out " +
                                dir.string());
    CHECK(badval.exit_code == 2);
    CHECK(badval.output.find("batch_size") != std::string::npos);

    const auto badmode = run_cli("train --config " +
                                 write("edm2se_cli_badmode.json", R"({"skip_mode": "both"})") +
                                 " --out " + dir.string());
    CHECK(badmode.exit_code == 2);
    CHECK(badmode.output.find("skip_mode") != std::string::npos);

    CHECK(!fs::exists(dir)); // rejected configs never touch the disk
}

TEST_CASE("training writes the artifact set and reruns byte-identically") {
    const auto& dir = tiny_run();
    for (const char* f : {"config.json", "train_log.csv", "stats.json", "model_base.bin"})
        CHECK(fs::exists(dir / f));
    CHECK(fs::exists(dir / "snapshots" / "snapshots.json"));

    const auto store = SnapshotStore::open((dir / "snapshots").string());
    CHECK(store.n_total() == 4);
    CHECK(store.records().size() == 4); // 2 snapshot times x 2 traces

    const auto dir2 = fresh_dir("edm2se_cli_rerun");
    const auto cfg = write_tiny_config("edm2se_cli_tiny2.json");
    const auto r = run_cli("train --config " + cfg.string() + " --out " + dir2.string());
    REQUIRE(r.exit_code == 0);
    CHECK(slurp(dir2 / "train_log.csv") == slurp(dir / "train_log.csv"));
    CHECK(slurp(dir2 / "stats.json") == slurp(dir / "stats.json"));
    CHECK(slurp(dir2 / "model_base.bin") == slurp(dir / "model_base.bin"));
    fs::remove_all(dir2);
}

TEST_CASE("the echoed config re-runs to identical results") {
    const auto& dir = tiny_run();
    const auto dir2 = fresh_dir("edm2se_cli_echo");
    const auto r = run_cli("train --config " + (dir / "config.json").string() + " --out " +
                           dir2.string());
    REQUIRE(r.exit_code == 0);
    CHECK(slurp(dir2 / "config.json") == slurp(dir / "config.json"));
    CHECK(slurp(dir2 / "train_log.csv") == slurp(dir / "train_log.csv"));
    CHECK(slurp(dir2 / "model_base.bin") == slurp(dir / "model_base.bin"));
    fs::remove_all(dir2);
}

TEST_CASE("EDM2SE_SEED overrides the config seed") {
    const auto cfg = write_tiny_config("edm2se_cli_tiny3.json");
    const auto denv = fresh_dir("edm2se_cli_env");
    const auto r1 = run_cli("train --config " + cfg.string() + " --out " + denv.string(),
                            "EDM2SE_SEED=9");
    REQUIRE(r1.exit_code == 0);

    // same run with the seed written into the config instead
    std::string text = kTinyConfig;
    text.replace(text.find("\"seed\": 7"), 9, "\"seed\": 9");
    const auto cfg9 = fs::temp_directory_path() / "edm2se_cli_tiny_seed9.json";
    std::ofstream(cfg9) << text;
    const auto dcfg = fresh_dir("edm2se_cli_seed9");
    const auto r2 = run_cli("train --config " + cfg9.string() + " --out " + dcfg.string());
    REQUIRE(r2.exit_code == 0);

    CHECK(slurp(denv / "train_log.csv") == slurp(dcfg / "train_log.csv"));
    CHECK(slurp(denv / "model_base.bin") == slurp(dcfg / "model_base.bin"));
    CHECK(slurp(denv / "train_log.csv") != slurp(tiny_run() / "train_log.csv"));
    // the echo keeps the effective seed
    CHECK(slurp(denv / "config.json").find("\"seed\": 9") != std::string::npos);

    const auto bad = run_cli("selftest", "EDM2SE_SEED=ten");
    CHECK(bad.exit_code == 2);
    CHECK(bad.output.find("EDM2SE_SEED") != std::string::npos);
    fs::remove_all(denv);
    fs::remove_all(dcfg);
}

TEST_CASE("ema-reconstruct at a stored trace's own width returns that snapshot") {
    const auto& dir = tiny_run();
    const auto store = SnapshotStore::open((dir / "snapshots").string());
    const double sigma = sigma_rel_for_gamma(store.n_total(), 6.94);

    char arg[64];
    std::snprintf(arg, sizeof arg, "%.12g", sigma);
    const auto out = fs::temp_directory_path() / "edm2se_cli_inspan.bin";
    const auto r = run_cli("ema-reconstruct --store " + dir.string() + " --sigma-rel " + arg +
                           " --out " + out.string());
    REQUIRE(r.exit_code == 0);

    const SnapshotRecord* want = nullptr;
    for (const auto& rec : store.records())
        if (rec.gamma == Catch::Approx(6.94) && rec.step == store.n_total()) want = &rec;
    REQUIRE(want != nullptr);
    const auto snap = store.load(*want);
    const auto model = read_blob(out.string());
    for (const auto& t : snap) {
        const auto* got = find_tensor(model, t.name);
        REQUIRE(got != nullptr);
        REQUIRE(got->value.numel() == t.value.numel());
        for (size_t i = 0; i < t.value.numel(); ++i)
            REQUIRE(got->value[i] == Catch::Approx(t.value[i]).margin(2e-6).epsilon(1e-6));
    }
}

TEST_CASE("ema-reconstruct with non-positive width returns the raw final model") {
    const auto& dir = tiny_run();
    const auto out = fs::temp_directory_path() / "edm2se_cli_raw.bin";
    const auto r = run_cli("ema-reconstruct --store " + dir.string() + " --sigma-rel 0 --out " +
                           out.string());
    REQUIRE(r.exit_code == 0);
    CHECK(slurp(out) == slurp(dir / "model_base.bin"));
}

TEST_CASE("ema-reconstruct rejects unreachable widths naming the achievable range") {
    const auto& dir = tiny_run();
    const auto out = fs::temp_directory_path() / "edm2se_cli_unreach.bin";
    const auto r = run_cli("ema-reconstruct --store " + dir.string() + " --sigma-rel 0.5 --out " +
                           out.string());
    CHECK(r.exit_code != 0);
    CHECK(r.output.find("achievable range [") != std::string::npos);
}

TEST_CASE("ema-sweep emits one row per grid value and tolerates failures") {
    const auto& dir = tiny_run();
    const auto out = fs::temp_directory_path() / "edm2se_cli_sweep.csv";
    const auto r = run_cli("ema-sweep --store " + dir.string() +
                           " --grid 0.001,0.05,0.5 --metric si_sdr --out " + out.string());
    REQUIRE(r.exit_code == 0);

    std::istringstream csv(slurp(out));
    std::string line;
    std::getline(csv, line);
    CHECK(line == "sigma_rel,si_sdr,loss");
    int rows = 0, nan_rows = 0;
    while (std::getline(csv, line)) {
        if (line.empty()) continue;
        ++rows;
        if (line.find("nan") != std::string::npos) ++nan_rows;
    }
    CHECK(rows == 3);
    CHECK(nan_rows == 1); // 0.5 lies beyond the achievable range

    const auto out2 = fs::temp_directory_path() / "edm2se_cli_sweep2.csv";
    const auto r2 = run_cli("ema-sweep --store " + dir.string() +
                            " --grid 0.001,0.05,0.5 --metric si_sdr --out " + out2.string());
    REQUIRE(r2.exit_code == 0);
    CHECK(slurp(out2) == slurp(out)); // byte-identical rerun

    const auto badmetric = run_cli("ema-sweep --store " + dir.string() +
                                   " --grid 0.05 --metric pesq --out " + out2.string());
    CHECK(badmetric.exit_code == 2);
    CHECK(badmetric.output.find("pesq") != std::string::npos);
}

TEST_CASE("enhance denoises a WAV preserving length and rate") {
    const auto& dir = tiny_run();
    WaveformT<float> noisy;
    noisy.sample_rate = 8000;
    noisy.samples.resize(2048);
    Rng rng(123);
    for (auto& v : noisy.samples) v = 0.25f * static_cast<float>(rng.normal());
    const auto in_wav = fs::temp_directory_path() / "edm2se_cli_in.wav";
    write_wav(in_wav.string(), noisy);

    const auto out_wav = fs::temp_directory_path() / "edm2se_cli_out.wav";
    const auto r = run_cli("enhance --model " + (dir / "model_base.bin").string() + " --in " +
                           in_wav.string() + " --out " + out_wav.string() + " --steps 4");
    REQUIRE(r.exit_code == 0);
    const auto out = read_wav<float>(out_wav.string());
    CHECK(out.sample_rate == 8000);
    CHECK(out.samples.size() == noisy.samples.size());

    const auto out_wav2 = fs::temp_directory_path() / "edm2se_cli_out2.wav";
    const auto r2 = run_cli("enhance --model " + (dir / "model_base.bin").string() + " --in " +
                            in_wav.string() + " --out " + out_wav2.string() + " --steps 4");
    REQUIRE(r2.exit_code == 0);
    CHECK(slurp(out_wav2) == slurp(out_wav));

    const auto missing = run_cli("enhance --model /nonexistent.bin --in " + in_wav.string() +
                                 " --out " + out_wav.string());
    CHECK(missing.exit_code == 1);
}
