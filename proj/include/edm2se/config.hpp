#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "edm2se/net.hpp"
#include "edm2se/precond.hpp"
#include "edm2se/schedule.hpp"
#include "edm2se/signal.hpp"
#include "edm2se/trainer.hpp"

namespace edm2se {

// One flat JSON document drives every command: training, sampling, evaluation
// and the signal chain. Unknown keys are rejected so typos cannot silently
// fall back to defaults.
struct RunConfig {
    // training
    uint64_t seed = 1;
    int batch_size = 8;
    long long total_steps = 6144;
    long long snapshot_every = 256;
    double lr0 = 2.5e-3;
    double lr_ref_samples = 3e4;
    double alpha = 0.0;
    std::string skip_mode = "clean";
    double train_snr_db = 5.0;
    int segment_samples = 192;
    int sample_rate = 8000;
    bool measure_stats = true;
    int stats_items = 512;
    double sigma_x2 = 0.402;
    double sigma_n2 = 0.342;
    std::vector<double> ema_gammas = {16.97, 6.94};
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.99;
    double adam_eps = 1e-8;

    // bridge schedule
    double sched_c = 0.4;
    double sched_k = 2.6;
    double t_eps = 0.02;

    // signal chain
    int stft_win = 128;
    int stft_hop = 32;
    double comp_scale = 0.15;
    double comp_exponent = 0.5;

    // network
    int width0 = 24;
    int width1 = 48;
    int emb_dim = 64;
    double weight_eps = 1e-4;

    // sampling and held-out evaluation
    int n_steps = 50;
    int eval_items = 32;
    double eval_snr_db = 5.0;
    int eval_length = 4096;
    int eval_steps = 18;

    SkipMode parsed_skip_mode() const {
        if (skip_mode == "clean") return SkipMode::CleanPrediction;
        if (skip_mode == "noise") return SkipMode::NoisePrediction;
        throw std::invalid_argument("config: \"skip_mode\" must be \"clean\" or \"noise\"");
    }

    TrainConfig train_config() const {
        TrainConfig t;
        t.seed = seed;
        t.batch_size = batch_size;
        t.total_steps = total_steps;
        t.snapshot_every = snapshot_every;
        t.lr0 = lr0;
        t.lr_ref_samples = lr_ref_samples;
        t.alpha = alpha;
        t.skip_mode = parsed_skip_mode();
        t.train_snr_db = train_snr_db;
        t.segment_samples = segment_samples;
        t.sample_rate = sample_rate;
        t.measure_stats = measure_stats;
        t.stats_items = stats_items;
        t.sigma_x2 = sigma_x2;
        t.sigma_n2 = sigma_n2;
        t.ema_gammas = ema_gammas;
        t.adam_beta1 = adam_beta1;
        t.adam_beta2 = adam_beta2;
        t.adam_eps = adam_eps;
        return t;
    }

    NetConfig net_config() const {
        NetConfig n;
        n.in_channels = 2;
        n.width0 = width0;
        n.width1 = width1;
        n.emb_dim = emb_dim;
        const int bins = stft_win / 2 + 1;
        n.freq_bins = bins + (bins % 2); // canvas height, padded to even
        n.weight_eps = weight_eps;
        return n;
    }

    BridgeSchedule schedule() const { return BridgeSchedule{sched_c, sched_k, t_eps}; }
    StftConfig stft_config() const { return StftConfig{stft_win, stft_hop}; }
    CompressionParams compression() const { return CompressionParams{comp_scale, comp_exponent}; }
};

namespace config_detail {

using ordered_json = nlohmann::ordered_json;

inline std::invalid_argument type_error(const std::string& key, const char* want) {
    return std::invalid_argument("config: field \"" + key + "\" must be " + want);
}

inline double as_number(const ordered_json& v, const std::string& key) {
    if (!v.is_number()) throw type_error(key, "a number");
    return v.get<double>();
}

inline long long as_integer(const ordered_json& v, const std::string& key) {
    if (!v.is_number_integer()) throw type_error(key, "an integer");
    return v.get<long long>();
}

inline int as_int(const ordered_json& v, const std::string& key) {
    const long long x = as_integer(v, key);
    if (x < INT32_MIN || x > INT32_MAX) throw type_error(key, "a 32-bit integer");
    return static_cast<int>(x);
}

inline uint64_t as_seed(const ordered_json& v, const std::string& key) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0))
        throw type_error(key, "a non-negative integer");
    return v.get<uint64_t>();
}

inline bool as_bool(const ordered_json& v, const std::string& key) {
    if (!v.is_boolean()) throw type_error(key, "a boolean");
    return v.get<bool>();
}

inline std::string as_string(const ordered_json& v, const std::string& key) {
    if (!v.is_string()) throw type_error(key, "a string");
    return v.get<std::string>();
}

inline std::vector<double> as_number_array(const ordered_json& v, const std::string& key) {
    if (!v.is_array()) throw type_error(key, "an array of numbers");
    std::vector<double> out;
    out.reserve(v.size());
    for (const auto& e : v) {
        if (!e.is_number()) throw type_error(key, "an array of numbers");
        out.push_back(e.get<double>());
    }
    return out;
}

} // namespace config_detail

inline RunConfig config_from_json(const std::string& text) {
    using config_detail::ordered_json;
    namespace cd = config_detail;
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::invalid_argument(std::string("config: not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw std::invalid_argument("config: top level must be a JSON object");

    RunConfig c;
    for (const auto& [key, val] : j.items()) {
        if (key == "seed") c.seed = cd::as_seed(val, key);
        else if (key == "batch_size") c.batch_size = cd::as_int(val, key);
        else if (key == "total_steps") c.total_steps = cd::as_integer(val, key);
        else if (key == "snapshot_every") c.snapshot_every = cd::as_integer(val, key);
        else if (key == "lr0") c.lr0 = cd::as_number(val, key);
        else if (key == "lr_ref_samples") c.lr_ref_samples = cd::as_number(val, key);
        else if (key == "alpha") c.alpha = cd::as_number(val, key);
        else if (key == "skip_mode") c.skip_mode = cd::as_string(val, key);
        else if (key == "train_snr_db") c.train_snr_db = cd::as_number(val, key);
        else if (key == "segment_samples") c.segment_samples = cd::as_int(val, key);
        else if (key == "sample_rate") c.sample_rate = cd::as_int(val, key);
        else if (key == "measure_stats") c.measure_stats = cd::as_bool(val, key);
        else if (key == "stats_items") c.stats_items = cd::as_int(val, key);
        else if (key == "sigma_x2") c.sigma_x2 = cd::as_number(val, key);
        else if (key == "sigma_n2") c.sigma_n2 = cd::as_number(val, key);
        else if (key == "ema_gammas") c.ema_gammas = cd::as_number_array(val, key);
        else if (key == "adam_beta1") c.adam_beta1 = cd::as_number(val, key);
        else if (key == "adam_beta2") c.adam_beta2 = cd::as_number(val, key);
        else if (key == "adam_eps") c.adam_eps = cd::as_number(val, key);
        else if (key == "sched_c") c.sched_c = cd::as_number(val, key);
        else if (key == "sched_k") c.sched_k = cd::as_number(val, key);
        else if (key == "t_eps") c.t_eps = cd::as_number(val, key);
        else if (key == "stft_win") c.stft_win = cd::as_int(val, key);
        else if (key == "stft_hop") c.stft_hop = cd::as_int(val, key);
        else if (key == "comp_scale") c.comp_scale = cd::as_number(val, key);
        else if (key == "comp_exponent") c.comp_exponent = cd::as_number(val, key);
        else if (key == "width0") c.width0 = cd::as_int(val, key);
        else if (key == "width1") c.width1 = cd::as_int(val, key);
        else if (key == "emb_dim") c.emb_dim = cd::as_int(val, key);
        else if (key == "weight_eps") c.weight_eps = cd::as_number(val, key);
        else if (key == "n_steps") c.n_steps = cd::as_int(val, key);
        else if (key == "eval_items") c.eval_items = cd::as_int(val, key);
        else if (key == "eval_snr_db") c.eval_snr_db = cd::as_number(val, key);
        else if (key == "eval_length") c.eval_length = cd::as_int(val, key);
        else if (key == "eval_steps") c.eval_steps = cd::as_int(val, key);
        else throw std::invalid_argument("config: unknown key \"" + key + "\"");
    }
    c.parsed_skip_mode(); // reject bad values at parse time
    return c;
}

// Resolved echo: every field explicit, insertion-ordered, shortest
// round-trip number formatting, so a re-run from the echo is identical.
inline std::string config_to_json(const RunConfig& c) {
    using config_detail::ordered_json;
    ordered_json j;
    j["seed"] = c.seed;
    j["batch_size"] = c.batch_size;
    j["total_steps"] = c.total_steps;
    j["snapshot_every"] = c.snapshot_every;
    j["lr0"] = c.lr0;
    j["lr_ref_samples"] = c.lr_ref_samples;
    j["alpha"] = c.alpha;
    j["skip_mode"] = c.skip_mode;
    j["train_snr_db"] = c.train_snr_db;
    j["segment_samples"] = c.segment_samples;
    j["sample_rate"] = c.sample_rate;
    j["measure_stats"] = c.measure_stats;
    j["stats_items"] = c.stats_items;
    j["sigma_x2"] = c.sigma_x2;
    j["sigma_n2"] = c.sigma_n2;
    j["ema_gammas"] = c.ema_gammas;
    j["adam_beta1"] = c.adam_beta1;
    j["adam_beta2"] = c.adam_beta2;
    j["adam_eps"] = c.adam_eps;
    j["sched_c"] = c.sched_c;
    j["sched_k"] = c.sched_k;
    j["t_eps"] = c.t_eps;
    j["stft_win"] = c.stft_win;
    j["stft_hop"] = c.stft_hop;
    j["comp_scale"] = c.comp_scale;
    j["comp_exponent"] = c.comp_exponent;
    j["width0"] = c.width0;
    j["width1"] = c.width1;
    j["emb_dim"] = c.emb_dim;
    j["weight_eps"] = c.weight_eps;
    j["n_steps"] = c.n_steps;
    j["eval_items"] = c.eval_items;
    j["eval_snr_db"] = c.eval_snr_db;
    j["eval_length"] = c.eval_length;
    j["eval_steps"] = c.eval_steps;
    return j.dump(2) + "\n";
}

inline RunConfig config_from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("config: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return config_from_json(ss.str());
}

} // namespace edm2se
