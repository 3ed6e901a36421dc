#pragma once

// On-disk layout shared by training, reconstruction and enhancement: a
// snapshot directory (parameter blobs plus one JSON index) and a
// self-contained model file that carries everything needed to run the
// denoiser on a new machine.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "net.hpp"
#include "precond.hpp"
#include "schedule.hpp"
#include "serialize.hpp"
#include "signal.hpp"

namespace edm2se {

inline std::string trace_label(double gamma) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "g%g", gamma);
    return buf;
}

struct SnapshotRecord {
    long long step = 0;
    std::string trace; // "raw" for plain parameters, otherwise the trace label
    double gamma = 0.0; // meaningful only for power-law traces
    std::string file;  // relative to the store directory
};

class SnapshotStore {
public:
    static SnapshotStore create(const std::string& dir) {
        std::filesystem::create_directories(dir);
        SnapshotStore s;
        s.dir_ = dir;
        s.save_index();
        return s;
    }

    static SnapshotStore open(const std::string& dir) {
        SnapshotStore s;
        s.dir_ = dir;
        const auto index = std::filesystem::path(dir) / "snapshots.json";
        std::ifstream in(index);
        if (!in) throw std::runtime_error("snapshot store: cannot open " + index.string());
        nlohmann::json j;
        in >> j;
        s.n_total_ = j.at("n_total").get<long long>();
        for (const auto& r : j.at("records")) {
            SnapshotRecord rec;
            rec.step = r.at("step").get<long long>();
            rec.trace = r.at("trace").get<std::string>();
            rec.gamma = r.value("gamma", 0.0);
            rec.file = r.at("file").get<std::string>();
            s.records_.push_back(std::move(rec));
        }
        return s;
    }

    const std::string& dir() const { return dir_; }
    long long n_total() const { return n_total_; }
    void set_n_total(long long n) { n_total_ = n; }
    const std::vector<SnapshotRecord>& records() const { return records_; }

    void add(long long step, const std::string& trace, double gamma,
             const std::vector<NamedTensor>& params) {
        char fname[96];
        std::snprintf(fname, sizeof(fname), "%s_%06lld.bin", trace.c_str(), step);
        write_blob((std::filesystem::path(dir_) / fname).string(), params);
        records_.push_back({step, trace, gamma, fname});
        save_index();
    }

    std::vector<NamedTensor> load(const SnapshotRecord& rec) const {
        return read_blob((std::filesystem::path(dir_) / rec.file).string());
    }

    void save_index() const {
        nlohmann::json j;
        j["n_total"] = n_total_;
        j["records"] = nlohmann::json::array();
        for (const auto& r : records_) {
            nlohmann::json e;
            e["step"] = r.step;
            e["trace"] = r.trace;
            if (r.trace != "raw") e["gamma"] = r.gamma;
            e["file"] = r.file;
            j["records"].push_back(std::move(e));
        }
        std::ofstream out(std::filesystem::path(dir_) / "snapshots.json");
        if (!out) throw std::runtime_error("snapshot store: cannot write index in " + dir_);
        out << j.dump(2) << "\n";
    }

private:
    std::string dir_;
    long long n_total_ = 0;
    std::vector<SnapshotRecord> records_;
};

// Everything besides the learned weights that a model file must carry.
struct ModelMeta {
    NetConfig net_cfg;
    SkipMode skip_mode = SkipMode::CleanPrediction;
    SignalStats stats;
    BridgeSchedule sched;
    StftConfig stft_cfg;
    CompressionParams comp;
    int sample_rate = 8000;
};

inline std::vector<NamedTensor> pack_params(const DenoiserNet<float>& net) {
    std::vector<NamedTensor> out;
    out.reserve(net.params().size());
    for (const auto& p : net.params()) out.push_back({p.name, p.value});
    return out;
}

inline void save_model(const std::string& path, const DenoiserNet<float>& net, const ModelMeta& meta) {
    auto ts = pack_params(net);
    ts.push_back({"emb.freqs", net.emb_freqs()});
    ts.push_back({"emb.phases", net.emb_phases()});
    ts.push_back(make_meta("meta.format", 1.0));
    ts.push_back(make_meta("meta.in_channels", meta.net_cfg.in_channels));
    ts.push_back(make_meta("meta.width0", meta.net_cfg.width0));
    ts.push_back(make_meta("meta.width1", meta.net_cfg.width1));
    ts.push_back(make_meta("meta.emb_dim", meta.net_cfg.emb_dim));
    ts.push_back(make_meta("meta.freq_bins", meta.net_cfg.freq_bins));
    ts.push_back(make_meta("meta.weight_eps", meta.net_cfg.weight_eps));
    ts.push_back(make_meta("meta.skip_mode", meta.skip_mode == SkipMode::NoisePrediction ? 0.0 : 1.0));
    ts.push_back(make_meta("meta.sigma_x2", meta.stats.var_clean));
    ts.push_back(make_meta("meta.sigma_n2", meta.stats.var_noise));
    ts.push_back(make_meta("meta.sched_c", meta.sched.c));
    ts.push_back(make_meta("meta.sched_k", meta.sched.k));
    ts.push_back(make_meta("meta.t_eps", meta.sched.t_eps));
    ts.push_back(make_meta("meta.stft_win", meta.stft_cfg.win));
    ts.push_back(make_meta("meta.stft_hop", meta.stft_cfg.hop));
    ts.push_back(make_meta("meta.comp_scale", meta.comp.scale));
    ts.push_back(make_meta("meta.comp_exponent", meta.comp.exponent));
    ts.push_back(make_meta("meta.sample_rate", meta.sample_rate));
    write_blob(path, ts);
}

struct LoadedModel {
    DenoiserNet<float> net;
    ModelMeta meta;
};

inline void assign_params(DenoiserNet<float>& net, const std::vector<NamedTensor>& ts) {
    for (auto& p : net.params()) {
        const auto* t = find_tensor(ts, p.name);
        if (!t) throw std::runtime_error("model: missing parameter " + p.name);
        require_same_shape(p.value, t->value, "model parameter");
        p.value = t->value;
    }
}

inline LoadedModel load_model(const std::string& path) {
    const auto ts = read_blob(path);
    if (meta_scalar(ts, "meta.format") != 1.0) throw std::runtime_error("model: unknown format version");

    ModelMeta meta;
    meta.net_cfg.in_channels = static_cast<int>(meta_scalar(ts, "meta.in_channels"));
    meta.net_cfg.width0 = static_cast<int>(meta_scalar(ts, "meta.width0"));
    meta.net_cfg.width1 = static_cast<int>(meta_scalar(ts, "meta.width1"));
    meta.net_cfg.emb_dim = static_cast<int>(meta_scalar(ts, "meta.emb_dim"));
    meta.net_cfg.freq_bins = static_cast<int>(meta_scalar(ts, "meta.freq_bins"));
    meta.net_cfg.weight_eps = meta_scalar(ts, "meta.weight_eps");
    meta.skip_mode = meta_scalar(ts, "meta.skip_mode") == 0.0 ? SkipMode::NoisePrediction
                                                              : SkipMode::CleanPrediction;
    meta.stats.var_clean = meta_scalar(ts, "meta.sigma_x2");
    meta.stats.var_noise = meta_scalar(ts, "meta.sigma_n2");
    meta.sched.c = meta_scalar(ts, "meta.sched_c");
    meta.sched.k = meta_scalar(ts, "meta.sched_k");
    meta.sched.t_eps = meta_scalar(ts, "meta.t_eps");
    meta.stft_cfg.win = static_cast<int>(meta_scalar(ts, "meta.stft_win"));
    meta.stft_cfg.hop = static_cast<int>(meta_scalar(ts, "meta.stft_hop"));
    meta.comp.scale = meta_scalar(ts, "meta.comp_scale");
    meta.comp.exponent = meta_scalar(ts, "meta.comp_exponent");
    meta.sample_rate = static_cast<int>(meta_scalar(ts, "meta.sample_rate"));

    LoadedModel lm{DenoiserNet<float>(meta.net_cfg, 0), meta};
    assign_params(lm.net, ts);
    const auto* fr = find_tensor(ts, "emb.freqs");
    const auto* ph = find_tensor(ts, "emb.phases");
    if (!fr || !ph) throw std::runtime_error("model: missing embedding tables");
    lm.net.set_embedding(fr->value, ph->value);
    return lm;
}

} // namespace edm2se
