#pragma once

// Training loop. Each step draws a fresh batch of synthetic pairs, corrupts
// the clean spectrogram along the bridge at a random time, and regresses the
// preconditioned estimate back onto it. Adam, inverse-square-root learning
// rate in consumed samples, weight re-normalization after every update, and
// a set of running parameter averages that get snapshotted to disk.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "autodiff.hpp"
#include "ema.hpp"
#include "net.hpp"
#include "precond.hpp"
#include "rng.hpp"
#include "schedule.hpp"
#include "signal.hpp"
#include "store.hpp"

namespace edm2se {

struct TrainConfig {
    uint64_t seed = 1;
    int batch_size = 8;
    long long total_steps = 4096;
    long long snapshot_every = 256;
    double lr0 = 2.5e-3;
    double lr_ref_samples = 3e4;
    double alpha = 0.0; // weight of the time-domain l1 term
    SkipMode skip_mode = SkipMode::CleanPrediction;

    // synthetic data
    double train_snr_db = 5.0;
    int segment_samples = 192;
    int sample_rate = 8000;

    // spectrum statistics feeding the preconditioner
    bool measure_stats = true;
    int stats_items = 512;
    double sigma_x2 = 0.402; // used directly when measure_stats is off
    double sigma_n2 = 0.342;

    std::vector<double> ema_gammas = {16.97, 6.94};

    double adam_beta1 = 0.9;
    double adam_beta2 = 0.99;
    double adam_eps = 1e-8;

    void validate() const {
        if (!(lr0 > 0.0)) throw std::invalid_argument("train config: lr0 must be positive");
        if (!(lr_ref_samples > 0.0)) throw std::invalid_argument("train config: lr_ref_samples must be positive");
        if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
        if (total_steps < 1) throw std::invalid_argument("train config: total_steps must be >= 1");
        if (snapshot_every < 1) throw std::invalid_argument("train config: snapshot_every must be >= 1");
        if (!(alpha >= 0.0)) throw std::invalid_argument("train config: alpha must be >= 0");
        if (segment_samples < 1) throw std::invalid_argument("train config: segment_samples must be positive");
        if (sample_rate < 1) throw std::invalid_argument("train config: sample_rate must be positive");
        if (stats_items < 1) throw std::invalid_argument("train config: stats_items must be positive");
        if (!measure_stats && (!(sigma_x2 > 0.0) || !(sigma_n2 > 0.0)))
            throw std::invalid_argument("train config: sigma_x2 and sigma_n2 must be positive");
        if (ema_gammas.empty()) throw std::invalid_argument("train config: ema_gammas must not be empty");
        for (double g : ema_gammas)
            if (!(g > 0.0)) throw std::invalid_argument("train config: ema_gammas must be positive");
        if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw std::invalid_argument("train config: adam_beta1 must be in [0,1)");
        if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw std::invalid_argument("train config: adam_beta2 must be in [0,1)");
    }
};

struct TrainLogRow {
    long long step = 0;    // 0-based; the loss is measured before this step's update
    long long samples = 0; // consumed before this step
    double lr = 0.0;
    double loss_spec = 0.0;
    double loss_l1 = 0.0; // already weighted by alpha
    double grad_norm = 0.0;
};

template <typename T = float>
class Trainer {
public:
    using Id = typename Tape<T>::Id;

    Trainer(TrainConfig cfg, NetConfig net_cfg = {}, BridgeSchedule sched = {},
            StftConfig stft_cfg = {}, CompressionParams comp = {})
        : cfg_(std::move(cfg)),
          net_cfg_(net_cfg),
          sched_(sched),
          stft_(stft_cfg),
          comp_(comp),
          net_(net_cfg, derive_seed(cfg_.seed, 0x11e7)),
          draw_rng_(Rng::derived(cfg_.seed, 0x701e)),
          data_seed_(derive_seed(cfg_.seed, 0xda7a)) {
        cfg_.validate();
        sched_.validate();
        stft_.validate();
        if (cfg_.segment_samples < stft_.win)
            throw std::invalid_argument("train config: segment_samples must cover one analysis window");
        const int bins = stft_.bins();
        if (net_cfg_.freq_bins < bins || net_cfg_.freq_bins > bins + 1)
            throw std::invalid_argument("train config: net canvas does not fit the spectrum height");

        if (cfg_.measure_stats) {
            const auto st = estimate_stats<T>(cfg_.stats_items, derive_seed(cfg_.seed, 0x57a7),
                                              cfg_.train_snr_db, cfg_.segment_samples, stft_, comp_);
            measured_ = st;
            stats_ = st;
        } else {
            stats_ = {cfg_.sigma_x2, cfg_.sigma_n2};
            measured_ = stats_;
        }

        for (double g : cfg_.ema_gammas) {
            EmaTrace<T> tr;
            tr.name = trace_label(g);
            tr.gamma = g;
            traces_.push_back(std::move(tr));
        }
        adam_m_.reserve(net_.params().size());
        adam_v_.reserve(net_.params().size());
        for (const auto& p : net_.params()) {
            adam_m_.emplace_back(p.value.dims());
            adam_v_.emplace_back(p.value.dims());
        }
    }

    DenoiserNet<T>& net() { return net_; }
    const DenoiserNet<T>& net() const { return net_; }
    const SignalStats& stats() const { return stats_; }
    const SignalStats& measured_stats() const { return measured_; }
    const std::vector<EmaTrace<T>>& traces() const { return traces_; }
    const TrainConfig& config() const { return cfg_; }
    const BridgeSchedule& schedule() const { return sched_; }
    const StftConfig& stft_config() const { return stft_; }
    const CompressionParams& compression() const { return comp_; }
    long long steps_done() const { return steps_done_; }

    double lr_at_samples(long long samples) const {
        const double s = static_cast<double>(samples) / cfg_.lr_ref_samples;
        return cfg_.lr0 / std::sqrt(std::max(s, 1.0));
    }

    TrainLogRow step() {
        const long long s = steps_done_;
        const int B = cfg_.batch_size;
        const int L = cfg_.segment_samples;
        const int bins = stft_.bins();
        const int frames = stft_.frames(L);
        const int f_pad = net_cfg_.freq_bins;
        const int t_pad = frames + (frames % 2);

        for (auto& p : net_.params()) p.grad.fill(T(0));

        Tape<T> tape;
        std::vector<std::vector<Id>> leaf_sets;
        std::vector<double> batch_t;
        double loss_spec_acc = 0.0, loss_l1_acc = 0.0;
        Id total = Id{};
        bool have_total = false;

        for (int b = 0; b < B; ++b) {
            auto [clean, noisy] = synth_pair<T>(derive_seed(data_seed_, static_cast<uint64_t>(item_counter_++)),
                                                cfg_.train_snr_db, L, cfg_.sample_rate);
            const auto x0 = compress(stft(clean.samples, stft_), comp_);
            const auto y = compress(stft(noisy.samples, stft_), comp_);

            const double t = draw_rng_.uniform(sched_.t_eps, 1.0);
            batch_t.push_back(t);
            const auto sc = schedule_coefficients(sched_, t);
            const double sig = std::sqrt(sc.var_marg);
            TensorT<T> x_t(x0.dims());
            for (size_t i = 0; i < x_t.numel(); ++i)
                x_t[i] = static_cast<T>(sc.w_x * x0[i] + sc.w_y * y[i] + sig * draw_rng_.normal());

            const auto pre = precondition(sched_, stats_, cfg_.skip_mode, t);
            TensorT<T> net_in(x_t.dims());
            for (size_t i = 0; i < net_in.numel(); ++i) net_in[i] = static_cast<T>(pre.c_in * x_t[i]);
            TensorT<T> net_cond(y.dims());
            for (size_t i = 0; i < net_cond.numel(); ++i) net_cond[i] = static_cast<T>(pre.c_cond * y[i]);

            const Id in_id = tape.leaf(pad_canvas(net_in, f_pad, t_pad));
            const Id cond_id = tape.leaf(pad_canvas(net_cond, f_pad, t_pad));
            std::vector<Id> ids;
            const Id raw = net_.forward(tape, in_id, cond_id, t, &ids);
            leaf_sets.push_back(std::move(ids));
            const Id cropped = tape.crop2d(raw, bins, frames);
            const Id d_id = tape.affine_const(cropped, static_cast<T>(pre.c_out), x_t,
                                              static_cast<T>(pre.c_skip));

            const Id sp = tape.mse_vs(d_id, x0, static_cast<T>(pre.lambda));
            loss_spec_acc += static_cast<double>(tape.value(sp)[0]);
            Id item = sp;
            if (cfg_.alpha > 0.0) {
                const Id wav = tape.istft_op(tape.decompress_op(d_id, comp_), L, stft_);
                TensorT<T> target({L}, clean.samples);
                const Id l1 = tape.l1_vs(wav, target, static_cast<T>(cfg_.alpha));
                loss_l1_acc += static_cast<double>(tape.value(l1)[0]);
                item = tape.add2(sp, l1);
            }
            total = have_total ? tape.add2(total, item) : item;
            have_total = true;
        }

        const Id root = tape.scale(total, static_cast<T>(1.0 / B));
        tape.backward(root);

        for (const auto& ids : leaf_sets) {
            auto& params = net_.params();
            for (size_t k = 0; k < params.size(); ++k) {
                const auto& g = tape.grad(ids[k]);
                for (size_t i = 0; i < g.numel(); ++i) params[k].grad[i] += g[i];
            }
        }

        double gsq = 0.0;
        for (const auto& p : net_.params())
            for (size_t i = 0; i < p.grad.numel(); ++i)
                gsq += static_cast<double>(p.grad[i]) * static_cast<double>(p.grad[i]);
        const double grad_norm = std::sqrt(gsq);

        TrainLogRow row;
        row.step = s;
        row.samples = s * B;
        row.lr = lr_at_samples((s + 1) * B);
        row.loss_spec = loss_spec_acc / B;
        row.loss_l1 = loss_l1_acc / B;
        row.grad_norm = grad_norm;

        if (!std::isfinite(row.loss_spec) || !std::isfinite(row.loss_l1) || !std::isfinite(grad_norm)) {
            std::string ts;
            for (double t : batch_t) ts += (ts.empty() ? "" : ",") + std::to_string(t);
            throw std::runtime_error("training aborted at step " + std::to_string(s) +
                                     ": non-finite loss (loss_spec=" + std::to_string(row.loss_spec) +
                                     ", loss_l1=" + std::to_string(row.loss_l1) +
                                     ", grad_norm=" + std::to_string(grad_norm) + ", batch t=[" + ts + "])");
        }

        // Adam with bias correction, then re-project every normalized weight
        const long long tstep = s + 1;
        const double bc1 = 1.0 - std::pow(cfg_.adam_beta1, static_cast<double>(tstep));
        const double bc2 = 1.0 - std::pow(cfg_.adam_beta2, static_cast<double>(tstep));
        auto& params = net_.params();
        for (size_t k = 0; k < params.size(); ++k) {
            auto& p = params[k];
            for (size_t i = 0; i < p.value.numel(); ++i) {
                const double g = p.grad[i];
                const double m = cfg_.adam_beta1 * adam_m_[k][i] + (1.0 - cfg_.adam_beta1) * g;
                const double v = cfg_.adam_beta2 * adam_v_[k][i] + (1.0 - cfg_.adam_beta2) * g * g;
                adam_m_[k][i] = static_cast<T>(m);
                adam_v_[k][i] = static_cast<T>(v);
                p.value[i] -= static_cast<T>(row.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.adam_eps));
            }
            force_norm(p);
        }

        std::vector<const TensorT<T>*> ptrs;
        ptrs.reserve(params.size());
        for (const auto& p : params) ptrs.push_back(&p.value);
        for (auto& tr : traces_) tr.update(ptrs);

        ++steps_done_;
        return row;
    }

private:
    TrainConfig cfg_;
    NetConfig net_cfg_;
    BridgeSchedule sched_;
    StftConfig stft_;
    CompressionParams comp_;
    DenoiserNet<T> net_;
    Rng draw_rng_;
    uint64_t data_seed_;
    uint64_t item_counter_ = 0;
    SignalStats stats_, measured_;
    std::vector<EmaTrace<T>> traces_;
    std::vector<TensorT<T>> adam_m_, adam_v_;
    long long steps_done_ = 0;
};

inline std::string format_log_row(const TrainLogRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%lld,%lld,%.10g,%.10g,%.10g,%.10g\n", r.step, r.samples, r.lr,
                  r.loss_spec, r.loss_l1, r.grad_norm);
    return buf;
}

// Full run with on-disk artifacts: training CSV, snapshot store, stats JSON
// and a self-contained model file holding the final raw parameters.
inline void train_run(const TrainConfig& cfg, const std::string& out_dir, NetConfig net_cfg = {},
                      BridgeSchedule sched = {}, StftConfig stft_cfg = {}, CompressionParams comp = {},
                      std::ostream* progress = nullptr) {
    std::filesystem::create_directories(out_dir);
    Trainer<float> trainer(cfg, net_cfg, sched, stft_cfg, comp);

    auto store = SnapshotStore::create((std::filesystem::path(out_dir) / "snapshots").string());
    store.set_n_total(cfg.total_steps);

    std::ofstream csv(std::filesystem::path(out_dir) / "train_log.csv");
    if (!csv) throw std::runtime_error("train: cannot write log in " + out_dir);
    csv << "step,samples,lr,loss_spec,loss_l1,grad_norm\n";

    TrainLogRow last;
    for (long long s = 0; s < cfg.total_steps; ++s) {
        last = trainer.step();
        csv << format_log_row(last);
        const long long done = s + 1;
        if (done % cfg.snapshot_every == 0) {
            for (const auto& tr : trainer.traces()) {
                std::vector<NamedTensor> ts;
                const auto& params = trainer.net().params();
                for (size_t k = 0; k < params.size(); ++k) ts.push_back({params[k].name, tr.avg[k]});
                store.add(done, tr.name, tr.gamma, ts);
            }
        }
        if (progress && done % 64 == 0)
            *progress << "step " << done << "/" << cfg.total_steps << " loss " << last.loss_spec
                      << "\n"
                      << std::flush;
    }
    csv.close();
    store.save_index();

    ModelMeta meta;
    meta.net_cfg = net_cfg;
    meta.skip_mode = cfg.skip_mode;
    meta.stats = trainer.stats();
    meta.sched = sched;
    meta.stft_cfg = stft_cfg;
    meta.comp = comp;
    meta.sample_rate = cfg.sample_rate;
    save_model((std::filesystem::path(out_dir) / "model_base.bin").string(), trainer.net(), meta);

    nlohmann::json stats;
    stats["sigma_x2"] = trainer.stats().var_clean;
    stats["sigma_n2"] = trainer.stats().var_noise;
    stats["sigma_x2_measured"] = trainer.measured_stats().var_clean;
    stats["sigma_n2_measured"] = trainer.measured_stats().var_noise;
    stats["steps"] = cfg.total_steps;
    stats["samples"] = cfg.total_steps * cfg.batch_size;
    stats["final_loss_spec"] = last.loss_spec;
    stats["final_loss_l1"] = last.loss_l1;
    stats["final_grad_norm"] = last.grad_norm;
    std::ofstream sj(std::filesystem::path(out_dir) / "stats.json");
    sj << stats.dump(2) << "\n";
}

} // namespace edm2se
