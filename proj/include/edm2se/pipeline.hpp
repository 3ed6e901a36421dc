#pragma once

// Inference-side glue: a trained net wrapped as the sampler's denoiser,
// whole-file enhancement, held-out evaluation, reconstruction of averaged
// models from a snapshot store, and the averaging-width sweep.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ema.hpp"
#include "net.hpp"
#include "precond.hpp"
#include "sampler.hpp"
#include "signal.hpp"
#include "store.hpp"

namespace edm2se {

// Callable estimator over a trained net: scale and pad the inputs onto the
// net canvas, run the forward pass, crop back and undo the output scaling.
class NetDenoiser {
public:
    NetDenoiser(const DenoiserNet<float>& net, const ModelMeta& meta) : net_(&net), meta_(&meta) {}

    TensorT<float> operator()(const TensorT<float>& x_t, const TensorT<float>& y, double t) const {
        const auto pre = precondition(meta_->sched, meta_->stats, meta_->skip_mode, t);
        const int bins = x_t.dim(1), frames = x_t.dim(2);
        const int t_pad = frames + (frames % 2);

        TensorT<float> xin(x_t.dims()), cin(y.dims());
        for (size_t i = 0; i < xin.numel(); ++i) {
            xin[i] = static_cast<float>(pre.c_in * x_t[i]);
            cin[i] = static_cast<float>(pre.c_cond * y[i]);
        }
        Tape<float> tape;
        const auto a = tape.leaf(pad_canvas(xin, meta_->net_cfg.freq_bins, t_pad));
        const auto b = tape.leaf(pad_canvas(cin, meta_->net_cfg.freq_bins, t_pad));
        const auto f = net_->forward(tape, a, b, t);
        const auto& fv = tape.value(f);

        TensorT<float> out(x_t.dims());
        for (int c = 0; c < x_t.dim(0); ++c)
            for (int i = 0; i < bins; ++i)
                for (int j = 0; j < frames; ++j)
                    out.at3(c, i, j) = static_cast<float>(pre.c_skip * x_t.at3(c, i, j) +
                                                          pre.c_out * fv.at3(c, i, j));
        return out;
    }

private:
    const DenoiserNet<float>* net_;
    const ModelMeta* meta_;
};

inline WaveformT<float> enhance_with_model(const WaveformT<float>& noisy, const DenoiserNet<float>& net,
                                           const ModelMeta& meta, int n_steps) {
    return enhance_waveform(noisy, meta.sched, meta.stft_cfg, meta.comp, n_steps,
                            NetDenoiser(net, meta));
}

struct EvalSummary {
    int items = 0;
    double mean_input_si_sdr = 0.0;
    double mean_output_si_sdr = 0.0;
    double mean_improvement = 0.0;
    double mean_loss = 0.0; // preconditioned spectral regression loss
};

// Held-out evaluation on freshly synthesized mixtures. The loss column uses
// one random corruption time per item, drawn from a seed-derived stream, so
// repeated calls are identical.
inline EvalSummary evaluate_model(const DenoiserNet<float>& net, const ModelMeta& meta, uint64_t seed,
                                  int items, double snr_db, int length, int n_steps) {
    if (items < 1) throw std::invalid_argument("evaluate_model: items must be positive");
    EvalSummary ev;
    ev.items = items;
    Rng draw = Rng::derived(seed, 0xe7a1);
    const uint64_t item_base = derive_seed(seed, 0x0e5a); // disjoint from the training data stream
    const NetDenoiser den(net, meta);
    for (int i = 0; i < items; ++i) {
        const auto [clean, noisy] =
            synth_pair<float>(derive_seed(item_base, static_cast<uint64_t>(i)), snr_db, length, meta.sample_rate);
        const double in_sdr = si_sdr(clean.samples, noisy.samples);
        const auto out = enhance_with_model(noisy, net, meta, n_steps);
        const double out_sdr = si_sdr(clean.samples, out.samples);
        ev.mean_input_si_sdr += in_sdr;
        ev.mean_output_si_sdr += out_sdr;

        const auto x0 = compress(stft(clean.samples, meta.stft_cfg), meta.comp);
        const auto y = compress(stft(noisy.samples, meta.stft_cfg), meta.comp);
        const double t = draw.uniform(meta.sched.t_eps, 1.0);
        const auto sc = schedule_coefficients(meta.sched, t);
        const double sig = std::sqrt(sc.var_marg);
        TensorT<float> x_t(x0.dims());
        for (size_t j = 0; j < x_t.numel(); ++j)
            x_t[j] = static_cast<float>(sc.w_x * x0[j] + sc.w_y * y[j] + sig * draw.normal());
        const auto d = den(x_t, y, t);
        const auto pre = precondition(meta.sched, meta.stats, meta.skip_mode, t);
        double se = 0.0;
        for (size_t j = 0; j < d.numel(); ++j) {
            const double e = static_cast<double>(d[j]) - static_cast<double>(x0[j]);
            se += e * e;
        }
        ev.mean_loss += pre.lambda * se;
    }
    ev.mean_input_si_sdr /= items;
    ev.mean_output_si_sdr /= items;
    ev.mean_loss /= items;
    ev.mean_improvement = ev.mean_output_si_sdr - ev.mean_input_si_sdr;
    return ev;
}

// A store directory is either a training output directory (snapshots/ next
// to model_base.bin) or the snapshot directory itself.
struct StorePaths {
    std::string snapshots;
    std::string base_model;
};

inline StorePaths resolve_store(const std::string& dir) {
    namespace fs = std::filesystem;
    StorePaths p;
    if (fs::exists(fs::path(dir) / "snapshots.json")) {
        p.snapshots = dir;
        p.base_model = (fs::path(dir).parent_path() / "model_base.bin").string();
    } else {
        p.snapshots = (fs::path(dir) / "snapshots").string();
        p.base_model = (fs::path(dir) / "model_base.bin").string();
    }
    return p;
}

// target_sigma_rel <= 0 selects the base model's final raw parameters
// ("no averaging"); anything else goes through the least-squares profile
// fit over every averaged snapshot in the store.
inline LoadedModel reconstruct_model(const std::string& store_dir, double target_sigma_rel) {
    const auto paths = resolve_store(store_dir);
    auto base = load_model(paths.base_model);
    if (target_sigma_rel <= 0.0) return base;

    const auto store = SnapshotStore::open(paths.snapshots);
    if (store.records().empty()) throw std::runtime_error("reconstruct: store holds no snapshots");

    std::vector<SnapshotKey> keys;
    std::vector<const SnapshotRecord*> recs;
    for (const auto& r : store.records()) {
        keys.push_back({r.step, r.gamma});
        recs.push_back(&r);
    }
    if (keys.size() < 2) throw std::runtime_error("reconstruct: need at least two averaged snapshots");

    const double gamma = gamma_from_sigma_rel(store.n_total(), target_sigma_rel);
    const auto coeff = reconstruct_coeffs(keys, store.n_total(), gamma);

    std::vector<std::vector<TensorT<float>>> stacks;
    stacks.reserve(recs.size());
    for (const auto* r : recs) {
        const auto ts = store.load(*r);
        std::vector<TensorT<float>> ordered;
        ordered.reserve(base.net.params().size());
        for (const auto& p : base.net.params()) {
            const auto* t = find_tensor(ts, p.name);
            if (!t) throw std::runtime_error("reconstruct: snapshot missing parameter " + p.name);
            ordered.push_back(t->value);
        }
        stacks.push_back(std::move(ordered));
    }
    const auto blended = blend_snapshots(stacks, coeff);
    auto& params = base.net.params();
    for (size_t k = 0; k < params.size(); ++k) {
        require_same_shape(params[k].value, blended[k], "reconstruct");
        params[k].value = blended[k];
    }
    return base;
}

struct SweepPoint {
    double sigma_rel = 0.0;
    double si_sdr_out = 0.0;
    double loss = 0.0;
    bool ok = false;
    std::string error;
};

inline std::vector<SweepPoint> ema_sweep_run(const std::string& store_dir, const std::vector<double>& grid,
                                             uint64_t seed, int items, double snr_db, int length,
                                             int n_steps) {
    std::vector<SweepPoint> out;
    for (double srel : grid) {
        SweepPoint pt;
        pt.sigma_rel = srel;
        try {
            const auto model = reconstruct_model(store_dir, srel);
            const auto ev = evaluate_model(model.net, model.meta, seed, items, snr_db, length, n_steps);
            pt.si_sdr_out = ev.mean_output_si_sdr;
            pt.loss = ev.mean_loss;
            pt.ok = true;
        } catch (const std::exception& e) {
            pt.error = e.what(); // a bad grid point reports itself, the sweep goes on
        }
        out.push_back(std::move(pt));
    }
    return out;
}

inline void write_sweep_csv(const std::string& path, const std::vector<SweepPoint>& points) {
    std::ofstream csv(path);
    if (!csv) throw std::runtime_error("sweep: cannot write " + path);
    csv << "sigma_rel,si_sdr,loss\n";
    for (const auto& p : points) {
        char buf[128];
        if (p.ok)
            std::snprintf(buf, sizeof(buf), "%.10g,%.10g,%.10g\n", p.sigma_rel, p.si_sdr_out, p.loss);
        else
            std::snprintf(buf, sizeof(buf), "%.10g,nan,nan\n", p.sigma_rel);
        csv << buf;
    }
}

} // namespace edm2se
