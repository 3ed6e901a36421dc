#pragma once

// Toy magnitude-preserving encoder/decoder denoiser. Two resolutions, two
// residual blocks per level, every learned weight passed through
// normalize_weight in the forward pass and re-projected to norm sqrt(fan_in)
// after each optimizer step. Conditioning (the scaled noisy spectrogram) is
// pooled to each resolution and fused after the residual merge with a learned
// mix; a frozen random-cosine embedding of t gates channels per block.

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace edm2se {

template <typename T>
struct Parameter {
    std::string name;
    TensorT<T> value;
    TensorT<T> grad;
    int fan_in = 0; // per-output-channel dimensionality; 0 for plain scalars

    bool mp_normalized() const { return fan_in > 0; }
};

// Rescale each output-channel vector to norm sqrt(fan_in); direction kept,
// no gradient involved. Zero vectors stay put.
template <typename T>
void force_norm(Parameter<T>& p) {
    if (!p.mp_normalized()) return;
    const int ch = p.value.dim(0);
    const size_t per = p.value.numel() / static_cast<size_t>(ch);
    const double want = std::sqrt(static_cast<double>(p.fan_in));
    for (int c = 0; c < ch; ++c) {
        T* v = p.value.data() + per * c;
        double n2 = 0.0;
        for (size_t i = 0; i < per; ++i) n2 += static_cast<double>(v[i]) * v[i];
        if (n2 <= 0.0) continue;
        const T s = static_cast<T>(want / std::sqrt(n2));
        for (size_t i = 0; i < per; ++i) v[i] *= s;
    }
}

struct NetConfig {
    int in_channels = 2;
    int width0 = 24; // desk-scale widths, sized for a single-core training budget
    int width1 = 48;
    int emb_dim = 64;
    int freq_bins = 66; // canvas height fed to the net; must be even
    double weight_eps = 1e-4;

    void validate() const {
        if (in_channels <= 0 || width0 <= 0 || width1 <= 0 || emb_dim <= 0)
            throw std::invalid_argument("net: sizes must be positive");
        if (freq_bins <= 0 || freq_bins % 2 != 0)
            throw std::invalid_argument("net: freq_bins must be positive and divisible by the downsampling factor 2");
        if (!(weight_eps >= 0.0)) throw std::invalid_argument("net: weight_eps must be nonnegative");
    }
};

template <typename T>
class DenoiserNet {
public:
    using Id = typename Tape<T>::Id;

    DenoiserNet(NetConfig cfg, uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng = Rng::derived(seed, 0x2e11);

        emb_freqs_ = TensorT<T>({cfg_.emb_dim});
        emb_phases_ = TensorT<T>({cfg_.emb_dim});
        for (int i = 0; i < cfg_.emb_dim; ++i) {
            emb_freqs_[i] = static_cast<T>(rng.normal());
            emb_phases_[i] = static_cast<T>(rng.uniform(0.0, 1.0));
        }

        const int w0 = cfg_.width0, w1 = cfg_.width1, ic = cfg_.in_channels, ed = cfg_.emb_dim;
        add_conv("in_conv.w", w0, ic, 3, rng);
        add_block("enc0a", w0, w0, ed, ic, rng);
        add_block("enc0b", w0, w0, ed, ic, rng);
        add_block("enc1a", w0, w1, ed, ic, rng);
        add_block("enc1b", w1, w1, ed, ic, rng);
        add_block("dec1a", w1, w1, ed, ic, rng);
        add_block("dec1b", w1, w1, ed, ic, rng);
        add_block("dec0a", w1, w0, ed, ic, rng);
        add_block("dec0b", w0, w0, ed, ic, rng);
        add_conv("out_conv.w", ic, w0, 3, rng);
        add_scalar("out_gain", 0.0);
        for (auto& p : params_) force_norm(p);
    }

    const NetConfig& config() const { return cfg_; }
    std::vector<Parameter<T>>& params() { return params_; }
    const std::vector<Parameter<T>>& params() const { return params_; }
    const TensorT<T>& emb_freqs() const { return emb_freqs_; }
    const TensorT<T>& emb_phases() const { return emb_phases_; }
    void set_embedding(TensorT<T> freqs, TensorT<T> phases) {
        if (freqs.numel() != static_cast<size_t>(cfg_.emb_dim) || phases.numel() != freqs.numel())
            throw std::invalid_argument("net: embedding size mismatch");
        emb_freqs_ = std::move(freqs);
        emb_phases_ = std::move(phases);
    }

    size_t param_count() const {
        size_t n = 0;
        for (const auto& p : params_) n += p.value.numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.grad.fill(T(0));
    }

    // Build the forward graph on the caller's tape. x and cond must be
    // [in_channels, freq_bins, frames] with an even frame count. When
    // param_ids is given it receives the tape leaf of each parameter, in
    // params() order, for gradient readback.
    Id forward(Tape<T>& tape, Id x, Id cond, double t,
               std::vector<Id>* param_ids = nullptr,
               std::vector<double>* act_std = nullptr) const {
        const auto& xv = tape.value(x);
        if (xv.ndim() != 3 || xv.dim(0) != cfg_.in_channels || xv.dim(1) != cfg_.freq_bins)
            throw std::invalid_argument("net forward: input canvas mismatch");
        if (xv.dim(2) % 2 != 0)
            throw std::invalid_argument("net forward: frame count must be divisible by the downsampling factor 2");
        require_same_shape(xv, tape.value(cond), "net forward: x vs cond");

        std::vector<Id> ids(params_.size());
        for (size_t i = 0; i < params_.size(); ++i)
            ids[i] = tape.leaf(params_[i].value, true);
        if (param_ids) *param_ids = ids;

        // frozen cosine features of t, unit variance by construction
        TensorT<T> ev({cfg_.emb_dim});
        for (int i = 0; i < cfg_.emb_dim; ++i)
            ev[i] = static_cast<T>(std::numbers::sqrt2 *
                                   std::cos(2.0 * std::numbers::pi *
                                            (static_cast<double>(emb_freqs_[i]) * t + emb_phases_[i])));
        const Id emb = tape.leaf(std::move(ev), false);
        const Id cond1 = tape.down2(cond);

        auto note = [&](Id h) {
            if (act_std) act_std->push_back(std::sqrt(tape.value(h).variance()));
            return h;
        };

        Id h = note(tape.conv2d(x, nw(tape, ids, "in_conv.w")));
        h = note(block(tape, ids, "enc0a", h, cond, emb));
        h = note(block(tape, ids, "enc0b", h, cond, emb));
        const Id skip0 = h;
        h = tape.down2(h);
        h = note(block(tape, ids, "enc1a", h, cond1, emb));
        h = note(block(tape, ids, "enc1b", h, cond1, emb));
        h = note(block(tape, ids, "dec1a", h, cond1, emb));
        h = note(block(tape, ids, "dec1b", h, cond1, emb));
        h = tape.up2(h);
        h = note(block(tape, ids, "dec0a", h, cond, emb));
        h = tape.mp_add_fixed(h, skip0, static_cast<T>(0.5));
        h = note(block(tape, ids, "dec0b", h, cond, emb));
        h = tape.conv2d(tape.mp_silu(h), nw(tape, ids, "out_conv.w"));
        return tape.scale_node(h, ids[index_of("out_gain")]);
    }

    size_t index_of(const std::string& name) const {
        for (size_t i = 0; i < params_.size(); ++i)
            if (params_[i].name == name) return i;
        throw std::invalid_argument("net: no parameter named " + name);
    }

private:
    NetConfig cfg_;
    std::vector<Parameter<T>> params_;
    TensorT<T> emb_freqs_, emb_phases_;

    void add_conv(const std::string& name, int co, int ci, int k, Rng& rng) {
        Parameter<T> p;
        p.name = name;
        p.value = TensorT<T>({co, ci, k, k});
        p.value.fill_normal(rng);
        p.grad = TensorT<T>({co, ci, k, k});
        p.fan_in = ci * k * k;
        params_.push_back(std::move(p));
    }

    void add_linear(const std::string& name, int o, int i, Rng& rng) {
        Parameter<T> p;
        p.name = name;
        p.value = TensorT<T>({o, i});
        p.value.fill_normal(rng);
        p.grad = TensorT<T>({o, i});
        p.fan_in = i;
        params_.push_back(std::move(p));
    }

    void add_scalar(const std::string& name, double v) {
        Parameter<T> p;
        p.name = name;
        p.value = TensorT<T>({1});
        p.value[0] = static_cast<T>(v);
        p.grad = TensorT<T>({1});
        p.fan_in = 0;
        params_.push_back(std::move(p));
    }

    void add_block(const std::string& prefix, int ci, int co, int emb_dim, int cond_ch, Rng& rng) {
        add_conv(prefix + ".conv1.w", co, ci, 3, rng);
        add_conv(prefix + ".conv2.w", co, co, 3, rng);
        if (ci != co) add_conv(prefix + ".skip.w", co, ci, 1, rng);
        add_linear(prefix + ".emb.w", co, emb_dim, rng);
        add_scalar(prefix + ".emb_gain", 0.0);
        add_conv(prefix + ".cond.w", co, cond_ch, 1, rng);
        add_scalar(prefix + ".cond_tau", 0.0);
    }

    Id nw(Tape<T>& tape, const std::vector<Id>& ids, const std::string& name) const {
        return tape.normalize_weight(ids[index_of(name)], static_cast<T>(cfg_.weight_eps));
    }

    Id block(Tape<T>& tape, const std::vector<Id>& ids, const std::string& prefix,
             Id h, Id cond, Id emb) const {
        Id y = tape.mp_silu(h);
        y = tape.conv2d(y, nw(tape, ids, prefix + ".conv1.w"));
        const Id evec = tape.linear(emb, nw(tape, ids, prefix + ".emb.w"));
        y = tape.cond_gate(y, evec, ids[index_of(prefix + ".emb_gain")]);
        y = tape.mp_silu(y);
        y = tape.conv2d(y, nw(tape, ids, prefix + ".conv2.w"));
        Id res = h;
        if (tape.value(h).dim(0) != tape.value(y).dim(0))
            res = tape.conv2d(h, nw(tape, ids, prefix + ".skip.w"));
        Id merged = tape.mp_add_fixed(res, y, static_cast<T>(0.3));
        const Id cproj = tape.conv2d(cond, nw(tape, ids, prefix + ".cond.w"));
        return tape.mp_add(merged, cproj, ids[index_of(prefix + ".cond_tau")]);
    }
};

// Zero-pad a [C,F,T] spectrogram up to the even canvas the net wants. The
// caller crops the output back, so the pad rows never reach a loss.
template <typename T>
TensorT<T> pad_canvas(const TensorT<T>& spec, int f_to, int t_to) {
    if (spec.ndim() != 3) throw std::invalid_argument("pad_canvas: expected [C,F,T]");
    const int ch = spec.dim(0), f = spec.dim(1), tt = spec.dim(2);
    if (f_to < f || t_to < tt) throw std::invalid_argument("pad_canvas: target smaller than input");
    TensorT<T> out({ch, f_to, t_to});
    for (int c = 0; c < ch; ++c)
        for (int i = 0; i < f; ++i)
            for (int j = 0; j < tt; ++j) out.at3(c, i, j) = spec.at3(c, i, j);
    return out;
}

} // namespace edm2se
