#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <stdexcept>
#include <utility>
#include <vector>

#include "fft.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace edm2se {

template <typename T>
struct WaveformT {
    std::vector<T> samples;
    int sample_rate = 8000;
};
using Waveform = WaveformT<float>;

struct StftConfig {
    int win = 128;
    int hop = 32;

    void validate() const {
        if (win <= 0 || hop <= 0) throw std::invalid_argument("stft: win and hop must be positive");
        if (!is_pow2(win)) throw std::invalid_argument("stft: window length must be a power of two");
        if (win % hop != 0) throw std::invalid_argument("stft: hop must divide window length");
    }

    // Periodic Hann.
    std::vector<double> window() const {
        std::vector<double> w(static_cast<size_t>(win));
        for (int n = 0; n < win; ++n)
            w[n] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * n / win));
        return w;
    }

    int bins() const { return win / 2 + 1; }
    int frames(int length) const { return length / hop + 1; }

    // Max deviation of the squared-window overlap-add sum from constant over
    // one hop period in the steady state. Zero (to rounding) means the
    // envelope division in istft only corrects edges.
    double pr_residual() const {
        const auto w = window();
        std::vector<double> acc(static_cast<size_t>(hop), 0.0);
        for (int m = 0; m * hop < win; ++m)
            for (int n = 0; n < win; ++n)
                acc[static_cast<size_t>((n + m * hop) % hop)] += w[n] * w[n];
        const double ref = static_cast<double>(win) / (2.0 * hop) * 1.0; // periodic Hann: mean of w^2 is 3/8, times win/hop frames
        double lo = acc[0], hi = acc[0];
        for (double v : acc) { lo = std::min(lo, v); hi = std::max(hi, v); }
        (void)ref;
        return hi - lo;
    }
};

// Centered STFT: the input is padded by win/2 on both sides, frame m starts at
// m*hop in the padded signal. Output layout is [2, bins, frames] with channel
// 0 real and channel 1 imaginary.
template <typename T>
TensorT<T> stft(const std::vector<T>& x, const StftConfig& cfg = {}) {
    cfg.validate();
    const int L = static_cast<int>(x.size());
    if (L < cfg.win) throw std::invalid_argument("stft: input shorter than one window");
    const int pad = cfg.win / 2;
    const int F = cfg.bins();
    const int M = cfg.frames(L);
    const auto w = cfg.window();

    std::vector<T> padded(static_cast<size_t>(L + 2 * pad), T(0));
    std::copy(x.begin(), x.end(), padded.begin() + pad);

    TensorT<T> out({2, F, M});
    std::vector<T> frame(static_cast<size_t>(cfg.win));
    for (int m = 0; m < M; ++m) {
        const T* src = padded.data() + static_cast<size_t>(m) * cfg.hop;
        for (int n = 0; n < cfg.win; ++n) frame[n] = src[n] * static_cast<T>(w[n]);
        const auto spec = rfft(frame.data(), cfg.win);
        for (int f = 0; f < F; ++f) {
            out.at3(0, f, m) = spec[f].real();
            out.at3(1, f, m) = spec[f].imag();
        }
    }
    return out;
}

// Overlap-add inverse with squared-window envelope normalization; exact
// inverse of stft (up to rounding) for any config that passes validate().
template <typename T>
std::vector<T> istft(const TensorT<T>& spec, int length, const StftConfig& cfg = {}) {
    cfg.validate();
    if (spec.ndim() != 3 || spec.dim(0) != 2 || spec.dim(1) != cfg.bins())
        throw std::invalid_argument("istft: expected [2, bins, frames] spectrogram");
    const int F = cfg.bins();
    const int M = spec.dim(2);
    const int pad = cfg.win / 2;
    const auto w = cfg.window();

    std::vector<double> acc(static_cast<size_t>((M - 1) * cfg.hop + cfg.win), 0.0);
    std::vector<double> env(acc.size(), 0.0);
    std::vector<std::complex<T>> row(static_cast<size_t>(F));
    for (int m = 0; m < M; ++m) {
        for (int f = 0; f < F; ++f) row[f] = {spec.at3(0, f, m), spec.at3(1, f, m)};
        const auto frame = irfft(row.data(), cfg.win);
        const size_t base = static_cast<size_t>(m) * cfg.hop;
        for (int n = 0; n < cfg.win; ++n) {
            acc[base + n] += static_cast<double>(frame[n]) * w[n];
            env[base + n] += w[n] * w[n];
        }
    }
    std::vector<T> out(static_cast<size_t>(length), T(0));
    for (int i = 0; i < length; ++i) {
        const size_t p = static_cast<size_t>(i + pad);
        if (p < acc.size() && env[p] > 1e-12) out[i] = static_cast<T>(acc[p] / env[p]);
    }
    return out;
}

// Phase-preserving amplitude compression m -> scale * m^exponent.
struct CompressionParams {
    double scale = 0.15;
    double exponent = 0.5;
};

template <typename T>
TensorT<T> compress(const TensorT<T>& spec, const CompressionParams& p = {}) {
    if (spec.ndim() != 3 || spec.dim(0) != 2) throw std::invalid_argument("compress: expected [2, F, T]");
    TensorT<T> out(spec.dims());
    const size_t plane = spec.numel() / 2;
    for (size_t i = 0; i < plane; ++i) {
        const double re = spec[i], im = spec[plane + i];
        const double m = std::hypot(re, im);
        const double gain = m > 0.0 ? p.scale * std::pow(m, p.exponent) / m : 0.0;
        out[i] = static_cast<T>(re * gain);
        out[plane + i] = static_cast<T>(im * gain);
    }
    return out;
}

template <typename T>
TensorT<T> decompress(const TensorT<T>& cspec, const CompressionParams& p = {}) {
    if (cspec.ndim() != 3 || cspec.dim(0) != 2) throw std::invalid_argument("decompress: expected [2, F, T]");
    TensorT<T> out(cspec.dims());
    const size_t plane = cspec.numel() / 2;
    for (size_t i = 0; i < plane; ++i) {
        const double re = cspec[i], im = cspec[plane + i];
        const double m = std::hypot(re, im);
        const double gain = m > 0.0 ? std::pow(m / p.scale, 1.0 / p.exponent) / m : 0.0;
        out[i] = static_cast<T>(re * gain);
        out[plane + i] = static_cast<T>(im * gain);
    }
    return out;
}

// Scale-invariant SDR in dB, clamped to [-60, 60]. Both signals are
// mean-centered first unless zero_mean is false.
template <typename T>
double si_sdr(const std::vector<T>& reference, const std::vector<T>& estimate, bool zero_mean = true) {
    if (reference.size() != estimate.size()) throw std::invalid_argument("si_sdr: length mismatch");
    if (reference.empty()) throw std::invalid_argument("si_sdr: empty input");
    const size_t n = reference.size();
    double ms = 0.0, me = 0.0;
    if (zero_mean) {
        for (size_t i = 0; i < n; ++i) { ms += reference[i]; me += estimate[i]; }
        ms /= static_cast<double>(n);
        me /= static_cast<double>(n);
    }
    double dot = 0.0, ss = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double s = reference[i] - ms, e = estimate[i] - me;
        dot += e * s;
        ss += s * s;
    }
    if (ss <= 0.0) throw std::invalid_argument("si_sdr: reference has zero energy");
    const double alpha = dot / ss;
    double sig = 0.0, err = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double s = alpha * (reference[i] - ms);
        const double d = s - (estimate[i] - me);
        sig += s * s;
        err += d * d;
    }
    if (err <= 0.0 || sig <= 0.0) return sig > 0.0 ? 60.0 : -60.0;
    return std::clamp(10.0 * std::log10(sig / err), -60.0, 60.0);
}

// Synthetic clean/noisy pair: a harmonic tone with a slow amplitude envelope
// plus low-passed white noise scaled to hit snr_db exactly. Deterministic in
// (seed, snr_db, length, sample_rate).
template <typename T = float>
std::pair<WaveformT<T>, WaveformT<T>> synth_pair(uint64_t seed, double snr_db, int length,
                                                 int sample_rate = 8000) {
    if (length <= 0) throw std::invalid_argument("synth_pair: length must be positive");
    if (!std::isfinite(snr_db)) throw std::invalid_argument("synth_pair: snr_db must be finite");
    Rng rng = Rng::derived(seed, 0x5947);

    const double f0 = rng.uniform(80.0, 300.0);
    const int harmonics = static_cast<int>(rng.uniform_int(3, 6));
    std::vector<double> phase(static_cast<size_t>(harmonics));
    for (auto& p : phase) p = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double env_hz = rng.uniform(1.0, 4.0);
    const double env_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

    std::vector<double> clean(static_cast<size_t>(length));
    for (int n = 0; n < length; ++n) {
        const double t = static_cast<double>(n) / sample_rate;
        double v = 0.0;
        for (int h = 1; h <= harmonics; ++h)
            v += std::sin(2.0 * std::numbers::pi * f0 * h * t + phase[h - 1]) / h;
        const double env = 0.55 + 0.45 * std::sin(2.0 * std::numbers::pi * env_hz * t + env_phase);
        clean[n] = v * env;
    }
    double cs = 0.0;
    for (double v : clean) cs += v * v;
    const double crms = std::sqrt(cs / length);
    for (double& v : clean) v /= crms;
    cs = static_cast<double>(length);

    const double pole = rng.uniform(0.5, 0.95);
    std::vector<double> noise(static_cast<size_t>(length));
    double state = 0.0;
    for (int n = 0; n < length; ++n) {
        state = pole * state + (1.0 - pole) * rng.normal();
        noise[n] = state;
    }
    double ns = 0.0;
    for (double v : noise) ns += v * v;
    if (ns <= 0.0) ns = 1e-30;
    const double gain = std::sqrt(cs / ns) * std::pow(10.0, -snr_db / 20.0);

    WaveformT<T> wc, wn;
    wc.sample_rate = wn.sample_rate = sample_rate;
    wc.samples.resize(clean.size());
    wn.samples.resize(clean.size());
    for (size_t i = 0; i < clean.size(); ++i) {
        wc.samples[i] = static_cast<T>(clean[i]);
        wn.samples[i] = static_cast<T>(clean[i] + gain * noise[i]);
    }
    return {std::move(wc), std::move(wn)};
}

// Per-coefficient variances of compressed clean spectra and compressed
// additive-noise spectra, estimated over a batch of synthetic pairs. These
// feed the denoiser input scaling.
struct SignalStats {
    double var_clean = 0.0;
    double var_noise = 0.0;
};

template <typename T = float>
SignalStats estimate_stats(int items, uint64_t seed, double snr_db, int length,
                           const StftConfig& cfg = {}, const CompressionParams& cp = {}) {
    if (items <= 0) throw std::invalid_argument("estimate_stats: items must be positive");
    double acc_c = 0.0, acc_n = 0.0;
    size_t count = 0;
    for (int i = 0; i < items; ++i) {
        const auto [clean, noisy] = synth_pair<T>(derive_seed(seed, static_cast<uint64_t>(i)), snr_db, length);
        const auto sc = compress(stft(clean.samples, cfg), cp);
        const auto sn = compress(stft(noisy.samples, cfg), cp);
        for (size_t j = 0; j < sc.numel(); ++j) {
            const double c = sc[j];
            const double d = static_cast<double>(sn[j]) - c;
            acc_c += c * c;
            acc_n += d * d;
        }
        count += sc.numel();
    }
    SignalStats st;
    st.var_clean = acc_c / static_cast<double>(count);
    st.var_noise = acc_n / static_cast<double>(count);
    return st;
}

} // namespace edm2se
