#pragma once

// Deterministic reverse integrator for the bridge. Each step re-anchors the
// state on the current clean estimate and shrinks the residual by the ratio
// of marginal widths, so the endpoint statistics stay exact for any step
// count when the estimate is exact.

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "schedule.hpp"
#include "signal.hpp"
#include "tensor.hpp"

namespace edm2se {

inline std::vector<double> sampler_grid(int n_steps, double t_eps) {
    if (n_steps < 1) throw std::invalid_argument("sampler_grid: n_steps must be >= 1");
    if (!(t_eps > 0.0 && t_eps < 1.0)) throw std::invalid_argument("sampler_grid: t_eps must be in (0,1)");
    std::vector<double> t(static_cast<size_t>(n_steps) + 1);
    for (int i = 0; i <= n_steps; ++i)
        t[static_cast<size_t>(i)] = 1.0 - static_cast<double>(i) * (1.0 - t_eps) / static_cast<double>(n_steps);
    t.back() = t_eps;
    return t;
}

// One move from time t down to time s given the clean estimate at t.
template <typename T, typename Denoiser>
TensorT<T> ode_step(const TensorT<T>& x_t, const TensorT<T>& y, double t, double s,
                    const BridgeSchedule& sched, Denoiser&& denoiser) {
    if (!(s < t)) throw std::invalid_argument("ode_step: target time must be below current time");
    require_same_shape(x_t, y, "ode_step");
    const TensorT<T> x0 = denoiser(x_t, y, t);
    require_same_shape(x0, x_t, "ode_step denoiser output");

    const auto ct = schedule_coefficients(sched, t);
    const auto cs = schedule_coefficients(sched, s);
    const double sig_t = std::sqrt(ct.var_marg);
    const double sig_s = std::sqrt(cs.var_marg);
    const double r = sig_t > 0.0 ? sig_s / sig_t : 0.0;

    TensorT<T> out(x_t.dims());
    for (size_t i = 0; i < out.numel(); ++i) {
        const double anchor_s = cs.w_x * static_cast<double>(x0[i]) + cs.w_y * static_cast<double>(y[i]);
        const double anchor_t = ct.w_x * static_cast<double>(x0[i]) + ct.w_y * static_cast<double>(y[i]);
        out[i] = static_cast<T>(anchor_s + r * (static_cast<double>(x_t[i]) - anchor_t));
    }
    return out;
}

// Full reverse pass over the spectrogram domain. Starts from the noisy
// observation at t=1 and returns the clean estimate taken at the last grid
// point rather than the integrator state.
template <typename T, typename Denoiser>
TensorT<T> enhance_spec(const TensorT<T>& y, const BridgeSchedule& sched, int n_steps,
                        Denoiser&& denoiser) {
    const auto grid = sampler_grid(n_steps, sched.t_eps);
    TensorT<T> x = y;
    for (int i = 0; i + 1 <= n_steps; ++i) {
        x = ode_step(x, y, grid[static_cast<size_t>(i)], grid[static_cast<size_t>(i) + 1], sched, denoiser);
        if (!x.all_finite())
            throw std::runtime_error("enhance_spec: non-finite state after step " + std::to_string(i) +
                                     " (t=" + std::to_string(grid[static_cast<size_t>(i) + 1]) + ")");
    }
    TensorT<T> x0 = denoiser(x, y, grid.back());
    if (!x0.all_finite()) throw std::runtime_error("enhance_spec: non-finite final estimate");
    return x0;
}

// Waveform wrapper: analysis, reverse pass, synthesis. Output length always
// matches the input.
template <typename T, typename Denoiser>
WaveformT<T> enhance_waveform(const WaveformT<T>& noisy, const BridgeSchedule& sched,
                              const StftConfig& stft_cfg, const CompressionParams& comp,
                              int n_steps, Denoiser&& denoiser) {
    const auto y = compress(stft(noisy.samples, stft_cfg), comp);
    const auto x0 = enhance_spec(y, sched, n_steps, denoiser);
    WaveformT<T> out;
    out.sample_rate = noisy.sample_rate;
    out.samples = istft(decompress(x0, comp), static_cast<int>(noisy.samples.size()), stft_cfg);
    return out;
}

} // namespace edm2se
