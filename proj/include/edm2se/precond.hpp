#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>

#include "schedule.hpp"
#include "signal.hpp"
#include "tensor.hpp"

namespace edm2se {

// Which constant skip connection the denoiser uses on x_t. With skip 1 the
// raw network predicts (scaled) noise, with skip 0 it predicts clean speech.
enum class SkipMode { NoisePrediction, CleanPrediction };

inline const char* to_string(SkipMode m) {
    return m == SkipMode::NoisePrediction ? "noise" : "clean";
}

inline SkipMode skip_mode_from_string(const std::string& s) {
    if (s == "noise") return SkipMode::NoisePrediction;
    if (s == "clean") return SkipMode::CleanPrediction;
    throw std::invalid_argument("skip mode must be 'noise' or 'clean', got '" + s + "'");
}

// Scalings that keep the raw network's inputs and regression target at unit
// variance under the zero-mean Gaussian bookkeeping model, plus the matching
// loss weight. c_cond is the input scaling frozen at its t=1 value.
struct PreconditionSet {
    double t;
    double c_in;
    double c_cond;
    double c_out;
    double c_skip;
    double lambda;
};

inline PreconditionSet precondition(const BridgeSchedule& sched, const SignalStats& stats,
                                    SkipMode mode, double t) {
    if (!(stats.var_clean > 0.0) || !(stats.var_noise > 0.0))
        throw std::invalid_argument("precondition: signal variances must be strictly positive");
    const auto co = schedule_coefficients(sched, t);
    const double sx2 = stats.var_clean, sn2 = stats.var_noise;
    const double cs = mode == SkipMode::NoisePrediction ? 1.0 : 0.0;

    // x_t = (w_x + w_y) x0 + w_y n + sigma_t z under y = x0 + n
    const double wsum = co.w_x + co.w_y;
    const double var_xt = wsum * wsum * sx2 + co.w_y * co.w_y * sn2 + co.var_marg;
    // x0 - cs x_t = (1 - cs wsum) x0 - cs w_y n - cs sigma_t z
    const double a = 1.0 - cs * wsum;
    const double var_tgt = a * a * sx2 + cs * cs * (co.w_y * co.w_y * sn2 + co.var_marg);
    if (!(var_tgt > 0.0))
        throw std::domain_error("precondition: degenerate target variance (noise-prediction at t=0)");

    PreconditionSet p;
    p.t = t;
    p.c_in = 1.0 / std::sqrt(var_xt);
    p.c_cond = 1.0 / std::sqrt(sx2 + sn2);
    p.c_out = std::sqrt(var_tgt);
    p.c_skip = cs;
    p.lambda = 1.0 / var_tgt;
    return p;
}

// Denoiser estimate x0_hat = c_skip x_t + c_out F(c_in x_t, c_cond y, t).
// Net is any callable (TensorT, TensorT, double) -> TensorT.
template <typename T, typename Net>
TensorT<T> denoise(Net&& net, const TensorT<T>& x_t, const TensorT<T>& y, const PreconditionSet& p) {
    require_same_shape(x_t, y, "denoise: x_t vs y");
    TensorT<T> xin(x_t.dims()), yin(y.dims());
    const T ci = static_cast<T>(p.c_in), cc = static_cast<T>(p.c_cond);
    for (size_t i = 0; i < x_t.numel(); ++i) xin[i] = ci * x_t[i];
    for (size_t i = 0; i < y.numel(); ++i) yin[i] = cc * y[i];
    TensorT<T> f = std::forward<Net>(net)(xin, yin, p.t);
    require_same_shape(f, x_t, "denoise: net output vs x_t");
    const T cs = static_cast<T>(p.c_skip), co = static_cast<T>(p.c_out);
    TensorT<T> out(x_t.dims());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = cs * x_t[i] + co * f[i];
    return out;
}

// The unit-variance regression target for the raw network.
template <typename T>
TensorT<T> f_target(const TensorT<T>& x0, const TensorT<T>& x_t, const PreconditionSet& p) {
    require_same_shape(x0, x_t, "f_target: x0 vs x_t");
    TensorT<T> out(x0.dims());
    const T cs = static_cast<T>(p.c_skip);
    const T inv = static_cast<T>(1.0 / p.c_out);
    for (size_t i = 0; i < out.numel(); ++i) out[i] = (x0[i] - cs * x_t[i]) * inv;
    return out;
}

} // namespace edm2se
