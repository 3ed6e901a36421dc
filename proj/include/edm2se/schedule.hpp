#pragma once

#include <cmath>
#include <stdexcept>

#include "tensor.hpp"

namespace edm2se {

// Exponential diffusion coefficient g(t) = sqrt(c) * k^t on t in [0, 1].
// Integrals of g^2 have closed forms, so no quadrature is needed anywhere.
struct BridgeSchedule {
    double c = 0.4;
    double k = 2.6;
    double t_eps = 0.02;

    void validate() const {
        if (!(c > 0.0)) throw std::invalid_argument("schedule: c must be positive");
        if (!(k > 1.0)) throw std::invalid_argument("schedule: k must exceed 1");
        if (!(t_eps > 0.0 && t_eps < 1.0)) throw std::invalid_argument("schedule: t_eps must lie in (0,1)");
    }
};

struct ScheduleCoefficients {
    double t;
    double g;        // diffusion coefficient at t
    double var_fwd;  // integral of g^2 over [0, t]
    double var_bwd;  // integral of g^2 over [t, 1]
    double var_marg; // variance of the pinned-endpoint marginal at t
    double w_x;      // weight on the clean endpoint
    double w_y;      // weight on the noisy endpoint
};

inline ScheduleCoefficients schedule_coefficients(const BridgeSchedule& s, double t) {
    s.validate();
    if (!(t >= 0.0 && t <= 1.0)) throw std::domain_error("schedule: t must lie in [0,1]");
    const double log_k = std::log(s.k);
    const double scale = s.c / (2.0 * log_k);
    ScheduleCoefficients co;
    co.t = t;
    co.g = std::sqrt(s.c) * std::pow(s.k, t);
    // expm1 keeps both integrals accurate near their vanishing endpoint and
    // pins them to exactly zero there
    co.var_fwd = scale * std::expm1(2.0 * t * log_k);
    co.var_bwd = scale * std::pow(s.k, 2.0 * t) * std::expm1(2.0 * (1.0 - t) * log_k);
    const double total = co.var_fwd + co.var_bwd;
    co.w_x = co.var_bwd / total;
    co.w_y = co.var_fwd / total;
    co.var_marg = co.var_fwd * co.var_bwd / total;
    return co;
}

// Total variance accumulated over the whole interval.
inline double schedule_total_variance(const BridgeSchedule& s) {
    s.validate();
    const double log_k = std::log(s.k);
    return s.c * (s.k * s.k - 1.0) / (2.0 * log_k);
}

// Draws x_t = w_x x0 + w_y y + sqrt(var_marg) z for a provided standard normal z.
template <typename T>
TensorT<T> sample_marginal(const BridgeSchedule& s, const TensorT<T>& x0, const TensorT<T>& y,
                           double t, const TensorT<T>& z) {
    require_same_shape(x0, y, "sample_marginal: x0 vs y");
    require_same_shape(x0, z, "sample_marginal: x0 vs z");
    const ScheduleCoefficients co = schedule_coefficients(s, t);
    const T wx = static_cast<T>(co.w_x);
    const T wy = static_cast<T>(co.w_y);
    const T sig = static_cast<T>(std::sqrt(co.var_marg));
    TensorT<T> out(x0.dims());
    for (size_t i = 0; i < out.numel(); ++i)
        out[i] = wx * x0[i] + wy * y[i] + sig * z[i];
    return out;
}

} // namespace edm2se
