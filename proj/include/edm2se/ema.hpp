#pragma once

// Post-hoc parameter averaging. Running traces use a step-dependent decay
// beta_i = (1 - 1/i)^(gamma+1); the equivalent weight profile over a finite
// run is available in closed form, which is what makes least-squares
// reconstruction of unseen averaging widths from a few stored snapshots work.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace edm2se {

inline double powerlaw_beta(long long i, double gamma) {
    if (i < 1) throw std::domain_error("powerlaw_beta: step index must be >= 1");
    return std::pow(1.0 - 1.0 / static_cast<double>(i), gamma + 1.0);
}

// Weight of step j (1-based) in the average after n steps of the power-law
// recursion. Written via expm1/log1p so tiny weights at large gamma keep
// relative accuracy instead of cancelling.
inline std::vector<double> response_profile(long long n, double gamma) {
    if (n < 1) throw std::invalid_argument("response_profile: n must be >= 1");
    const double g1 = gamma + 1.0;
    std::vector<double> w(static_cast<size_t>(n));
    for (long long j = 1; j <= n; ++j) {
        const double tail = std::exp(g1 * std::log(static_cast<double>(j) / static_cast<double>(n)));
        const double step = -std::expm1(g1 * std::log1p(-1.0 / static_cast<double>(j)));
        w[static_cast<size_t>(j - 1)] = tail * step;
    }
    return w;
}

// Same thing for a constant-decay average (first step overwrites).
inline std::vector<double> fixed_beta_profile(long long n, double beta) {
    if (n < 1) throw std::invalid_argument("fixed_beta_profile: n must be >= 1");
    if (!(beta >= 0.0 && beta < 1.0)) throw std::invalid_argument("fixed_beta_profile: beta must be in [0,1)");
    std::vector<double> w(static_cast<size_t>(n));
    for (long long j = 1; j <= n; ++j)
        w[static_cast<size_t>(j - 1)] = (j == 1) ? std::pow(beta, static_cast<double>(n - 1))
                                                 : (1.0 - beta) * std::pow(beta, static_cast<double>(n - j));
    return w;
}

// Relative width: weighted standard deviation of the step index, as a
// fraction of the run length.
inline double profile_sigma_rel(const std::vector<double>& w) {
    if (w.empty()) throw std::invalid_argument("profile_sigma_rel: empty profile");
    double m1 = 0.0, m2 = 0.0;
    for (size_t j = 0; j < w.size(); ++j) {
        const double x = static_cast<double>(j + 1);
        m1 += w[j] * x;
        m2 += w[j] * x * x;
    }
    const double var = std::max(0.0, m2 - m1 * m1);
    return std::sqrt(var) / static_cast<double>(w.size());
}

inline double sigma_rel_for_gamma(long long n, double gamma) {
    return profile_sigma_rel(response_profile(n, gamma));
}

// Inverse map, bisection on gamma. Width shrinks as gamma grows, so the
// bracket is [0, gamma_hi] with gamma_hi doubled until it overshoots.
inline double gamma_from_sigma_rel(long long n, double target) {
    const double s_max = sigma_rel_for_gamma(n, 0.0);
    double hi = 1.0;
    double s_hi = sigma_rel_for_gamma(n, hi);
    while (s_hi > target && hi < 1e8) {
        hi *= 2.0;
        s_hi = sigma_rel_for_gamma(n, hi);
    }
    if (target > s_max || target < s_hi) {
        throw std::range_error("gamma_from_sigma_rel: target " + std::to_string(target) +
                               " outside achievable range [" + std::to_string(s_hi) + ", " +
                               std::to_string(s_max) + "] for n=" + std::to_string(n));
    }
    double lo = 0.0;
    for (int it = 0; it < 200 && hi - lo > 1e-9 * (1.0 + hi); ++it) {
        const double mid = 0.5 * (lo + hi);
        if (sigma_rel_for_gamma(n, mid) > target)
            lo = mid;
        else
            hi = mid;
    }
    return 0.5 * (lo + hi);
}

// One running average over a parameter list.
template <typename T>
struct EmaTrace {
    std::string name;
    bool power_law = true;
    double gamma = 0.0;
    double beta = 0.0; // only read when power_law is false
    long long step = 0;
    std::vector<TensorT<T>> avg;

    double beta_at(long long i) const {
        if (power_law) return powerlaw_beta(i, gamma);
        return i == 1 ? 0.0 : beta;
    }

    void update(const std::vector<const TensorT<T>*>& params) {
        ++step;
        const double b = beta_at(step);
        if (step == 1) {
            avg.clear();
            avg.reserve(params.size());
            for (const auto* p : params) avg.emplace_back(*p);
            return;
        }
        if (avg.size() != params.size()) throw std::invalid_argument("EmaTrace: parameter count changed");
        for (size_t k = 0; k < params.size(); ++k) {
            auto& a = avg[k];
            const auto& p = *params[k];
            require_same_shape(a, p, "EmaTrace::update");
            for (size_t i = 0; i < a.numel(); ++i)
                a[i] = static_cast<T>(b * static_cast<double>(a[i]) + (1.0 - b) * static_cast<double>(p[i]));
        }
    }
};

namespace ema_detail {

// Dense solve with partial pivoting; systems here are tiny Gram matrices.
inline std::vector<double> solve_dense(std::vector<std::vector<double>> a, std::vector<double> b) {
    const size_t k = b.size();
    for (size_t col = 0; col < k; ++col) {
        size_t piv = col;
        for (size_t r = col + 1; r < k; ++r)
            if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
        std::swap(a[col], a[piv]);
        std::swap(b[col], b[piv]);
        if (a[col][col] == 0.0) throw std::runtime_error("solve_dense: singular system");
        for (size_t r = col + 1; r < k; ++r) {
            const double f = a[r][col] / a[col][col];
            if (f == 0.0) continue;
            for (size_t c = col; c < k; ++c) a[r][c] -= f * a[col][c];
            b[r] -= f * b[col];
        }
    }
    std::vector<double> x(k, 0.0);
    for (size_t r = k; r-- > 0;) {
        double s = b[r];
        for (size_t c = r + 1; c < k; ++c) s -= a[r][c] * x[c];
        x[r] = s / a[r][r];
    }
    return x;
}

} // namespace ema_detail

struct SnapshotKey {
    long long step = 0;
    double gamma = 0.0;
};

// Least-squares coefficients so that sum_s a_s * profile_s matches the
// profile of a full-length average with target_gamma. Snapshot profiles
// cover steps 1..m and are zero afterwards. Columns are normalised before
// forming the Gram matrix and a small ridge keeps near-duplicate snapshots
// from blowing up the solve.
inline std::vector<double> reconstruct_coeffs(const std::vector<SnapshotKey>& snaps,
                                              long long n_total, double target_gamma) {
    if (snaps.empty()) throw std::invalid_argument("reconstruct_coeffs: no snapshots");
    if (n_total < 1) throw std::invalid_argument("reconstruct_coeffs: n_total must be >= 1");
    const size_t k = snaps.size();
    const size_t n = static_cast<size_t>(n_total);

    std::vector<std::vector<double>> cols(k);
    std::vector<double> norms(k);
    for (size_t s = 0; s < k; ++s) {
        if (snaps[s].step < 1 || snaps[s].step > n_total)
            throw std::invalid_argument("reconstruct_coeffs: snapshot step outside the run");
        auto head = response_profile(snaps[s].step, snaps[s].gamma);
        cols[s].assign(n, 0.0);
        std::copy(head.begin(), head.end(), cols[s].begin());
        double ss = 0.0;
        for (double v : cols[s]) ss += v * v;
        norms[s] = std::sqrt(ss);
        if (norms[s] == 0.0) throw std::runtime_error("reconstruct_coeffs: degenerate profile");
        for (double& v : cols[s]) v /= norms[s];
    }
    const auto target = response_profile(n_total, target_gamma);

    std::vector<std::vector<double>> gram(k, std::vector<double>(k, 0.0));
    std::vector<double> rhs(k, 0.0);
    for (size_t a = 0; a < k; ++a) {
        for (size_t b = a; b < k; ++b) {
            double d = 0.0;
            for (size_t j = 0; j < n; ++j) d += cols[a][j] * cols[b][j];
            gram[a][b] = gram[b][a] = d;
        }
        gram[a][a] += 1e-12;
        double d = 0.0;
        for (size_t j = 0; j < n; ++j) d += cols[a][j] * target[j];
        rhs[a] = d;
    }
    auto coeff = ema_detail::solve_dense(std::move(gram), std::move(rhs));
    for (size_t s = 0; s < k; ++s) coeff[s] /= norms[s];
    return coeff;
}

// Residual of the profile match, useful as a quality report.
inline double reconstruct_residual(const std::vector<SnapshotKey>& snaps, long long n_total,
                                   double target_gamma, const std::vector<double>& coeff) {
    const size_t n = static_cast<size_t>(n_total);
    std::vector<double> acc(n, 0.0);
    for (size_t s = 0; s < snaps.size(); ++s) {
        auto head = response_profile(snaps[s].step, snaps[s].gamma);
        for (size_t j = 0; j < head.size(); ++j) acc[j] += coeff[s] * head[j];
    }
    const auto target = response_profile(n_total, target_gamma);
    double err = 0.0, ref = 0.0;
    for (size_t j = 0; j < n; ++j) {
        const double d = acc[j] - target[j];
        err += d * d;
        ref += target[j] * target[j];
    }
    return std::sqrt(err / ref);
}

template <typename T>
std::vector<TensorT<T>> blend_snapshots(const std::vector<std::vector<TensorT<T>>>& snaps,
                                        const std::vector<double>& coeff) {
    if (snaps.size() != coeff.size() || snaps.empty())
        throw std::invalid_argument("blend_snapshots: need one coefficient per snapshot");
    const size_t m = snaps[0].size();
    std::vector<TensorT<T>> out;
    out.reserve(m);
    for (size_t k = 0; k < m; ++k) {
        std::vector<double> acc(snaps[0][k].numel(), 0.0);
        for (size_t s = 0; s < snaps.size(); ++s) {
            if (snaps[s].size() != m) throw std::invalid_argument("blend_snapshots: ragged snapshot list");
            require_same_shape(snaps[s][k], snaps[0][k], "blend_snapshots");
            for (size_t i = 0; i < acc.size(); ++i)
                acc[i] += coeff[s] * static_cast<double>(snaps[s][k][i]);
        }
        TensorT<T> t(snaps[0][k].dims());
        for (size_t i = 0; i < acc.size(); ++i) t[i] = static_cast<T>(acc[i]);
        out.push_back(std::move(t));
    }
    return out;
}

} // namespace edm2se
