#pragma once

// Built-in invariant suite behind the `selftest` command. Every check carries
// its own miniature oracle (quadrature, closed-form posteriors, profile sums)
// so a regression in the library cannot hide inside the reference it is
// compared against. Checks take their constants from the active RunConfig,
// which lets a corrupted config surface as a named failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "edm2se/autodiff.hpp"
#include "edm2se/config.hpp"
#include "edm2se/ema.hpp"
#include "edm2se/net.hpp"
#include "edm2se/precond.hpp"
#include "edm2se/rng.hpp"
#include "edm2se/sampler.hpp"
#include "edm2se/schedule.hpp"
#include "edm2se/signal.hpp"

namespace edm2se {

struct CheckResult {
    std::string name;
    bool pass = false;
    double ms = 0.0;
    std::string message; // empty on success
};

namespace selftest_detail {

inline double simpson(double a, double b, double fa, double fm, double fb) {
    return (b - a) / 6.0 * (fa + 4.0 * fm + fb);
}

inline double adaptive(const std::function<double(double)>& f, double a, double b, double fa,
                       double fm, double fb, double whole, double tol, int depth) {
    const double m = 0.5 * (a + b);
    const double flm = f(0.5 * (a + m)), frm = f(0.5 * (m + b));
    const double left = simpson(a, m, fa, flm, fm);
    const double right = simpson(m, b, fm, frm, fb);
    if (depth <= 0) return left + right;
    if (std::abs(left + right - whole) <= 15.0 * tol)
        return left + right + (left + right - whole) / 15.0;
    return adaptive(f, a, 0.5 * (a + b), fa, flm, fm, left, 0.5 * tol, depth - 1) +
           adaptive(f, 0.5 * (a + b), b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}

inline double integrate(const std::function<double(double)>& f, double a, double b,
                        double tol = 1e-13) {
    if (a == b) return 0.0;
    const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
    return adaptive(f, a, b, fa, fm, fb, simpson(a, b, fa, fm, fb), tol, 48);
}

// E[x0 | x_t, y] for the zero-mean Gaussian pair x0 ~ N(0, vx), y = x0 + n,
// n ~ N(0, vn), observed through x_t = w_x x0 + w_y y + sqrt(var_marg) z.
struct GaussianPosterior {
    double vx, vn;
    double rho() const { return vx / (vx + vn); }
    double denoise(double x_t, double y, double w_x, double w_y, double var_marg) const {
        const double v = vx * vn / (vx + vn);
        const double mean = rho() * y;
        const double var_xt = w_x * w_x * v + var_marg;
        if (var_xt == 0.0) return mean; // x_t carries no information at t=1
        const double mean_xt = w_x * mean + w_y * y;
        return mean + w_x * v / var_xt * (x_t - mean_xt);
    }
};

struct Failure {
    std::string message;
};

inline void expect(bool ok, const std::string& msg) {
    if (!ok) throw Failure{msg};
}

inline std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

} // namespace selftest_detail

inline std::vector<CheckResult> run_selftest(const RunConfig& cfg) {
    namespace sd = selftest_detail;
    using clk = std::chrono::steady_clock;
    std::vector<CheckResult> results;

    auto run = [&](const char* name, const std::function<void()>& body) {
        CheckResult r;
        r.name = name;
        const auto start = clk::now();
        try {
            body();
            r.pass = true;
        } catch (const sd::Failure& f) {
            r.message = f.message;
        } catch (const std::exception& e) {
            r.message = e.what();
        }
        r.ms = std::chrono::duration<double, std::milli>(clk::now() - start).count();
        results.push_back(std::move(r));
    };

    run("schedule.positive-constants", [&] {
        cfg.schedule().validate();
    });

    run("schedule.quadrature", [&] {
        const auto sched = cfg.schedule();
        auto g2 = [&](double t) { return sched.c * std::pow(sched.k, 2.0 * t); };
        Rng rng(41);
        for (int i = 0; i < 40; ++i) {
            const double t = rng.uniform(0.0, 1.0);
            const auto co = schedule_coefficients(sched, t);
            const double fwd = sd::integrate(g2, 0.0, t);
            const double bwd = sd::integrate(g2, t, 1.0);
            sd::expect(std::abs(co.var_fwd - fwd) <= 1e-8 * std::max(fwd, 1e-300),
                       "var_fwd vs quadrature at t=" + sd::fmt(t));
            sd::expect(std::abs(co.var_bwd - bwd) <= 1e-8 * std::max(bwd, 1e-300),
                       "var_bwd vs quadrature at t=" + sd::fmt(t));
        }
    });

    run("schedule.boundaries", [&] {
        const auto sched = cfg.schedule();
        const auto a = schedule_coefficients(sched, 0.0);
        const auto b = schedule_coefficients(sched, 1.0);
        sd::expect(a.w_x == 1.0, "w_x(0) != 1");
        sd::expect(b.w_y == 1.0, "w_y(1) != 1");
        sd::expect(a.var_marg == 0.0 && b.var_marg == 0.0, "marginal variance at endpoints");
    });

    run("precond.loss-weight-identity", [&] {
        const auto sched = cfg.schedule();
        const SignalStats stats{cfg.sigma_x2, cfg.sigma_n2};
        for (int i = 0; i <= 20; ++i) {
            const double t = sched.t_eps + (1.0 - sched.t_eps) * i / 20.0;
            for (SkipMode m : {SkipMode::NoisePrediction, SkipMode::CleanPrediction}) {
                const auto p = precondition(sched, stats, m, t);
                sd::expect(std::abs(p.lambda * p.c_out * p.c_out - 1.0) <= 1e-12,
                           std::string("lambda*c_out^2 at t=") + sd::fmt(t) + " mode " + to_string(m));
            }
        }
    });

    run("precond.unit-variance", [&] {
        const auto sched = cfg.schedule();
        const SignalStats stats{cfg.sigma_x2, cfg.sigma_n2};
        const int n = 50000;
        const double tol = 4.0 * std::sqrt(2.0 / (n - 1));
        const double sx = std::sqrt(cfg.sigma_x2), sn = std::sqrt(cfg.sigma_n2);
        Rng rng(42);
        for (int i = 0; i < 10; ++i) {
            const double t = sched.t_eps + (1.0 - sched.t_eps) * i / 9.0;
            const auto co = schedule_coefficients(sched, t);
            const double sig = std::sqrt(co.var_marg);
            for (SkipMode m : {SkipMode::NoisePrediction, SkipMode::CleanPrediction}) {
                const auto p = precondition(sched, stats, m, t);
                double s_in = 0.0, s_tgt = 0.0;
                for (int j = 0; j < n; ++j) {
                    const double x0 = sx * rng.normal();
                    const double y = x0 + sn * rng.normal();
                    const double x_t = co.w_x * x0 + co.w_y * y + sig * rng.normal();
                    const double vin = p.c_in * x_t;
                    const double vtgt = (x0 - p.c_skip * x_t) / p.c_out;
                    s_in += vin * vin;
                    s_tgt += vtgt * vtgt;
                }
                sd::expect(std::abs(s_in / n - 1.0) <= tol,
                           "Var(c_in x_t)=" + sd::fmt(s_in / n) + " at t=" + sd::fmt(t));
                sd::expect(std::abs(s_tgt / n - 1.0) <= tol,
                           "Var(target)=" + sd::fmt(s_tgt / n) + " at t=" + sd::fmt(t));
            }
        }
    });

    run("autodiff.gradient-check", [&] {
        NetConfig nc;
        nc.width0 = 4;
        nc.width1 = 6;
        nc.emb_dim = 8;
        nc.freq_bins = 6;
        DenoiserNet<double> net(nc, 7);
        Rng rng(43);
        for (auto& p : net.params())
            for (size_t i = 0; i < p.value.numel(); ++i) p.value[i] += 0.05 * rng.normal();
        net.params()[net.index_of("out_gain")].value[0] = 0.7;

        TensorT<double> x({2, 6, 4}), y({2, 6, 4}), target({2, 6, 4});
        for (size_t i = 0; i < x.numel(); ++i) {
            x[i] = rng.normal();
            y[i] = rng.normal();
            target[i] = rng.normal();
        }
        auto loss_of = [&]() {
            Tape<double> tape;
            const auto out = net.forward(tape, tape.leaf(x), tape.leaf(y), 0.5, nullptr);
            return static_cast<double>(tape.value(tape.mse_vs(out, target, 1.0))[0]);
        };
        Tape<double> tape;
        std::vector<typename Tape<double>::Id> ids;
        const auto out = net.forward(tape, tape.leaf(x), tape.leaf(y), 0.5, &ids);
        const auto root = tape.mse_vs(out, target, 1.0);
        tape.backward(root);

        const auto& params = net.params();
        const double h = 1e-5;
        int checked = 0;
        for (size_t k = 0; k < params.size(); ++k) {
            const size_t n = params[k].value.numel();
            for (size_t i = 0; i < n; i += std::max<size_t>(1, n / 3)) {
                const double keep = net.params()[k].value[i];
                net.params()[k].value[i] = keep + h;
                const double lp = loss_of();
                net.params()[k].value[i] = keep - h;
                const double lm = loss_of();
                net.params()[k].value[i] = keep;
                const double fd = (lp - lm) / (2.0 * h);
                const double ad = tape.grad(ids[k])[i];
                // the absolute floor absorbs secant cancellation noise on
                // coordinates whose true gradient is near zero
                const double rel = std::abs(fd - ad) / std::max(1e-4, std::abs(fd) + std::abs(ad));
                sd::expect(rel < 1e-4, params[k].name + "[" + std::to_string(i) +
                                           "]: fd=" + sd::fmt(fd) + " ad=" + sd::fmt(ad));
                ++checked;
            }
        }
        sd::expect(checked >= 20, "too few coordinates checked");
    });

    run("mp.weight-norms", [&] {
        DenoiserNet<float> net(cfg.net_config(), 11);
        Rng rng(44);
        for (auto& p : net.params())
            for (size_t i = 0; i < p.value.numel(); ++i) p.value[i] += 0.2f * static_cast<float>(rng.normal());
        for (auto& p : net.params()) force_norm(p);
        for (const auto& p : net.params()) {
            if (!p.mp_normalized()) continue;
            const size_t rows = p.value.dim(0);
            const size_t cols = p.value.numel() / rows;
            for (size_t r = 0; r < rows; ++r) {
                double ss = 0.0;
                for (size_t i = 0; i < cols; ++i) {
                    const double v = p.value[r * cols + i];
                    ss += v * v;
                }
                const double want = std::sqrt(static_cast<double>(p.fan_in));
                sd::expect(std::abs(std::sqrt(ss) - want) <= 1e-6 * want,
                           p.name + " row " + std::to_string(r) + " norm " + sd::fmt(std::sqrt(ss)));
            }
        }
    });

    run("mp.add-variance", [&] {
        const int n = 20000;
        const double tol = 4.0 * std::sqrt(2.0 / (n - 1));
        Rng rng(45);
        for (double tau : {0.1, 0.5, 0.9}) {
            TensorT<float> a({(size_t)n}), b({(size_t)n});
            for (int i = 0; i < n; ++i) {
                a[i] = static_cast<float>(rng.normal());
                b[i] = static_cast<float>(rng.normal());
            }
            Tape<float> tape;
            const auto id = tape.mp_add_fixed(tape.leaf(a), tape.leaf(b), static_cast<float>(tau));
            double ss = 0.0;
            for (int i = 0; i < n; ++i) ss += static_cast<double>(tape.value(id)[i]) * tape.value(id)[i];
            sd::expect(std::abs(ss / n - 1.0) <= tol,
                       "variance " + sd::fmt(ss / n) + " at tau=" + sd::fmt(tau));
        }
    });

    run("ema.sequential-profile", [&] {
        const int n = 256;
        const double gamma = 6.94;
        EmaTrace<double> trace;
        trace.name = "g";
        trace.gamma = gamma;
        std::vector<double> theta(n);
        for (int i = 0; i < n; ++i) theta[i] = std::cos(i / 17.0) + 0.3 * i / n;
        for (int i = 0; i < n; ++i) {
            TensorT<double> v({1});
            v[0] = theta[i];
            std::vector<const TensorT<double>*> ptr{&v};
            trace.update(ptr);
        }
        const auto w = response_profile(n, gamma);
        double want = 0.0;
        for (int i = 0; i < n; ++i) want += w[i] * theta[i];
        sd::expect(std::abs(trace.avg[0][0] - want) <= 1e-12 * std::max(1.0, std::abs(want)),
                   "sequential " + sd::fmt(trace.avg[0][0]) + " vs profile " + sd::fmt(want));
    });

    run("ema.reconstruction", [&] {
        const int n = 512, every = 64;
        const std::vector<double> gammas = {16.97, 6.94};
        std::vector<double> theta(n);
        for (int i = 0; i < n; ++i) theta[i] = std::sin(i / 40.0) + i / 500.0;

        std::vector<EmaTrace<double>> traces(gammas.size());
        for (size_t g = 0; g < gammas.size(); ++g) {
            traces[g].name = "g";
            traces[g].gamma = gammas[g];
        }
        std::vector<SnapshotKey> keys;
        std::vector<double> snaps;
        for (int i = 0; i < n; ++i) {
            TensorT<double> v({1});
            v[0] = theta[i];
            std::vector<const TensorT<double>*> ptr{&v};
            for (auto& tr : traces) tr.update(ptr);
            if ((i + 1) % every == 0)
                for (auto& tr : traces) {
                    keys.push_back({i + 1, tr.gamma});
                    snaps.push_back(tr.avg[0][0]);
                }
        }

        const double target_gamma = gamma_from_sigma_rel(n, 0.05);
        const auto coeff = reconstruct_coeffs(keys, n, target_gamma);
        double blended = 0.0;
        for (size_t i = 0; i < coeff.size(); ++i) blended += coeff[i] * snaps[i];
        const auto w = response_profile(n, target_gamma);
        double exact = 0.0;
        for (int i = 0; i < n; ++i) exact += w[i] * theta[i];
        sd::expect(std::abs(blended - exact) <= 1e-2 * std::abs(exact),
                   "blend " + sd::fmt(blended) + " vs exact " + sd::fmt(exact));

        // a stored profile must come back exactly
        const auto self = reconstruct_coeffs(keys, n, gammas[1]);
        double rebuilt = 0.0;
        for (size_t i = 0; i < self.size(); ++i) rebuilt += self[i] * snaps[i];
        sd::expect(std::abs(rebuilt - snaps.back()) <= 1e-10,
                   "in-span recovery off by " + sd::fmt(rebuilt - snaps.back()));
    });

    run("sampler.gaussian-exact", [&] {
        const auto sched = cfg.schedule();
        const sd::GaussianPosterior post{cfg.sigma_x2, cfg.sigma_n2};
        TensorT<double> y({64});
        Rng rng(46);
        const double sy = std::sqrt(cfg.sigma_x2 + cfg.sigma_n2);
        for (size_t i = 0; i < y.numel(); ++i) y[i] = sy * rng.normal();
        auto den = [&](const TensorT<double>& x_t, const TensorT<double>& yy, double t) {
            const auto co = schedule_coefficients(sched, t);
            TensorT<double> d(x_t.dims());
            for (size_t i = 0; i < d.numel(); ++i)
                d[i] = post.denoise(x_t[i], yy[i], co.w_x, co.w_y, co.var_marg);
            return d;
        };
        for (int steps : {1, 10, 50}) {
            const auto out = enhance_spec(y, sched, steps, den);
            for (size_t i = 0; i < out.numel(); ++i)
                sd::expect(std::abs(out[i] - post.rho() * y[i]) <= 1e-10,
                           "posterior-mean mismatch, n_steps=" + std::to_string(steps));
        }
    });

    run("signal.stft-roundtrip", [&] {
        const auto sc = cfg.stft_config();
        Rng rng(47);
        std::vector<float> x(1024);
        for (auto& v : x) v = static_cast<float>(rng.normal());
        const auto back = istft(stft(x, sc), static_cast<int>(x.size()), sc);
        double num = 0.0, den = 0.0;
        for (size_t i = 0; i < x.size(); ++i) {
            num += (back[i] - x[i]) * (back[i] - x[i]);
            den += x[i] * x[i];
        }
        sd::expect(std::sqrt(num / den) <= 1e-6, "relative error " + sd::fmt(std::sqrt(num / den)));
    });

    run("signal.compression-roundtrip", [&] {
        const auto comp = cfg.compression();
        Rng rng(48);
        TensorT<float> spec({2, 33, 12});
        for (size_t i = 0; i < spec.numel(); ++i) spec[i] = static_cast<float>(rng.normal());
        const auto back = decompress(compress(spec, comp), comp);
        for (size_t i = 0; i < spec.numel(); ++i)
            sd::expect(std::abs(back[i] - spec[i]) <= 1e-6 * std::max(1.0f, std::abs(spec[i])),
                       "coefficient " + std::to_string(i));
    });

    run("signal.si-sdr-scale-invariance", [&] {
        Rng rng(49);
        std::vector<float> ref(512), est(512);
        for (size_t i = 0; i < ref.size(); ++i) {
            ref[i] = static_cast<float>(rng.normal());
            est[i] = ref[i] + 0.1f * static_cast<float>(rng.normal());
        }
        auto scaled = est;
        for (auto& v : scaled) v *= 3.7f;
        const double a = si_sdr(ref, est), b = si_sdr(ref, scaled);
        sd::expect(std::abs(a - b) <= 1e-6, "si_sdr " + sd::fmt(a) + " vs scaled " + sd::fmt(b));
    });

    run("signal.synth-snr", [&] {
        for (uint64_t seed : {1ull, 2ull, 3ull}) {
            const auto [clean, noisy] = synth_pair<float>(seed, 5.0, 4096, cfg.sample_rate);
            double ps = 0.0, pn = 0.0;
            for (size_t i = 0; i < clean.samples.size(); ++i) {
                ps += static_cast<double>(clean.samples[i]) * clean.samples[i];
                const double d = static_cast<double>(noisy.samples[i]) - clean.samples[i];
                pn += d * d;
            }
            const double snr = 10.0 * std::log10(ps / pn);
            sd::expect(std::abs(snr - 5.0) <= 0.01, "measured " + sd::fmt(snr) + " dB");
        }
    });

    return results;
}

inline int print_selftest(const std::vector<CheckResult>& results, std::ostream& out) {
    int failures = 0;
    for (const auto& r : results) {
        char line[256];
        std::snprintf(line, sizeof line, "%-32s %s  (%.1f ms)", r.name.c_str(),
                      r.pass ? "PASS" : "FAIL", r.ms);
        out << line;
        if (!r.pass) {
            out << "  " << r.message;
            ++failures;
        }
        out << "\n";
    }
    out << (failures == 0 ? "all checks passed" : std::to_string(failures) + " check(s) failed")
        << "\n";
    return failures == 0 ? 0 : 1;
}

} // namespace edm2se
