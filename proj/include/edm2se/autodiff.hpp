#pragma once

// Reverse-mode tape over the fixed op set the denoiser needs. Node creation
// order is already a topological order, so backward is a single reverse sweep.
// Convolutions run on zero-padded planes with per-tap fused multiply-add over
// the whole flattened plane; the border cells accumulate garbage and are
// discarded when the interior is copied out. That keeps every hot loop a
// contiguous stride-1 stream.

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "fft.hpp"
#include "signal.hpp"
#include "tensor.hpp"

namespace edm2se {

namespace ad_detail {

template <typename T>
void axpy_range(T* out, const T* in, T c, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] += c * in[i];
}

// Eight independent accumulators break the serial dependency so the loop
// vectorizes; the lane split is fixed, so results stay deterministic.
template <typename T>
double dot_range(const T* a, const T* b, size_t n) {
    double lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (size_t l = 0; l < 8; ++l) lane[l] += static_cast<double>(a[i + l]) * b[i + l];
    double s = ((lane[0] + lane[4]) + (lane[1] + lane[5])) + ((lane[2] + lane[6]) + (lane[3] + lane[7]));
    for (; i < n; ++i) s += static_cast<double>(a[i]) * b[i];
    return s;
}

} // namespace ad_detail

template <typename T>
class Tape {
public:
    using Id = int32_t;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    size_t size() const { return nodes_.size(); }
    const TensorT<T>& value(Id id) const { return nodes_[check(id)].value; }
    TensorT<T>& grad(Id id) { return nodes_[check(id)].grad; }
    bool needs_grad(Id id) const { return nodes_[check(id)].needs; }

    Id leaf(TensorT<T> v, bool needs = false) {
        return push(std::move(v), needs, nullptr);
    }

    // out = alpha * a
    Id scale(Id a, T alpha) {
        const auto& av = value(a);
        TensorT<T> out(av.dims());
        for (size_t i = 0; i < out.numel(); ++i) out[i] = alpha * av[i];
        return push(std::move(out), needs_grad(a), [this, a, alpha](Id self) {
            if (!needs_grad(a)) return;
            accumulate(a, [&](size_t i) { return alpha * grad_at(self, i); });
        });
    }

    // out = alpha * a + beta * c, with c a constant tensor
    Id affine_const(Id a, T alpha, const TensorT<T>& c, T beta) {
        const auto& av = value(a);
        require_same_shape(av, c, "affine_const");
        TensorT<T> out(av.dims());
        for (size_t i = 0; i < out.numel(); ++i) out[i] = alpha * av[i] + beta * c[i];
        return push(std::move(out), needs_grad(a), [this, a, alpha](Id self) {
            if (!needs_grad(a)) return;
            accumulate(a, [&](size_t i) { return alpha * grad_at(self, i); });
        });
    }

    // out = ca * a + cb * b
    Id add2(Id a, Id b, T ca = T(1), T cb = T(1)) {
        const auto& av = value(a);
        const auto& bv = value(b);
        require_same_shape(av, bv, "add2");
        TensorT<T> out(av.dims());
        for (size_t i = 0; i < out.numel(); ++i) out[i] = ca * av[i] + cb * bv[i];
        return push(std::move(out), needs_grad(a) || needs_grad(b), [this, a, b, ca, cb](Id self) {
            if (needs_grad(a)) accumulate(a, [&](size_t i) { return ca * grad_at(self, i); });
            if (needs_grad(b)) accumulate(b, [&](size_t i) { return cb * grad_at(self, i); });
        });
    }

    // Per-output-channel direction: v_c / (||v_c|| + eps). Gradient flows
    // through the norm.
    Id normalize_weight(Id w, T eps) {
        const auto& wv = value(w);
        if (wv.ndim() < 1) throw std::invalid_argument("normalize_weight: need at least 1 dim");
        const int ch = wv.dim(0);
        const size_t per = wv.numel() / static_cast<size_t>(ch);
        TensorT<T> out(wv.dims());
        std::vector<double> norms(static_cast<size_t>(ch));
        for (int c = 0; c < ch; ++c) {
            const T* src = wv.data() + per * c;
            double n2 = 0.0;
            for (size_t i = 0; i < per; ++i) n2 += static_cast<double>(src[i]) * src[i];
            const double n = std::sqrt(n2);
            norms[c] = n;
            const double d = n + static_cast<double>(eps);
            const T s = d > 0.0 ? static_cast<T>(1.0 / d) : T(0);
            T* dst = out.data() + per * c;
            for (size_t i = 0; i < per; ++i) dst[i] = src[i] * s;
        }
        return push(std::move(out), needs_grad(w),
                    [this, w, eps, norms = std::move(norms), per, ch](Id self) {
            if (!needs_grad(w)) return;
            const auto& wv = value(w);
            auto& wg = grad(w);
            const auto& og = grad(self);
            for (int c = 0; c < ch; ++c) {
                const T* v = wv.data() + per * c;
                const T* g = og.data() + per * c;
                T* dv = wg.data() + per * c;
                const double n = norms[static_cast<size_t>(c)];
                const double d = n + static_cast<double>(eps);
                if (d <= 0.0) continue;
                const double s = 1.0 / d;
                if (n > 0.0) {
                    const double gv = ad_detail::dot_range(g, v, per);
                    const double k = gv * s * s / n;
                    for (size_t i = 0; i < per; ++i)
                        dv[i] += static_cast<T>(s * g[i] - k * v[i]);
                } else {
                    for (size_t i = 0; i < per; ++i) dv[i] += static_cast<T>(s * g[i]);
                }
            }
        });
    }

    // Same-size 2-D convolution, x [Ci,H,W], w [Co,Ci,k,k], odd k, zero pad.
    Id conv2d(Id x, Id w) {
        const auto& xv = value(x);
        const auto& wv = value(w);
        if (xv.ndim() != 3 || wv.ndim() != 4) throw std::invalid_argument("conv2d: bad ranks");
        if (wv.dim(1) != xv.dim(0)) throw std::invalid_argument("conv2d: channel mismatch");
        if (wv.dim(2) != wv.dim(3) || wv.dim(2) % 2 == 0) throw std::invalid_argument("conv2d: odd square kernels only");
        const int Ci = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
        const int Co = wv.dim(0), k = wv.dim(2), p = k / 2;
        const int Hp = H + 2 * p, Wp = W + 2 * p;
        const size_t plane = static_cast<size_t>(Hp) * Wp;

        std::vector<T> xpad(plane * Ci, T(0));
        pad_planes(xv, xpad.data(), Ci, H, W, p);
        std::vector<T> opad(plane * Co, T(0));
        for (int co = 0; co < Co; ++co)
            for (int ci = 0; ci < Ci; ++ci)
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        const T c = wv.data()[((static_cast<size_t>(co) * Ci + ci) * k + ky) * k + kx];
                        if (c == T(0)) continue;
                        const long off = static_cast<long>(ky - p) * Wp + (kx - p);
                        T* dst = opad.data() + plane * co;
                        const T* src = xpad.data() + plane * ci;
                        const size_t lo = static_cast<size_t>(std::max(0l, -off));
                        const size_t hi = static_cast<size_t>(std::min<long>(plane, static_cast<long>(plane) - off));
                        ad_detail::axpy_range(dst + lo, src + lo + off, c, hi - lo);
                    }
        TensorT<T> out({Co, H, W});
        unpad_planes(opad.data(), out, Co, H, W, p);

        return push(std::move(out), needs_grad(x) || needs_grad(w),
                    [this, x, w, Ci, H, W, Co, k, p, Hp, Wp, plane](Id self) {
            const auto& xv = value(x);
            const auto& wv = value(w);
            const auto& og = grad(self);
            std::vector<T> gpad(plane * Co, T(0));
            pad_planes(og, gpad.data(), Co, H, W, p);
            if (needs_grad(w)) {
                std::vector<T> xpad(plane * Ci, T(0));
                pad_planes(xv, xpad.data(), Ci, H, W, p);
                auto& wg = grad(w);
                for (int co = 0; co < Co; ++co)
                    for (int ci = 0; ci < Ci; ++ci)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const long off = static_cast<long>(ky - p) * Wp + (kx - p);
                                const T* gsrc = gpad.data() + plane * co;
                                const T* xsrc = xpad.data() + plane * ci;
                                const size_t lo = static_cast<size_t>(std::max(0l, -off));
                                const size_t hi = static_cast<size_t>(std::min<long>(plane, static_cast<long>(plane) - off));
                                wg.data()[((static_cast<size_t>(co) * Ci + ci) * k + ky) * k + kx] +=
                                    static_cast<T>(ad_detail::dot_range(gsrc + lo, xsrc + lo + off, hi - lo));
                            }
            }
            if (needs_grad(x)) {
                std::vector<T> dxpad(plane * Ci, T(0));
                for (int co = 0; co < Co; ++co)
                    for (int ci = 0; ci < Ci; ++ci)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const T c = wv.data()[((static_cast<size_t>(co) * Ci + ci) * k + ky) * k + kx];
                                if (c == T(0)) continue;
                                const long off = static_cast<long>(ky - p) * Wp + (kx - p);
                                T* dst = dxpad.data() + plane * ci;
                                const T* src = gpad.data() + plane * co;
                                const size_t lo = static_cast<size_t>(std::max(0l, -off));
                                const size_t hi = static_cast<size_t>(std::min<long>(plane, static_cast<long>(plane) - off));
                                // adjoint of the forward shift: scatter with the opposite offset
                                ad_detail::axpy_range(dst + lo + off, src + lo, c, hi - lo);
                            }
                auto& xg = grad(x);
                for (int ci = 0; ci < Ci; ++ci)
                    for (int h = 0; h < H; ++h) {
                        const T* src = dxpad.data() + plane * ci + static_cast<size_t>(h + p) * Wp + p;
                        T* dst = xg.data() + (static_cast<size_t>(ci) * H + h) * W;
                        for (int ww = 0; ww < W; ++ww) dst[ww] += src[ww];
                    }
            }
        });
    }

    // x [I] times normalized-or-raw weight w [O,I] -> [O]
    Id linear(Id x, Id w) {
        const auto& xv = value(x);
        const auto& wv = value(w);
        if (xv.ndim() != 1 || wv.ndim() != 2 || wv.dim(1) != xv.dim(0))
            throw std::invalid_argument("linear: shape mismatch");
        const int O = wv.dim(0), I = wv.dim(1);
        TensorT<T> out({O});
        for (int o = 0; o < O; ++o)
            out[o] = static_cast<T>(ad_detail::dot_range(wv.data() + static_cast<size_t>(o) * I, xv.data(), static_cast<size_t>(I)));
        return push(std::move(out), needs_grad(x) || needs_grad(w), [this, x, w, O, I](Id self) {
            const auto& xv = value(x);
            const auto& wv = value(w);
            const auto& og = grad(self);
            if (needs_grad(w)) {
                auto& wg = grad(w);
                for (int o = 0; o < O; ++o)
                    ad_detail::axpy_range(wg.data() + static_cast<size_t>(o) * I, xv.data(), og[o], static_cast<size_t>(I));
            }
            if (needs_grad(x)) {
                auto& xg = grad(x);
                for (int o = 0; o < O; ++o)
                    ad_detail::axpy_range(xg.data(), wv.data() + static_cast<size_t>(o) * I, og[o], static_cast<size_t>(I));
            }
        });
    }

    // 2x2 pooling scaled so white-noise variance is preserved (sum over the
    // cell divided by 2, not 4)
    Id down2(Id x) {
        const auto& xv = value(x);
        if (xv.ndim() != 3 || xv.dim(1) % 2 || xv.dim(2) % 2)
            throw std::invalid_argument("down2: dims must be even");
        const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
        TensorT<T> out({C, H / 2, W / 2});
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H / 2; ++h)
                for (int w = 0; w < W / 2; ++w)
                    out.at3(c, h, w) = static_cast<T>(0.5) *
                        (xv.at3(c, 2 * h, 2 * w) + xv.at3(c, 2 * h, 2 * w + 1) +
                         xv.at3(c, 2 * h + 1, 2 * w) + xv.at3(c, 2 * h + 1, 2 * w + 1));
        return push(std::move(out), needs_grad(x), [this, x, C, H, W](Id self) {
            if (!needs_grad(x)) return;
            auto& xg = grad(x);
            const auto& og = grad(self);
            for (int c = 0; c < C; ++c)
                for (int h = 0; h < H / 2; ++h)
                    for (int w = 0; w < W / 2; ++w) {
                        const T g = static_cast<T>(0.5) * og.data()[(static_cast<size_t>(c) * (H / 2) + h) * (W / 2) + w];
                        xg.at3(c, 2 * h, 2 * w) += g;
                        xg.at3(c, 2 * h, 2 * w + 1) += g;
                        xg.at3(c, 2 * h + 1, 2 * w) += g;
                        xg.at3(c, 2 * h + 1, 2 * w + 1) += g;
                    }
        });
    }

    // nearest-neighbour upsample by 2
    Id up2(Id x) {
        const auto& xv = value(x);
        if (xv.ndim() != 3) throw std::invalid_argument("up2: need [C,H,W]");
        const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
        TensorT<T> out({C, 2 * H, 2 * W});
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    const T v = xv.at3(c, h, w);
                    out.at3(c, 2 * h, 2 * w) = v;
                    out.at3(c, 2 * h, 2 * w + 1) = v;
                    out.at3(c, 2 * h + 1, 2 * w) = v;
                    out.at3(c, 2 * h + 1, 2 * w + 1) = v;
                }
        return push(std::move(out), needs_grad(x), [this, x, C, H, W](Id self) {
            if (!needs_grad(x)) return;
            auto& xg = grad(x);
            const auto& og = grad(self);
            for (int c = 0; c < C; ++c)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w)
                        xg.at3(c, h, w) += og.at3(c, 2 * h, 2 * w) + og.at3(c, 2 * h, 2 * w + 1) +
                                           og.at3(c, 2 * h + 1, 2 * w) + og.at3(c, 2 * h + 1, 2 * w + 1);
        });
    }

    // silu(x)/0.596, the variance-preserving gating
    Id mp_silu(Id x) {
        const auto& xv = value(x);
        TensorT<T> out(xv.dims());
        for (size_t i = 0; i < out.numel(); ++i) {
            const double v = xv[i];
            out[i] = static_cast<T>(v / (1.0 + std::exp(-v)) / 0.596);
        }
        return push(std::move(out), needs_grad(x), [this, x](Id self) {
            if (!needs_grad(x)) return;
            const auto& xv = value(x);
            accumulate(x, [&](size_t i) {
                const double v = xv[i];
                const double s = 1.0 / (1.0 + std::exp(-v));
                return static_cast<T>(grad_at(self, i) * s * (1.0 + v * (1.0 - s)) / 0.596);
            });
        });
    }

    // ((1-tau) a + tau b) / sqrt((1-tau)^2 + tau^2), tau = sigmoid(raw)
    Id mp_add(Id a, Id b, Id tau_raw) { return mp_add_impl(a, b, tau_raw, T(0)); }
    Id mp_add_fixed(Id a, Id b, T tau) {
        if (!(tau > T(0) && tau < T(1))) throw std::invalid_argument("mp_add_fixed: tau in (0,1)");
        return mp_add_impl(a, b, -1, tau);
    }

    // out = s * x with s a learned scalar node
    Id scale_node(Id x, Id s) {
        const auto& xv = value(x);
        const auto& sv = value(s);
        if (sv.numel() != 1) throw std::invalid_argument("scale_node: s must be scalar");
        const T s0 = sv[0];
        TensorT<T> out(xv.dims());
        for (size_t i = 0; i < out.numel(); ++i) out[i] = s0 * xv[i];
        return push(std::move(out), needs_grad(x) || needs_grad(s), [this, x, s, s0](Id self) {
            const auto& og = grad(self);
            if (needs_grad(x)) accumulate(x, [&](size_t i) { return s0 * og[i]; });
            if (needs_grad(s)) {
                const auto& xv = value(x);
                grad(s)[0] += static_cast<T>(ad_detail::dot_range(og.data(), xv.data(), og.numel()));
            }
        });
    }

    // out[c,h,w] = x[c,h,w] * (1 + gain * emb[c]); gain is a scalar node
    Id cond_gate(Id x, Id emb, Id gain) {
        const auto& xv = value(x);
        const auto& ev = value(emb);
        const auto& gv = value(gain);
        if (xv.ndim() != 3 || ev.ndim() != 1 || ev.dim(0) != xv.dim(0) || gv.numel() != 1)
            throw std::invalid_argument("cond_gate: shape mismatch");
        const int C = xv.dim(0);
        const size_t plane = xv.numel() / static_cast<size_t>(C);
        const T g0 = gv[0];
        TensorT<T> out(xv.dims());
        for (int c = 0; c < C; ++c) {
            const T s = T(1) + g0 * ev[c];
            const T* src = xv.data() + plane * c;
            T* dst = out.data() + plane * c;
            for (size_t i = 0; i < plane; ++i) dst[i] = src[i] * s;
        }
        return push(std::move(out), needs_grad(x) || needs_grad(emb) || needs_grad(gain),
                    [this, x, emb, gain, C, plane](Id self) {
            const auto& xv = value(x);
            const auto& ev = value(emb);
            const T g0 = value(gain)[0];
            const auto& og = grad(self);
            double dgain = 0.0;
            for (int c = 0; c < C; ++c) {
                const T* gp = og.data() + plane * c;
                const T* xp = xv.data() + plane * c;
                const double gxdot = ad_detail::dot_range(gp, xp, plane);
                if (needs_grad(x)) {
                    const T s = T(1) + g0 * ev[c];
                    ad_detail::axpy_range(grad(x).data() + plane * c, gp, s, plane);
                }
                if (needs_grad(emb)) grad(emb)[c] += static_cast<T>(g0 * gxdot);
                dgain += static_cast<double>(ev[c]) * gxdot;
            }
            if (needs_grad(gain)) grad(gain)[0] += static_cast<T>(dgain);
        });
    }

    // keep rows [0,H) and cols [0,W)
    Id crop2d(Id x, int H, int W) {
        const auto& xv = value(x);
        if (xv.ndim() != 3 || H > xv.dim(1) || W > xv.dim(2))
            throw std::invalid_argument("crop2d: bad target size");
        const int C = xv.dim(0), H0 = xv.dim(1), W0 = xv.dim(2);
        TensorT<T> out({C, H, W});
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) out.at3(c, h, w) = xv.at3(c, h, w);
        (void)H0;
        return push(std::move(out), needs_grad(x), [this, x, C, H, W, W0](Id self) {
            if (!needs_grad(x)) return;
            auto& xg = grad(x);
            const auto& og = grad(self);
            (void)W0;
            for (int c = 0; c < C; ++c)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) xg.at3(c, h, w) += og.at3(c, h, w);
        });
    }

    // inverse of the amplitude compression, per complex coefficient
    Id decompress_op(Id x, CompressionParams p = {}) {
        const auto& xv = value(x);
        if (xv.ndim() != 3 || xv.dim(0) != 2) throw std::invalid_argument("decompress_op: expected [2,F,T]");
        const size_t plane = xv.numel() / 2;
        const double C = std::pow(p.scale, -1.0 / p.exponent);
        const double q = 1.0 / p.exponent - 1.0;
        TensorT<T> out(xv.dims());
        for (size_t i = 0; i < plane; ++i) {
            const double re = xv[i], im = xv[plane + i];
            const double m = std::hypot(re, im);
            const double gain = m > 0.0 ? C * std::pow(m, q) : 0.0;
            out[i] = static_cast<T>(re * gain);
            out[plane + i] = static_cast<T>(im * gain);
        }
        return push(std::move(out), needs_grad(x), [this, x, plane, C, q](Id self) {
            if (!needs_grad(x)) return;
            const auto& xv = value(x);
            auto& xg = grad(x);
            const auto& og = grad(self);
            for (size_t i = 0; i < plane; ++i) {
                const double re = xv[i], im = xv[plane + i];
                const double m2 = re * re + im * im;
                if (m2 <= 0.0) continue;
                const double m = std::sqrt(m2);
                const double mq = C * std::pow(m, q);
                const double mq2 = C * q * std::pow(m, q - 2.0);
                const double gre = og[i], gim = og[plane + i];
                xg[i] += static_cast<T>(gre * (mq + mq2 * re * re) + gim * mq2 * re * im);
                xg[plane + i] += static_cast<T>(gim * (mq + mq2 * im * im) + gre * mq2 * re * im);
            }
        });
    }

    // overlap-add inverse STFT as a linear tape op
    Id istft_op(Id spec, int length, StftConfig cfg = {}) {
        const auto& sv = value(spec);
        std::vector<T> wav = istft(sv, length, cfg);
        TensorT<T> out({length}, std::move(wav));
        const int M = sv.dim(2);
        return push(std::move(out), needs_grad(spec), [this, spec, length, cfg, M](Id self) {
            if (!needs_grad(spec)) return;
            const auto w = cfg.window();
            const int F = cfg.bins();
            const int pad = cfg.win / 2;
            const size_t padded = static_cast<size_t>((M - 1) * cfg.hop + cfg.win);
            std::vector<double> env(padded, 0.0);
            for (int m = 0; m < M; ++m)
                for (int n = 0; n < cfg.win; ++n)
                    env[static_cast<size_t>(m) * cfg.hop + n] += w[n] * w[n];
            const auto& og = grad(self);
            std::vector<double> gpad(padded, 0.0);
            for (int i = 0; i < length; ++i) {
                const size_t pidx = static_cast<size_t>(i + pad);
                if (pidx < padded && env[pidx] > 1e-12) gpad[pidx] = og[i] / env[pidx];
            }
            auto& sg = grad(spec);
            std::vector<T> frame(static_cast<size_t>(cfg.win));
            const double inv_n = 1.0 / cfg.win;
            for (int m = 0; m < M; ++m) {
                const size_t base = static_cast<size_t>(m) * cfg.hop;
                for (int n = 0; n < cfg.win; ++n)
                    frame[n] = static_cast<T>(gpad[base + n] * w[n]);
                const auto G = rfft(frame.data(), cfg.win);
                for (int f = 0; f < F; ++f) {
                    const double ck = (f == 0 || f == cfg.win / 2) ? 1.0 : 2.0;
                    sg.at3(0, f, m) += static_cast<T>(ck * inv_n * G[f].real());
                    if (f != 0 && f != cfg.win / 2)
                        sg.at3(1, f, m) += static_cast<T>(ck * inv_n * G[f].imag());
                }
            }
        });
    }

    // weight * sum((a - target)^2), scalar output
    Id mse_vs(Id a, const TensorT<T>& target, T weight) {
        const auto& av = value(a);
        require_same_shape(av, target, "mse_vs");
        double s = 0.0;
        for (size_t i = 0; i < av.numel(); ++i) {
            const double d = static_cast<double>(av[i]) - target[i];
            s += d * d;
        }
        TensorT<T> out({1});
        out[0] = static_cast<T>(weight * s);
        TensorT<T> tcopy = target;
        return push(std::move(out), needs_grad(a), [this, a, tcopy = std::move(tcopy), weight](Id self) {
            if (!needs_grad(a)) return;
            const auto& av = value(a);
            const T g = grad(self)[0];
            accumulate(a, [&](size_t i) { return static_cast<T>(2) * weight * g * (av[i] - tcopy[i]); });
        });
    }

    // weight * sum|a - target|, scalar output; subgradient 0 at kinks
    Id l1_vs(Id a, const TensorT<T>& target, T weight) {
        const auto& av = value(a);
        require_same_shape(av, target, "l1_vs");
        double s = 0.0;
        for (size_t i = 0; i < av.numel(); ++i) s += std::abs(static_cast<double>(av[i]) - target[i]);
        TensorT<T> out({1});
        out[0] = static_cast<T>(weight * s);
        TensorT<T> tcopy = target;
        return push(std::move(out), needs_grad(a), [this, a, tcopy = std::move(tcopy), weight](Id self) {
            if (!needs_grad(a)) return;
            const auto& av = value(a);
            const T g = grad(self)[0];
            accumulate(a, [&](size_t i) {
                const T d = av[i] - tcopy[i];
                return d > T(0) ? weight * g : (d < T(0) ? -weight * g : T(0));
            });
        });
    }

    void backward(Id root) {
        auto& r = nodes_[check(root)];
        if (r.value.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
        r.grad[0] = T(1);
        for (Id id = static_cast<Id>(nodes_.size()) - 1; id >= 0; --id)
            if (nodes_[id].bwd) nodes_[id].bwd(id);
    }

private:
    struct Node {
        TensorT<T> value;
        TensorT<T> grad;
        bool needs;
        std::function<void(Id)> bwd;
    };
    std::vector<Node> nodes_;

    Id check(Id id) const {
        if (id < 0 || static_cast<size_t>(id) >= nodes_.size()) throw std::out_of_range("tape: bad node id");
        return id;
    }

    template <typename Fn>
    Id push(TensorT<T> v, bool needs, Fn&& bwd) {
        Node n{std::move(v), TensorT<T>(), needs, std::function<void(Id)>()};
        n.grad = TensorT<T>(n.value.dims());
        if constexpr (!std::is_same_v<std::decay_t<Fn>, std::nullptr_t>) n.bwd = std::forward<Fn>(bwd);
        nodes_.push_back(std::move(n));
        return static_cast<Id>(nodes_.size()) - 1;
    }

    T grad_at(Id id, size_t i) const { return nodes_[id].grad[i]; }

    template <typename Fn>
    void accumulate(Id target, Fn&& f) {
        auto& g = grad(target);
        for (size_t i = 0; i < g.numel(); ++i) g[i] += f(i);
    }

    static void pad_planes(const TensorT<T>& x, T* dst, int C, int H, int W, int p) {
        const int Wp = W + 2 * p;
        const size_t plane = static_cast<size_t>(H + 2 * p) * Wp;
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h) {
                const T* src = x.data() + (static_cast<size_t>(c) * H + h) * W;
                T* d = dst + plane * c + static_cast<size_t>(h + p) * Wp + p;
                for (int w = 0; w < W; ++w) d[w] = src[w];
            }
    }

    static void unpad_planes(const T* src, TensorT<T>& out, int C, int H, int W, int p) {
        const int Wp = W + 2 * p;
        const size_t plane = static_cast<size_t>(H + 2 * p) * Wp;
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h) {
                const T* s = src + plane * c + static_cast<size_t>(h + p) * Wp + p;
                T* d = out.data() + (static_cast<size_t>(c) * H + h) * W;
                for (int w = 0; w < W; ++w) d[w] = s[w];
            }
    }

    Id mp_add_impl(Id a, Id b, Id tau_raw, T fixed_tau) {
        const auto& av = value(a);
        const auto& bv = value(b);
        require_same_shape(av, bv, "mp_add");
        const bool learned = tau_raw >= 0;
        if (learned && value(tau_raw).numel() != 1) throw std::invalid_argument("mp_add: tau must be scalar");
        const double tau = learned ? 1.0 / (1.0 + std::exp(-static_cast<double>(value(tau_raw)[0])))
                                   : static_cast<double>(fixed_tau);
        const double denom = std::sqrt((1.0 - tau) * (1.0 - tau) + tau * tau);
        const T ca = static_cast<T>((1.0 - tau) / denom);
        const T cb = static_cast<T>(tau / denom);
        TensorT<T> out(av.dims());
        for (size_t i = 0; i < out.numel(); ++i) out[i] = ca * av[i] + cb * bv[i];
        const bool needs = needs_grad(a) || needs_grad(b) || (learned && needs_grad(tau_raw));
        return push(std::move(out), needs, [this, a, b, tau_raw, learned, tau, denom, ca, cb](Id self) {
            const auto& og = grad(self);
            if (needs_grad(a)) accumulate(a, [&](size_t i) { return ca * og[i]; });
            if (needs_grad(b)) accumulate(b, [&](size_t i) { return cb * og[i]; });
            if (learned && needs_grad(tau_raw)) {
                const auto& av = value(a);
                const auto& bv = value(b);
                const auto& ov = value(self);
                double dtau = 0.0;
                for (size_t i = 0; i < og.numel(); ++i) {
                    const double dout = (static_cast<double>(bv[i]) - av[i]) / denom -
                                        static_cast<double>(ov[i]) * (2.0 * tau - 1.0) / (denom * denom);
                    dtau += static_cast<double>(og[i]) * dout;
                }
                grad(tau_raw)[0] += static_cast<T>(dtau * tau * (1.0 - tau));
            }
        });
    }
};

} // namespace edm2se
