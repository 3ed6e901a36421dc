#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace edm2se {

inline bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// Iterative radix-2 Cooley-Tukey, power-of-two lengths only.
template <typename T>
void fft_inplace(std::vector<std::complex<T>>& a, bool inverse) {
    const int n = static_cast<int>(a.size());
    if (!is_pow2(n)) throw std::invalid_argument("fft: length must be a power of two");
    for (int i = 1, j = 0; i < n; ++i) {
        int bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (int len = 2; len <= n; len <<= 1) {
        const double ang = 2.0 * std::numbers::pi / len * (inverse ? 1.0 : -1.0);
        const std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (int i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (int k = 0; k < len / 2; ++k) {
                std::complex<double> u(a[i + k]);
                std::complex<double> v = std::complex<double>(a[i + k + len / 2]) * w;
                a[i + k] = std::complex<T>(u + v);
                a[i + k + len / 2] = std::complex<T>(u - v);
                w *= wl;
            }
        }
    }
    if (inverse) {
        const T inv_n = T(1) / static_cast<T>(n);
        for (auto& x : a) x *= inv_n;
    }
}

// Real-input FFT; returns bins 0..n/2.
template <typename T>
std::vector<std::complex<T>> rfft(const T* x, int n) {
    std::vector<std::complex<T>> a(n);
    for (int i = 0; i < n; ++i) a[i] = std::complex<T>(x[i], T(0));
    fft_inplace(a, false);
    a.resize(static_cast<size_t>(n / 2 + 1));
    return a;
}

// Inverse of rfft. The imaginary parts of bins 0 and n/2 have no effect
// (the reconstruction takes the real part of the symmetrized inverse).
template <typename T>
std::vector<T> irfft(const std::complex<T>* spec, int n) {
    std::vector<std::complex<T>> a(n);
    const int half = n / 2;
    for (int k = 0; k <= half; ++k) a[k] = spec[k];
    for (int k = 1; k < half; ++k) a[n - k] = std::conj(spec[k]);
    fft_inplace(a, true);
    std::vector<T> out(n);
    for (int i = 0; i < n; ++i) out[i] = a[i].real();
    return out;
}

} // namespace edm2se
