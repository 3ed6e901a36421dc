#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "edm2se/rng.hpp"

namespace edm2se {

// Dense row-major n-dimensional array.
template <typename T>
class TensorT {
public:
    TensorT() = default;
    explicit TensorT(std::vector<int> dims) : dims_(std::move(dims)) {
        data_.assign(numel_of(dims_), T(0));
    }
    TensorT(std::vector<int> dims, std::vector<T> data)
        : dims_(std::move(dims)), data_(std::move(data)) {
        if (data_.size() != numel_of(dims_))
            throw std::invalid_argument("tensor: data length does not match dims");
    }

    static size_t numel_of(const std::vector<int>& dims) {
        size_t n = 1;
        for (int d : dims) {
            if (d < 0) throw std::invalid_argument("tensor: negative extent");
            n *= static_cast<size_t>(d);
        }
        return n;
    }

    const std::vector<int>& dims() const { return dims_; }
    int dim(int i) const { return dims_.at(static_cast<size_t>(i)); }
    int ndim() const { return static_cast<int>(dims_.size()); }
    size_t numel() const { return data_.size(); }
    bool same_shape(const TensorT& o) const { return dims_ == o.dims_; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    T& operator[](size_t i) { return data_[i]; }
    const T& operator[](size_t i) const { return data_[i]; }

    T& at3(int c, int h, int w) {
        return data_[(static_cast<size_t>(c) * dims_[1] + h) * dims_[2] + w];
    }
    const T& at3(int c, int h, int w) const {
        return data_[(static_cast<size_t>(c) * dims_[1] + h) * dims_[2] + w];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
    void fill_normal(Rng& rng, double stddev = 1.0) {
        for (auto& x : data_) x = static_cast<T>(rng.normal() * stddev);
    }

    template <typename U>
    TensorT<U> cast() const {
        std::vector<U> d(data_.size());
        for (size_t i = 0; i < data_.size(); ++i) d[i] = static_cast<U>(data_[i]);
        return TensorT<U>(dims_, std::move(d));
    }

    bool all_finite() const {
        for (T v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    double sum() const {
        double s = 0;
        for (T v : data_) s += static_cast<double>(v);
        return s;
    }
    double sum_sq() const {
        double s = 0;
        for (T v : data_) s += static_cast<double>(v) * static_cast<double>(v);
        return s;
    }
    double mean() const { return numel() ? sum() / static_cast<double>(numel()) : 0.0; }
    double variance() const {
        if (numel() < 2) return 0.0;
        double m = mean(), s = 0;
        for (T v : data_) {
            double d = static_cast<double>(v) - m;
            s += d * d;
        }
        return s / static_cast<double>(numel() - 1);
    }

private:
    std::vector<int> dims_;
    std::vector<T> data_;
};

using Tensor = TensorT<float>;

template <typename T>
void require_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* what) {
    if (!a.same_shape(b)) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

template <typename T>
double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0;
    for (size_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

template <typename T>
double max_rel_diff(const TensorT<T>& a, const TensorT<T>& b, double floor = 1e-30) {
    require_same_shape(a, b, "max_rel_diff");
    double m = 0;
    for (size_t i = 0; i < a.numel(); ++i) {
        double x = a[i], y = b[i];
        double denom = std::max({std::abs(x), std::abs(y), floor});
        m = std::max(m, std::abs(x - y) / denom);
    }
    return m;
}

} // namespace edm2se
