// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hlm/error.hpp"

namespace hlm {

using shape_t = std::vector<std::size_t>;

inline std::string shape_str(const shape_t& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) {
        os << (i ? ", " : "") << s[i];
    }
    os << ')';
    return os.str();
}

inline std::size_t shape_numel(const shape_t& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// Storage is always double. In f32 mode every op result is rounded through
// float so numerics follow single precision.
enum class precision { f64, f32 };

inline precision& current_precision() {
    thread_local precision p = precision::f64;
    return p;
}

class precision_guard {
public:
    explicit precision_guard(precision p) : saved_(current_precision()) { current_precision() = p; }
    ~precision_guard() { current_precision() = saved_; }
    precision_guard(const precision_guard&) = delete;
    precision_guard& operator=(const precision_guard&) = delete;

private:
    precision saved_;
};

class tensor {
public:
    tensor() = default;

    explicit tensor(shape_t shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

    tensor(shape_t shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        require(shape_numel(shape_) == data_.size(), errc::shape_mismatch,
                "tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                    shape_str(shape_));
    }

    static tensor scalar(double v) { return tensor(shape_t{}, std::vector<double>{v}); }

    static tensor randn(shape_t shape, std::mt19937_64& gen, double stddev = 1.0) {
        tensor t(std::move(shape));
        std::normal_distribution<double> nd(0.0, stddev);
        for (auto& v : t.data_) {
            v = nd(gen);
        }
        return t;
    }

    static tensor uniform(shape_t shape, std::mt19937_64& gen, double lo, double hi) {
        tensor t(std::move(shape));
        std::uniform_real_distribution<double> ud(lo, hi);
        for (auto& v : t.data_) {
            v = ud(gen);
        }
        return t;
    }

    const shape_t& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& vec() noexcept { return data_; }
    const std::vector<double>& vec() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double item() const {
        require(data_.size() == 1, errc::shape_mismatch, "item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }

    tensor reshaped(shape_t s) const {
        require(shape_numel(s) == data_.size(), errc::shape_mismatch,
                "cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
        return tensor(std::move(s), data_);
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool operator==(const tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

private:
    shape_t shape_;
    std::vector<double> data_;
};

inline void require_same_shape(const tensor& a, const tensor& b, const char* op) {
    require(a.shape() == b.shape(), errc::shape_mismatch,
            std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void require_finite(const tensor& t, const char* where) {
    require(t.all_finite(), errc::non_finite, std::string(where) + ": non-finite value");
}

// Applies the active precision and rejects non-finite results.
inline void finalize(tensor& t, const char* op) {
    if (current_precision() == precision::f32) {
        for (auto& v : t.data()) {
            v = static_cast<double>(static_cast<float>(v));
        }
    }
    require_finite(t, op);
}

// a*x + b*y, elementwise.
inline tensor axpby(double a, const tensor& x, double b, const tensor& y) {
    require_same_shape(x, y, "axpby");
    tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = a * x[i] + b * y[i];
    }
    return out;
}

inline tensor operator+(const tensor& x, const tensor& y) { return axpby(1.0, x, 1.0, y); }
inline tensor operator-(const tensor& x, const tensor& y) { return axpby(1.0, x, -1.0, y); }

inline tensor operator*(double a, const tensor& x) {
    tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = a * x[i];
    }
    return out;
}

inline double dot(const tensor& x, const tensor& y) {
    require_same_shape(x, y, "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        s += x[i] * y[i];
    }
    return s;
}

inline double l2(const tensor& x) { return std::sqrt(dot(x, x)); }

inline double max_abs_diff(const tensor& x, const tensor& y) {
    require_same_shape(x, y, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        m = std::max(m, std::abs(x[i] - y[i]));
    }
    return m;
}

// Deterministic seed derivation: seed + purpose tag (+ index) through splitmix64.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0) {
    std::uint64_t h = 0xCBF29CE484222325ull;  // FNV-1a over the tag
    for (unsigned char c : tag) {
        h = (h ^ c) * 0x100000001B3ull;
    }
    return splitmix64(splitmix64(seed ^ h) + index);
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0) {
    return std::mt19937_64(derive_seed(seed, tag, index));
}

}  // namespace hlm
