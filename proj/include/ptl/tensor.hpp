#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ptl {

// Dense row-major tensor, rank 0..4, ordered (N, C, H, W) at full rank.
template <typename S>
struct Tensor {
    std::vector<int> shape;
    std::vector<S> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), S(0)) {
        check_shape(shape);
    }
    Tensor(std::vector<int> s, std::vector<S> d) : shape(std::move(s)), data(std::move(d)) {
        check_shape(shape);
        if (static_cast<std::int64_t>(data.size()) != count(shape))
            throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
    }

    static std::int64_t count(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int e : s) n *= e;
        return n;
    }
    static void check_shape(const std::vector<int>& s) {
        if (s.size() > 4) throw std::invalid_argument("tensor: rank > 4");
        for (int e : s)
            if (e < 1) throw std::invalid_argument("tensor: non-positive extent in " + shape_str(s));
    }
    static std::string shape_str(const std::vector<int>& s) {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
        os << ']';
        return os.str();
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int extent(int axis) const { return shape.at(static_cast<std::size_t>(axis)); }
    std::string shape_str() const { return shape_str(shape); }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, S v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor scalar(S v) { return Tensor({}, {v}); }

    // NCHW accessors; caller guarantees rank.
    S& at4(int n, int c, int h, int w) {
        return data[((static_cast<std::int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
    S at4(int n, int c, int h, int w) const {
        return data[((static_cast<std::int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
    S& at2(int r, int c) { return data[static_cast<std::int64_t>(r) * shape[1] + c]; }
    S at2(int r, int c) const { return data[static_cast<std::int64_t>(r) * shape[1] + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (S v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename T>
    Tensor<T> cast() const {
        Tensor<T> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
        return out;
    }
};

template <typename S>
void fill_uniform(Tensor<S>& t, S lo, S hi, std::mt19937_64& rng) {
    // Sample in double so f32 and f64 runs draw the same sequence.
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    for (S& v : t.data) v = static_cast<S>(dist(rng));
}

template <typename S>
void fill_normal(Tensor<S>& t, double mean, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(mean, stddev);
    for (S& v : t.data) v = static_cast<S>(dist(rng));
}

template <typename S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
    double m = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
    return m;
}

}  // namespace ptl
