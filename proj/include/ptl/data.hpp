#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ptl/tensor.hpp"

namespace ptl {

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

template <typename S>
struct Dataset {
    Tensor<S> images;  // [M, C, H, W], values in [0,1]
    std::vector<int> labels;
    int class_count = 0;
    std::string name;

    int size() const { return images.shape.empty() ? 0 : images.shape[0]; }

    void validate() const {
        if (size() < 1) throw DataError("dataset '" + name + "': empty");
        if (static_cast<int>(labels.size()) != size())
            throw DataError("dataset '" + name + "': label count mismatch");
        for (int l : labels)
            if (l < 0 || l >= class_count)
                throw DataError("dataset '" + name + "': label " + std::to_string(l) +
                                " out of [0, " + std::to_string(class_count) + ")");
    }

    Tensor<S> gather_images(const std::vector<int>& idx) const {
        const int C = images.shape[1], H = images.shape[2], W = images.shape[3];
        const std::int64_t stride = static_cast<std::int64_t>(C) * H * W;
        Tensor<S> out({static_cast<int>(idx.size()), C, H, W});
        for (std::size_t i = 0; i < idx.size(); ++i)
            std::copy_n(images.data.data() + idx[i] * stride, stride,
                        out.data.data() + static_cast<std::int64_t>(i) * stride);
        return out;
    }
    std::vector<int> gather_labels(const std::vector<int>& idx) const {
        std::vector<int> out(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[static_cast<std::size_t>(idx[i])];
        return out;
    }
};

namespace detail {
// Hand-rolled Fisher-Yates so batch order does not depend on the standard
// library's shuffle implementation.
inline void shuffle_indices(std::vector<int>& idx, std::mt19937_64& rng) {
    for (std::size_t i = idx.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(idx[i - 1], idx[j]);
    }
}
}  // namespace detail

// Deterministic per-epoch shuffled batching. Each epoch's permutation is a
// bijection derived from (seed, epoch) only.
struct BatchPlan {
    std::uint64_t seed = 0;
    int batch_size = 32;
    // When set, every epoch reuses the epoch-0 permutation. Used by tests
    // that compare first-batch outputs across epoch boundaries.
    bool same_order_each_epoch = false;

    std::vector<std::vector<int>> batches(int sample_count, int epoch) const {
        if (batch_size < 1) throw DataError("batch plan: batch_size must be positive");
        std::vector<int> idx(static_cast<std::size_t>(sample_count));
        for (int i = 0; i < sample_count; ++i) idx[static_cast<std::size_t>(i)] = i;
        const std::uint64_t e = same_order_each_epoch ? 0 : static_cast<std::uint64_t>(epoch);
        std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + e + 1);
        detail::shuffle_indices(idx, rng);
        std::vector<std::vector<int>> out;
        for (int start = 0; start < sample_count; start += batch_size) {
            const int end = std::min(start + batch_size, sample_count);
            out.emplace_back(idx.begin() + start, idx.begin() + end);
        }
        return out;
    }
};

// Fixed per-class grating pattern plus seeded Gaussian noise, clamped to
// [0,1]. At noise_std = 0 every image of a class is identical.
template <typename S>
Dataset<S> synth_generate(int classes, int per_class, int resolution, int channels,
                          double noise_std, std::uint64_t seed) {
    if (classes < 2) throw DataError("synth_generate: need at least 2 classes");
    if (per_class < 1 || resolution < 1 || channels < 1)
        throw DataError("synth_generate: non-positive dimension");
    const int m = classes * per_class;
    Dataset<S> ds;
    ds.images = Tensor<S>({m, channels, resolution, resolution});
    ds.labels.resize(static_cast<std::size_t>(m));
    ds.class_count = classes;
    ds.name = "synthetic";
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    const double pi = 3.14159265358979323846;
    int s = 0;
    for (int c = 0; c < classes; ++c) {
        const double fx = 1.0 + c % 3;
        const double fy = 1.0 + (c / 3) % 3;
        const double phase = 2.0 * pi * c / classes;
        for (int rep = 0; rep < per_class; ++rep, ++s) {
            ds.labels[static_cast<std::size_t>(s)] = c;
            for (int ch = 0; ch < channels; ++ch)
                for (int h = 0; h < resolution; ++h)
                    for (int w = 0; w < resolution; ++w) {
                        double v = 0.5 + 0.35 * std::sin(2.0 * pi *
                                                             (fx * h + fy * w) / resolution +
                                                         phase + ch * pi / 3.0);
                        if (noise_std > 0) v += noise_std * noise(rng);
                        ds.images.at4(s, ch, h, w) =
                            static_cast<S>(std::clamp(v, 0.0, 1.0));
                    }
        }
    }
    return ds;
}

// CIFAR-10 binary layout: 3073-byte records, 1 label byte then 3072 pixel
// bytes as channel-major 32x32 R, G, B planes. Pixels scaled by 1/255.
template <typename S>
Dataset<S> cifar_read(const std::string& path, int limit = 0) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cifar_read: cannot open " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    constexpr std::size_t record = 3073;
    if (bytes.empty() || bytes.size() % record != 0)
        throw DataError("cifar_read: " + path + " has " + std::to_string(bytes.size()) +
                        " bytes, not a multiple of 3073");
    int m = static_cast<int>(bytes.size() / record);
    if (limit > 0) m = std::min(m, limit);
    Dataset<S> ds;
    ds.images = Tensor<S>({m, 3, 32, 32});
    ds.labels.resize(static_cast<std::size_t>(m));
    ds.class_count = 10;
    ds.name = std::filesystem::path(path).filename().string();
    for (int i = 0; i < m; ++i) {
        const auto* rec = reinterpret_cast<const unsigned char*>(bytes.data()) + i * record;
        if (rec[0] >= 10)
            throw DataError("cifar_read: record " + std::to_string(i) + " has label byte " +
                            std::to_string(rec[0]));
        ds.labels[static_cast<std::size_t>(i)] = rec[0];
        for (int j = 0; j < 3072; ++j)
            ds.images.data[static_cast<std::int64_t>(i) * 3072 + j] =
                static_cast<S>(rec[1 + j]) / S(255);
    }
    return ds;
}

// Inverse of cifar_read up to 8-bit quantization; used for round-trip tests
// and for materializing synthetic data in the CIFAR container.
template <typename S>
void cifar_write(const std::string& path, const Dataset<S>& ds) {
    if (ds.class_count > 10) throw DataError("cifar_write: more than 10 classes");
    if (ds.images.shape[1] != 3 || ds.images.shape[2] != 32 || ds.images.shape[3] != 32)
        throw DataError("cifar_write: images must be [M,3,32,32], got " + ds.images.shape_str());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cifar_write: cannot open " + path);
    for (int i = 0; i < ds.size(); ++i) {
        const char label = static_cast<char>(ds.labels[static_cast<std::size_t>(i)]);
        out.write(&label, 1);
        for (int j = 0; j < 3072; ++j) {
            const double v = static_cast<double>(ds.images.data[static_cast<std::int64_t>(i) * 3072 + j]);
            const int q = std::clamp(static_cast<int>(std::lround(v * 255.0)), 0, 255);
            const char b = static_cast<char>(static_cast<unsigned char>(q));
            out.write(&b, 1);
        }
    }
}

// Pad-4 random crop plus horizontal flip, seeded per call.
template <typename S>
Tensor<S> augment_batch(const Tensor<S>& images, std::mt19937_64& rng) {
    const int N = images.shape[0], C = images.shape[1], H = images.shape[2], W = images.shape[3];
    constexpr int pad = 4;
    Tensor<S> out(images.shape);
    for (int n = 0; n < N; ++n) {
        const int dh = static_cast<int>(rng() % (2 * pad + 1)) - pad;
        const int dw = static_cast<int>(rng() % (2 * pad + 1)) - pad;
        const bool flip = (rng() & 1) != 0;
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    const int sh = h + dh;
                    const int sw = (flip ? W - 1 - w : w) + dw;
                    out.at4(n, c, h, w) = (sh >= 0 && sh < H && sw >= 0 && sw < W)
                                              ? images.at4(n, c, sh, sw)
                                              : S(0);
                }
    }
    return out;
}

}  // namespace ptl
