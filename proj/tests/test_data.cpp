#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "ptl/data.hpp"

using ptl::BatchPlan;
using ptl::Dataset;
using ptl::Tensor;
using DT = Tensor<double>;

namespace {
std::filesystem::path tmp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("ptl_data_test_" + name);
}
}  // namespace

TEST_CASE("synthetic data: determinism, range, class structure") {
    auto a = ptl::synth_generate<float>(4, 5, 8, 3, 0.05, 42);
    auto b = ptl::synth_generate<float>(4, 5, 8, 3, 0.05, 42);
    CHECK(ptl::max_abs_diff(a.images, b.images) == 0.0);
    CHECK(a.labels == b.labels);
    CHECK(a.size() == 20);
    CHECK(a.class_count == 4);
    a.validate();
    for (float v : a.images.data) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    auto c = ptl::synth_generate<float>(4, 5, 8, 3, 0.05, 43);
    CHECK(ptl::max_abs_diff(a.images, c.images) > 0.0);
}

TEST_CASE("noise-free synthetic classes are constant and pairwise distinct") {
    auto ds = ptl::synth_generate<double>(4, 3, 8, 2, 0.0, 7);
    const std::int64_t sz = 2 * 8 * 8;
    for (int c = 0; c < 4; ++c) {
        const double* first = ds.images.data.data() + (c * 3) * sz;
        for (int rep = 1; rep < 3; ++rep) {
            const double* other = ds.images.data.data() + (c * 3 + rep) * sz;
            for (std::int64_t i = 0; i < sz; ++i) CHECK(first[i] == other[i]);
        }
    }
    // Nearest-centroid on the noise-free patterns is trivially perfect, so
    // the class patterns must be pairwise distinct.
    for (int c1 = 0; c1 < 4; ++c1)
        for (int c2 = c1 + 1; c2 < 4; ++c2) {
            double d = 0;
            for (std::int64_t i = 0; i < sz; ++i)
                d = std::max(d, std::abs(ds.images.data[c1 * 3 * sz + i] -
                                         ds.images.data[c2 * 3 * sz + i]));
            CHECK(d > 0.05);
        }
}

TEST_CASE("nearest-centroid separates the noisy synthetic classes") {
    auto train = ptl::synth_generate<double>(4, 20, 8, 2, 0.05, 11);
    auto probe = ptl::synth_generate<double>(4, 10, 8, 2, 0.05, 12);
    const std::int64_t sz = 2 * 8 * 8;
    std::vector<std::vector<double>> centroid(4, std::vector<double>(static_cast<std::size_t>(sz)));
    for (int s = 0; s < train.size(); ++s)
        for (std::int64_t i = 0; i < sz; ++i)
            centroid[static_cast<std::size_t>(train.labels[static_cast<std::size_t>(s)])]
                    [static_cast<std::size_t>(i)] += train.images.data[s * sz + i] / 20.0;
    int correct = 0;
    for (int s = 0; s < probe.size(); ++s) {
        int best = 0;
        double best_d = 1e300;
        for (int c = 0; c < 4; ++c) {
            double d = 0;
            for (std::int64_t i = 0; i < sz; ++i) {
                const double e = probe.images.data[s * sz + i] - centroid[static_cast<std::size_t>(c)][static_cast<std::size_t>(i)];
                d += e * e;
            }
            if (d < best_d) best_d = d, best = c;
        }
        if (best == probe.labels[static_cast<std::size_t>(s)]) ++correct;
    }
    CHECK(correct == probe.size());
}

TEST_CASE("batch plans are bijections with deterministic order") {
    BatchPlan plan{9, 7};
    auto batches = plan.batches(23, 0);
    std::vector<int> seen;
    for (const auto& b : batches) seen.insert(seen.end(), b.begin(), b.end());
    CHECK(seen.size() == 23);
    std::vector<int> sorted = seen;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 23; ++i) CHECK(sorted[static_cast<std::size_t>(i)] == i);

    CHECK(plan.batches(23, 0) == batches);           // same epoch: same order
    CHECK(plan.batches(23, 1) != batches);           // next epoch reshuffles
    BatchPlan other{10, 7};
    CHECK(other.batches(23, 0) != batches);          // seed changes the order
    BatchPlan fixed{9, 7, true};
    CHECK(fixed.batches(23, 3) == plan.batches(23, 0));

    // Oversized batch size: one batch with everything.
    BatchPlan big{1, 100};
    auto all = big.batches(5, 0);
    CHECK(all.size() == 1);
    CHECK(all[0].size() == 5);
}

TEST_CASE("binary image file round trip") {
    auto ds = ptl::synth_generate<float>(10, 3, 32, 3, 0.1, 77);
    const auto path = tmp_path("roundtrip.bin");
    ptl::cifar_write(path.string(), ds);
    CHECK(std::filesystem::file_size(path) == 30 * 3073);
    auto back = ptl::cifar_read<float>(path.string());
    CHECK(back.size() == 30);
    CHECK(back.labels == ds.labels);
    // Lossless up to the 8-bit quantization.
    CHECK(ptl::max_abs_diff(back.images, ds.images) <= 0.5 / 255.0 + 1e-9);
    std::filesystem::remove(path);
}

TEST_CASE("binary reader validates the record format") {
    const auto path = tmp_path("records.bin");
    {
        // One valid record: label 7, all pixels 255.
        std::ofstream f(path, std::ios::binary);
        std::vector<unsigned char> rec(3073, 255);
        rec[0] = 7;
        f.write(reinterpret_cast<const char*>(rec.data()), 3073);
    }
    auto ds = ptl::cifar_read<double>(path.string());
    CHECK(ds.size() == 1);
    CHECK(ds.labels[0] == 7);
    for (double v : ds.images.data) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));

    {
        // Truncated file: not a multiple of the record size.
        std::ofstream f(path, std::ios::binary);
        std::vector<char> junk(3072, 0);
        f.write(junk.data(), 3072);
    }
    CHECK_THROWS_AS(ptl::cifar_read<double>(path.string()), ptl::DataError);

    {
        // Out-of-range label byte.
        std::ofstream f(path, std::ios::binary);
        std::vector<unsigned char> rec(3073, 0);
        rec[0] = 10;
        f.write(reinterpret_cast<const char*>(rec.data()), 3073);
    }
    CHECK_THROWS_AS(ptl::cifar_read<double>(path.string()), ptl::DataError);
    CHECK_THROWS_AS(ptl::cifar_read<double>(tmp_path("missing.bin").string()), ptl::DataError);
    std::filesystem::remove(path);
}

TEST_CASE("read limit caps the record count") {
    auto ds = ptl::synth_generate<float>(10, 2, 32, 3, 0.0, 3);
    const auto path = tmp_path("limit.bin");
    ptl::cifar_write(path.string(), ds);
    auto capped = ptl::cifar_read<float>(path.string(), 5);
    CHECK(capped.size() == 5);
    std::filesystem::remove(path);
}

TEST_CASE("dataset validation catches label problems") {
    Dataset<double> ds;
    ds.name = "bad";
    ds.images = DT({2, 1, 2, 2});
    ds.labels = {0};
    ds.class_count = 2;
    CHECK_THROWS_AS(ds.validate(), ptl::DataError);
    ds.labels = {0, 2};
    CHECK_THROWS_AS(ds.validate(), ptl::DataError);
    ds.labels = {0, 1};
    CHECK_NOTHROW(ds.validate());
}

TEST_CASE("gather preserves sample content") {
    auto ds = ptl::synth_generate<double>(3, 2, 4, 1, 0.2, 21);
    Tensor<double> g = ds.gather_images({3, 0});
    const std::int64_t sz = 16;
    for (std::int64_t i = 0; i < sz; ++i) {
        CHECK(g.data[i] == ds.images.data[3 * sz + i]);
        CHECK(g.data[sz + i] == ds.images.data[i]);
    }
    CHECK(ds.gather_labels({3, 0}) == std::vector<int>{ds.labels[3], ds.labels[0]});
}

TEST_CASE("augmentation keeps shape and stays deterministic per seed") {
    auto ds = ptl::synth_generate<float>(2, 4, 8, 3, 0.1, 31);
    std::vector<int> idx{0, 1, 2, 3};
    Tensor<float> batch = ds.gather_images(idx);
    std::mt19937_64 r1(5), r2(5), r3(6);
    Tensor<float> a = ptl::augment_batch(batch, r1);
    Tensor<float> b = ptl::augment_batch(batch, r2);
    Tensor<float> c = ptl::augment_batch(batch, r3);
    CHECK(a.shape == batch.shape);
    CHECK(ptl::max_abs_diff(a, b) == 0.0);
    CHECK(a.all_finite());
    (void)c;
}
