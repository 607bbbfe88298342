// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "broadnas/data_io.hpp"
#include "doctest.h"

using namespace broadnas;
namespace fs = std::filesystem;

namespace {

Dataset tiny_cifar(std::size_t n) {
    Dataset d;
    d.split = "t";
    d.labels.resize(n);
    d.pixels.resize(n * 3072);
    for (std::size_t i = 0; i < n; ++i) d.labels[i] = static_cast<int>(i % 10);
    for (std::size_t i = 0; i < d.pixels.size(); ++i) d.pixels[i] = static_cast<std::uint8_t>((i * 37) % 256);
    return d;
}

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("broadnas_test_data_io_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("CIFAR-10 records round trip") {
    const auto dir = scratch("roundtrip");
    const Dataset d = tiny_cifar(7);
    write_cifar10_file(d, dir / "b.bin");
    CHECK(fs::file_size(dir / "b.bin") == 7 * kCifarRecordBytes);
    const Dataset r = read_cifar10_file(dir / "b.bin");
    CHECK(r.labels == d.labels);
    CHECK(r.pixels == d.pixels);
    fs::remove_all(dir);
}

TEST_CASE("malformed CIFAR-10 files name the file") {
    const auto dir = scratch("bad");
    {
        std::ofstream out(dir / "short.bin", std::ios::binary);
        out << std::string(kCifarRecordBytes + 5, '\0');
    }
    try {
        read_cifar10_file(dir / "short.bin");
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("short.bin") != std::string::npos);
    }
    {
        std::string rec(kCifarRecordBytes, '\0');
        rec[0] = 12;
        std::ofstream out(dir / "label.bin", std::ios::binary);
        out << rec;
    }
    CHECK_THROWS_AS(read_cifar10_file(dir / "label.bin"), DataError);

    write_cifar10_file(tiny_cifar(3), dir / "data_batch_1.bin");
    try {
        load_cifar10_binary(dir);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("data_batch_1.bin") != std::string::npos);
    }
    CHECK_THROWS_AS(read_cifar10_file(dir / "absent.bin"), DataError);
    fs::remove_all(dir);
}

TEST_CASE("dataset validation, subsets and splits") {
    Dataset d = tiny_cifar(5);
    CHECK_NOTHROW(d.validate());
    const std::vector<std::size_t> idx{4, 1};
    const Dataset s = d.subset(idx, "s");
    CHECK(s.labels == std::vector<int>{4, 1});
    CHECK(std::equal(s.pixels.begin(), s.pixels.begin() + 3072, d.pixels.begin() + 4 * 3072));
    auto [a, b] = d.split_at(2, "a", "b");
    CHECK(a.size() == 2);
    CHECK(b.size() == 3);
    CHECK(b.labels[0] == 2);
    CHECK_THROWS_AS(d.split_at(9, "a", "b"), DataError);
    d.labels[3] = 10;
    CHECK_THROWS_AS(d.validate(), DataError);
}

TEST_CASE("normalizer statistics and batches") {
    const Dataset d = synthetic_dataset({4, 40, 8, 3, 0.3, 1, 9});
    const Normalizer n = Normalizer::from_data(d);
    std::vector<std::size_t> all(d.size());
    std::iota(all.begin(), all.end(), 0);
    const Tensor x = make_batch(d, all, n);
    const std::size_t plane = 64;
    for (std::size_t ch = 0; ch < 3; ++ch) {
        double m = 0.0, v = 0.0;
        for (std::size_t r = 0; r < d.size(); ++r)
            for (std::size_t i = 0; i < plane; ++i) m += x.data()[(r * 3 + ch) * plane + i];
        m /= static_cast<double>(d.size() * plane);
        for (std::size_t r = 0; r < d.size(); ++r)
            for (std::size_t i = 0; i < plane; ++i) v += std::pow(x.data()[(r * 3 + ch) * plane + i] - m, 2);
        v /= static_cast<double>(d.size() * plane);
        CHECK(std::abs(m) < 1e-9);
        CHECK(v == doctest::Approx(1.0));
    }
    CHECK(batch_labels(d, all)[5] == d.labels[5]);
    const std::vector<std::size_t> bad{d.size()};
    CHECK_THROWS_AS(make_batch(d, bad, n), DataError);
    CHECK_THROWS_AS(make_batch(d, all, Normalizer{{0.5}, {0.5}}), DataError);
}

TEST_CASE("augmentation shifts with zero padding and flips") {
    std::vector<double> img(2 * 3 * 3);
    std::iota(img.begin(), img.end(), 1.0);
    const AugmentSpec spec{true, 1, true, 0.5, 0};

    std::vector<double> same = img;
    augment_image(same, 2, 3, 3, spec, {1, 1, false});
    CHECK(same == img);

    std::vector<double> shifted = img;
    augment_image(shifted, 2, 3, 3, spec, {0, 2, false});
    // out(y, x) = in(y - 1, x + 1)
    CHECK(shifted[0] == 0.0);
    CHECK(shifted[3] == img[1]);
    CHECK(shifted[5] == 0.0);
    CHECK(shifted[9 + 4] == img[9 + 2]);

    std::vector<double> flipped = img;
    augment_image(flipped, 2, 3, 3, spec, {1, 1, true});
    CHECK(flipped[0] == img[2]);
    CHECK(flipped[9 + 5] == img[9 + 3]);
}

TEST_CASE("cutout zeroes a clipped square") {
    std::vector<double> img(1 * 6 * 6, 1.0);
    CHECK(cutout_at(img, 1, 6, 6, 4, 3, 3) == 16);
    CHECK(img[1 * 6 + 1] == 0.0);
    CHECK(img[4 * 6 + 4] == 0.0);
    CHECK(img[5 * 6 + 5] == 1.0);
    CHECK(img[0] == 1.0);
    std::vector<double> corner(6 * 6, 1.0);
    CHECK(cutout_at(corner, 1, 6, 6, 4, 0, 0) == 4);
    CHECK(std::count(corner.begin(), corner.end(), 0.0) == 4);

    std::mt19937_64 a(1), b(1);
    Tensor x(Shape{3, 3, 8, 8}, 1.0), y(Shape{3, 3, 8, 8}, 1.0);
    const AugmentSpec full{true, 2, true, 0.5, 4};
    augment(x, full, a);
    augment(y, full, b);
    CHECK(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
}

TEST_CASE("synthetic data is deterministic and class conditional") {
    const SyntheticSpec spec{5, 50, 12, 3, 0.2, 1, 4};
    const Dataset a = synthetic_dataset(spec);
    const Dataset b = synthetic_dataset(spec);
    CHECK(a.pixels == b.pixels);
    CHECK(a.size() == 50);
    CHECK(a.labels[7] == 2);
    CHECK_NOTHROW(a.validate());
    SyntheticSpec other = spec;
    other.seed = 5;
    CHECK(synthetic_dataset(other).pixels != a.pixels);
    CHECK(synthetic_template(spec, 0) != synthetic_template(spec, 1));
    SyntheticSpec one = spec;
    one.classes = 1;
    CHECK_THROWS_AS(synthetic_dataset(one), DataError);
}

TEST_CASE("epoch order is a permutation keyed by seed and epoch") {
    const auto p = epoch_order(100, 3, 0);
    std::vector<std::size_t> sorted = p;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < 100; ++i) CHECK(sorted[i] == i);
    CHECK(epoch_order(100, 3, 0) == p);
    CHECK(epoch_order(100, 3, 1) != p);
    CHECK(epoch_order(100, 4, 0) != p);
}
