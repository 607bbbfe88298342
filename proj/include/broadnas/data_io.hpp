// SPDX-License-Identifier: Apache-2.0
//
// Datasets, the CIFAR-10 binary format, augmentation and synthetic data.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "broadnas/tensor.hpp"

namespace broadnas {

class DataError : public Error {
public:
    using Error::Error;
};

/// Images stored as bytes in (N, C, H, W) order.
struct Dataset {
    int channels = 3;
    int height = 32;
    int width = 32;
    int num_classes = 10;
    std::vector<std::uint8_t> pixels;
    std::vector<int> labels;
    std::string split;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t image_bytes() const noexcept { return static_cast<std::size_t>(channels * height * width); }

    /// Throws DataError when sizes disagree or a label is out of range.
    void validate() const;
    Dataset subset(std::span<const std::size_t> indices, std::string split_name) const;
    /// First `n` records, remainder.
    std::pair<Dataset, Dataset> split_at(std::size_t n, std::string first, std::string second) const;
};

inline constexpr std::size_t kCifarRecordBytes = 1 + 3072;
inline constexpr std::size_t kCifarRecordsPerFile = 10000;

/// Reads one CIFAR-10 binary batch file (any whole number of records).
Dataset read_cifar10_file(const std::filesystem::path& path);
/// Writes `data` (3x32x32) in the CIFAR-10 binary record layout.
void write_cifar10_file(const Dataset& data, const std::filesystem::path& path);

struct CifarSplits {
    Dataset train;
    Dataset test;
};

/// data_batch_1.bin .. data_batch_5.bin and test_batch.bin, each exactly
/// 10,000 records.
CifarSplits load_cifar10_binary(const std::filesystem::path& dir);

/// Directory named by BROADNAS_DATA_DIR, or "data/cifar-10-batches-bin".
std::filesystem::path default_data_dir();

struct Normalizer {
    std::vector<double> mean;
    std::vector<double> std;

    static Normalizer cifar10();
    /// Per-channel statistics of `data` (population standard deviation).
    static Normalizer from_data(const Dataset& data);
};

/// Normalized float batch (N, C, H, W) for the given record indices.
Tensor make_batch(const Dataset& data, std::span<const std::size_t> indices, const Normalizer& norm);
std::vector<int> batch_labels(const Dataset& data, std::span<const std::size_t> indices);

struct AugmentSpec {
    bool enabled = true;
    int pad = 4;
    bool flip = true;
    double flip_prob = 0.5;
    int cutout = 0;  // side length; 0 disables
};

/// Forces the random decisions of one image (for tests).
struct AugmentDraw {
    int dy = 0;  // crop offset in [0, 2 * pad]
    int dx = 0;
    bool flip = false;
};

/// Pads by `pad` zeros, crops back at the drawn offset, optionally flips.
void augment_image(std::span<double> image, int channels, int height, int width, const AugmentSpec& spec,
                   const AugmentDraw& draw);
/// In-place augmentation of a normalized batch; draws one AugmentDraw and
/// (when enabled) one cutout centre per image, in batch order.
void augment(Tensor& batch, const AugmentSpec& spec, std::mt19937_64& rng);

/// Zeroes the length x length square [cy - length/2, cy + length/2) x
/// [cx - length/2, cx + length/2), clipped to the image. Returns the number
/// of zeroed pixel positions.
int cutout_at(std::span<double> image, int channels, int height, int width, int length, int cy, int cx);
/// Centre uniform over the image.
int cutout(std::span<double> image, int channels, int height, int width, int length, std::mt19937_64& rng);

struct SyntheticSpec {
    int classes = 10;
    int n = 2000;
    int side = 16;
    int channels = 3;
    double noise = 0.35;  // in units of the 0..1 pixel range
    int jitter = 2;       // max blob displacement in pixels
    std::uint64_t seed = 0;
};

/// Class-conditional Gaussian blobs: each class has a fixed set of coloured
/// blobs at fixed positions; samples add jitter and pixel noise. Labels
/// cycle through the classes.
Dataset synthetic_dataset(const SyntheticSpec& spec);
/// Noise-free class template (what a sample looks like with noise = jitter = 0).
std::vector<double> synthetic_template(const SyntheticSpec& spec, int label);

/// Permutation of [0, n) that depends only on (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch);

}  // namespace broadnas
