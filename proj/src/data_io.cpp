// SPDX-License-Identifier: Apache-2.0

#include "broadnas/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <numeric>

#include "broadnas/bytes.hpp"

namespace broadnas {

void Dataset::validate() const {
    if (channels < 1 || height < 1 || width < 1) throw DataError("dataset '" + split + "': non-positive image extent");
    if (labels.empty()) throw DataError("dataset '" + split + "' is empty");
    if (pixels.size() != labels.size() * image_bytes()) {
        throw DataError("dataset '" + split + "': " + std::to_string(pixels.size()) + " pixel bytes for " +
                        std::to_string(labels.size()) + " images of " + std::to_string(image_bytes()) + " bytes");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes) {
            throw DataError("dataset '" + split + "': label " + std::to_string(labels[i]) + " at record " +
                            std::to_string(i) + " outside [0, " + std::to_string(num_classes) + ")");
        }
    }
}

Dataset Dataset::subset(std::span<const std::size_t> indices, std::string split_name) const {
    Dataset out;
    out.channels = channels;
    out.height = height;
    out.width = width;
    out.num_classes = num_classes;
    out.split = std::move(split_name);
    const std::size_t b = image_bytes();
    out.pixels.reserve(indices.size() * b);
    for (std::size_t i : indices) {
        if (i >= size()) throw DataError("dataset '" + split + "': index " + std::to_string(i) + " out of range");
        out.pixels.insert(out.pixels.end(), pixels.begin() + static_cast<std::ptrdiff_t>(i * b),
                          pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * b));
        out.labels.push_back(labels[i]);
    }
    return out;
}

std::pair<Dataset, Dataset> Dataset::split_at(std::size_t n, std::string first, std::string second) const {
    if (n > size()) throw DataError("cannot split " + std::to_string(size()) + " records at " + std::to_string(n));
    std::vector<std::size_t> a(n), b(size() - n);
    std::iota(a.begin(), a.end(), std::size_t{0});
    std::iota(b.begin(), b.end(), n);
    return {subset(a, std::move(first)), subset(b, std::move(second))};
}

Dataset read_cifar10_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(path.string() + ": cannot open CIFAR-10 batch file");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0) {
        const std::size_t records = bytes.size() / kCifarRecordBytes + 1;
        throw DataError(path.string() + ": length " + std::to_string(bytes.size()) +
                        " is not a whole number of " + std::to_string(kCifarRecordBytes) + "-byte records (expected " +
                        std::to_string(records * kCifarRecordBytes) + ")");
    }
    Dataset d;
    d.split = path.filename().string();
    const std::size_t n = bytes.size() / kCifarRecordBytes;
    d.labels.resize(n);
    d.pixels.resize(n * 3072);
    for (std::size_t r = 0; r < n; ++r) {
        const char* rec = bytes.data() + r * kCifarRecordBytes;
        d.labels[r] = static_cast<unsigned char>(rec[0]);
        std::memcpy(d.pixels.data() + r * 3072, rec + 1, 3072);
    }
    try {
        d.validate();
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    return d;
}

void write_cifar10_file(const Dataset& data, const std::filesystem::path& path) {
    data.validate();
    if (data.channels != 3 || data.height != 32 || data.width != 32) {
        throw DataError("CIFAR-10 records hold 3x32x32 images, dataset has " + std::to_string(data.channels) + "x" +
                        std::to_string(data.height) + "x" + std::to_string(data.width));
    }
    if (data.num_classes > 256) throw DataError("CIFAR-10 labels are single bytes");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError(path.string() + ": cannot open for writing");
    for (std::size_t r = 0; r < data.size(); ++r) {
        out.put(static_cast<char>(data.labels[r]));
        out.write(reinterpret_cast<const char*>(data.pixels.data() + r * 3072), 3072);
    }
    if (!out) throw DataError(path.string() + ": write failed");
}

CifarSplits load_cifar10_binary(const std::filesystem::path& dir) {
    auto read_exact = [&](const std::string& name) {
        const auto path = dir / name;
        if (!std::filesystem::exists(path)) throw DataError(path.string() + ": missing CIFAR-10 batch file");
        const auto size = std::filesystem::file_size(path);
        const auto expected = kCifarRecordBytes * kCifarRecordsPerFile;
        if (size != expected) {
            throw DataError(path.string() + ": length " + std::to_string(size) + ", expected " +
                            std::to_string(expected));
        }
        return read_cifar10_file(path);
    };
    CifarSplits out;
    out.train.split = "train";
    for (int i = 1; i <= 5; ++i) {
        Dataset part = read_exact("data_batch_" + std::to_string(i) + ".bin");
        out.train.pixels.insert(out.train.pixels.end(), part.pixels.begin(), part.pixels.end());
        out.train.labels.insert(out.train.labels.end(), part.labels.begin(), part.labels.end());
    }
    out.test = read_exact("test_batch.bin");
    out.test.split = "test";
    return out;
}

std::filesystem::path default_data_dir() {
    if (const char* env = std::getenv("BROADNAS_DATA_DIR"); env != nullptr && *env != '\0') return env;
    return "data/cifar-10-batches-bin";
}

Normalizer Normalizer::cifar10() { return {{0.4914, 0.4822, 0.4465}, {0.2470, 0.2435, 0.2616}}; }

Normalizer Normalizer::from_data(const Dataset& data) {
    data.validate();
    const auto c = static_cast<std::size_t>(data.channels);
    const std::size_t plane = static_cast<std::size_t>(data.height * data.width);
    std::vector<double> sum(c, 0.0), sq(c, 0.0);
    for (std::size_t r = 0; r < data.size(); ++r) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::uint8_t* p = data.pixels.data() + (r * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) sum[ch] += p[i] / 255.0;
        }
    }
    const double count = static_cast<double>(data.size() * plane);
    Normalizer n;
    for (std::size_t ch = 0; ch < c; ++ch) n.mean.push_back(sum[ch] / count);
    for (std::size_t r = 0; r < data.size(); ++r) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::uint8_t* p = data.pixels.data() + (r * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                const double d = p[i] / 255.0 - n.mean[ch];
                sq[ch] += d * d;
            }
        }
    }
    for (std::size_t ch = 0; ch < c; ++ch) n.std.push_back(std::max(std::sqrt(sq[ch] / count), 1e-12));
    return n;
}

Tensor make_batch(const Dataset& data, std::span<const std::size_t> indices, const Normalizer& norm) {
    const auto c = static_cast<std::size_t>(data.channels);
    if (norm.mean.size() != c || norm.std.size() != c) {
        throw DataError("normalizer has " + std::to_string(norm.mean.size()) + " channels, dataset " +
                        std::to_string(c));
    }
    const std::size_t plane = static_cast<std::size_t>(data.height * data.width);
    Tensor out(Shape{indices.size(), c, static_cast<std::size_t>(data.height), static_cast<std::size_t>(data.width)});
    auto od = out.data_mut();
    for (std::size_t b = 0; b < indices.size(); ++b) {
        if (indices[b] >= data.size()) throw DataError("batch index " + std::to_string(indices[b]) + " out of range");
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::uint8_t* src = data.pixels.data() + (indices[b] * c + ch) * plane;
            double* dst = od.data() + (b * c + ch) * plane;
            const double m = norm.mean[ch];
            const double s = norm.std[ch];
            for (std::size_t i = 0; i < plane; ++i) dst[i] = (src[i] / 255.0 - m) / s;
        }
    }
    return out;
}

std::vector<int> batch_labels(const Dataset& data, std::span<const std::size_t> indices) {
    std::vector<int> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(data.labels.at(i));
    return out;
}

void augment_image(std::span<double> image, int channels, int height, int width, const AugmentSpec& spec,
                   const AugmentDraw& draw) {
    const std::size_t plane = static_cast<std::size_t>(height * width);
    std::vector<double> tmp(plane);
    for (int ch = 0; ch < channels; ++ch) {
        double* p = image.data() + static_cast<std::size_t>(ch) * plane;
        std::fill(tmp.begin(), tmp.end(), 0.0);
        for (int y = 0; y < height; ++y) {
            const int sy = y + draw.dy - spec.pad;
            if (sy < 0 || sy >= height) continue;
            for (int x = 0; x < width; ++x) {
                const int sx0 = x + draw.dx - spec.pad;
                if (sx0 < 0 || sx0 >= width) continue;
                const int tx = draw.flip ? width - 1 - x : x;
                tmp[static_cast<std::size_t>(y * width + tx)] = p[sy * width + sx0];
            }
        }
        std::copy(tmp.begin(), tmp.end(), p);
    }
}

void augment(Tensor& batch, const AugmentSpec& spec, std::mt19937_64& rng) {
    if (!spec.enabled) return;
    if (batch.rank() != 4) throw ShapeError("augment", "expected (N,C,H,W), got " + shape_str(batch.shape()));
    const int c = static_cast<int>(batch.dim(1));
    const int h = static_cast<int>(batch.dim(2));
    const int w = static_cast<int>(batch.dim(3));
    const std::size_t per = batch.numel() / batch.dim(0);
    auto data = batch.data_mut();
    std::uniform_int_distribution<int> offset(0, 2 * spec.pad);
    std::bernoulli_distribution coin(spec.flip_prob);
    for (std::size_t b = 0; b < batch.dim(0); ++b) {
        AugmentDraw draw;
        draw.dy = offset(rng);
        draw.dx = offset(rng);
        draw.flip = spec.flip && coin(rng);
        auto image = data.subspan(b * per, per);
        augment_image(image, c, h, w, spec, draw);
        if (spec.cutout > 0) cutout(image, c, h, w, spec.cutout, rng);
    }
}

int cutout_at(std::span<double> image, int channels, int height, int width, int length, int cy, int cx) {
    const int y0 = std::clamp(cy - length / 2, 0, height);
    const int y1 = std::clamp(cy - length / 2 + length, 0, height);
    const int x0 = std::clamp(cx - length / 2, 0, width);
    const int x1 = std::clamp(cx - length / 2 + length, 0, width);
    const std::size_t plane = static_cast<std::size_t>(height * width);
    for (int ch = 0; ch < channels; ++ch) {
        double* p = image.data() + static_cast<std::size_t>(ch) * plane;
        for (int y = y0; y < y1; ++y) {
            for (int x = x0; x < x1; ++x) p[y * width + x] = 0.0;
        }
    }
    return (y1 - y0) * (x1 - x0);
}

int cutout(std::span<double> image, int channels, int height, int width, int length, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> ys(0, height - 1), xs(0, width - 1);
    const int cy = ys(rng);
    const int cx = xs(rng);
    return cutout_at(image, channels, height, width, length, cy, cx);
}

namespace {

struct Blob {
    double y, x, sigma;
    std::vector<double> colour;
};

std::vector<Blob> class_blobs(const SyntheticSpec& spec, int label) {
    std::mt19937_64 rng(substream_seed(spec.seed, "synthetic-class", static_cast<std::uint64_t>(label)));
    std::uniform_real_distribution<double> pos(0.15 * spec.side, 0.85 * spec.side);
    std::uniform_real_distribution<double> sig(spec.side / 10.0, spec.side / 5.0);
    std::uniform_real_distribution<double> col(-0.45, 0.45);
    std::vector<Blob> blobs(3);
    for (auto& b : blobs) {
        b.y = pos(rng);
        b.x = pos(rng);
        b.sigma = sig(rng);
        for (int c = 0; c < spec.channels; ++c) b.colour.push_back(col(rng));
    }
    return blobs;
}

void render(const SyntheticSpec& spec, const std::vector<Blob>& blobs, double dy, double dx, std::span<double> out) {
    const int s = spec.side;
    for (int c = 0; c < spec.channels; ++c) {
        for (int y = 0; y < s; ++y) {
            for (int x = 0; x < s; ++x) {
                double v = 0.5;
                for (const auto& b : blobs) {
                    const double ry = y - (b.y + dy);
                    const double rx = x - (b.x + dx);
                    v += b.colour[static_cast<std::size_t>(c)] * std::exp(-(ry * ry + rx * rx) / (2.0 * b.sigma * b.sigma));
                }
                out[static_cast<std::size_t>((c * s + y) * s + x)] = v;
            }
        }
    }
}

std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

std::vector<double> synthetic_template(const SyntheticSpec& spec, int label) {
    std::vector<double> img(static_cast<std::size_t>(spec.channels * spec.side * spec.side));
    render(spec, class_blobs(spec, label), 0.0, 0.0, img);
    for (double& v : img) v = quantize(v) / 255.0;
    return img;
}

Dataset synthetic_dataset(const SyntheticSpec& spec) {
    if (spec.classes < 2) throw DataError("synthetic dataset needs at least 2 classes");
    if (spec.n < 1 || spec.side < 1 || spec.channels < 1) throw DataError("synthetic dataset: non-positive size");
    Dataset d;
    d.channels = spec.channels;
    d.height = spec.side;
    d.width = spec.side;
    d.num_classes = spec.classes;
    d.split = "synthetic";
    std::vector<std::vector<Blob>> blobs;
    for (int c = 0; c < spec.classes; ++c) blobs.push_back(class_blobs(spec, c));
    std::mt19937_64 rng(substream_seed(spec.seed, "synthetic-samples"));
    std::uniform_int_distribution<int> jit(-spec.jitter, spec.jitter);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::vector<double> img(d.image_bytes());
    d.pixels.reserve(static_cast<std::size_t>(spec.n) * d.image_bytes());
    for (int i = 0; i < spec.n; ++i) {
        const int label = i % spec.classes;
        const int dy = jit(rng);
        const int dx = jit(rng);
        render(spec, blobs[static_cast<std::size_t>(label)], dy, dx, img);
        for (double v : img) d.pixels.push_back(quantize(v + spec.noise * noise(rng)));
        d.labels.push_back(label);
    }
    return d;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(substream_seed(seed, "epoch-order", epoch));
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(order[i - 1], order[j]);
    }
    return order;
}

}  // namespace broadnas
