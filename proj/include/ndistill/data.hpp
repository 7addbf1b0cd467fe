#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "ndistill/rng.hpp"
#include "ndistill/tensor.hpp"

namespace nd {

struct Dataset {
    Tensor images;  // [N,C,H,W]
    std::vector<int> labels;
    int class_count = 0;
    std::string split;

    int size() const { return images.shape.empty() ? 0 : images.shape[0]; }
};

inline void validate_dataset(const Dataset& ds) {
    if (ds.size() <= 0) throw std::invalid_argument("dataset: empty");
    if (ds.labels.size() != static_cast<std::size_t>(ds.size()))
        throw std::invalid_argument("dataset: label count mismatch");
    for (int l : ds.labels)
        if (l < 0 || l >= ds.class_count) throw std::invalid_argument("dataset: label out of range");
}

/// 64-bit FNV-1a over dims, raw image floats and labels; identifies the
/// dataset an activation cache was built from.
inline std::uint64_t dataset_fingerprint(const Dataset& ds) {
    std::uint64_t h = 14695981039346656037ULL;
    auto mix_bytes = [&](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ULL;
        }
    };
    for (int d : ds.images.shape) {
        std::uint32_t v = static_cast<std::uint32_t>(d);
        mix_bytes(&v, 4);
    }
    mix_bytes(ds.images.data.data(), ds.images.data.size() * 4);
    for (int l : ds.labels) {
        std::uint32_t v = static_cast<std::uint32_t>(l);
        mix_bytes(&v, 4);
    }
    return h;
}

// ---------------------------------------------------------------------------
// Synthetic oriented-grating classification task. Class c fixes the grating
// orientation and frequency; pixel noise is the only within-class variation,
// so a closed-form nearest-template classifier exists.
// ---------------------------------------------------------------------------

/// Noise-free class template, [C,H,W] with C = 3.
inline Tensor synth_template(int cls, int classes, int height, int width) {
    const double theta = M_PI * cls / classes;
    const double freq = 2.0 + 0.75 * (cls % 3);
    const double ct = std::cos(theta), st = std::sin(theta);
    Tensor t({3, height, width});
    for (int ch = 0; ch < 3; ++ch) {
        const double phase = 0.9 * ch;
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
                double u = static_cast<double>(x) / width, v = static_cast<double>(y) / height;
                t.data[(static_cast<std::size_t>(ch) * height + y) * width + x] =
                    static_cast<float>(std::sin(2.0 * M_PI * freq * (u * ct + v * st) + phase));
            }
    }
    return t;
}

/// Deterministic synthetic dataset: per class, the grating template plus
/// i.i.d. Gaussian pixel noise of the given level.
inline Dataset gen_synthetic(int n_per_class, int classes, int height, int width, double noise_level,
                             std::uint64_t seed, const std::string& split = "train") {
    if (n_per_class <= 0 || classes <= 0) throw std::invalid_argument("gen_synthetic: sizes must be positive");
    if (noise_level < 0) throw std::invalid_argument("gen_synthetic: negative noise level");
    Dataset ds;
    ds.class_count = classes;
    ds.split = split;
    const int n = n_per_class * classes;
    ds.images = Tensor({n, 3, height, width});
    ds.labels.resize(n);
    Rng base = Rng(seed).split("synthetic." + split);
    const std::size_t plane = static_cast<std::size_t>(3) * height * width;
    for (int c = 0; c < classes; ++c) {
        Tensor tpl = synth_template(c, classes, height, width);
        for (int s = 0; s < n_per_class; ++s) {
            const int idx = c * n_per_class + s;
            ds.labels[idx] = c;
            float* dst = &ds.images.data[static_cast<std::size_t>(idx) * plane];
            if (noise_level == 0.0) {
                std::copy(tpl.data.begin(), tpl.data.end(), dst);
            } else {
                Rng r = base.split("sample", static_cast<std::uint64_t>(idx));
                Tensor noise = gaussian_sample(r, {3, height, width}, 0.0, noise_level);
                for (std::size_t i = 0; i < plane; ++i) dst[i] = tpl.data[i] + noise.data[i];
            }
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary ingestion: 3073-byte records, 1 label byte + 3072 RGB
// bytes (three 1024-byte planes of a 32x32 image). Pixels pass through as
// raw 0..255 values; standardization is a separate step.
// ---------------------------------------------------------------------------

inline Dataset load_cifar10_binary(const std::string& dir) {
    namespace fs = std::filesystem;
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".bin") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::runtime_error("load_cifar10_binary: no .bin files in " + dir);

    constexpr std::size_t kRecord = 3073;
    std::vector<unsigned char> raw;
    for (const auto& f : files) {
        std::ifstream is(f, std::ios::binary | std::ios::ate);
        if (!is) throw std::runtime_error("load_cifar10_binary: cannot open " + f);
        std::streamsize sz = is.tellg();
        if (sz <= 0 || static_cast<std::size_t>(sz) % kRecord != 0)
            throw std::runtime_error("load_cifar10_binary: " + f + " size " + std::to_string(sz) +
                                     " is not a multiple of 3073");
        is.seekg(0);
        std::size_t off = raw.size();
        raw.resize(off + static_cast<std::size_t>(sz));
        is.read(reinterpret_cast<char*>(raw.data() + off), sz);
        if (!is) throw std::runtime_error("load_cifar10_binary: short read on " + f);
    }

    const int n = static_cast<int>(raw.size() / kRecord);
    Dataset ds;
    ds.class_count = 10;
    ds.split = "cifar10";
    ds.images = Tensor({n, 3, 32, 32});
    ds.labels.resize(n);
    for (int i = 0; i < n; ++i) {
        const unsigned char* rec = raw.data() + static_cast<std::size_t>(i) * kRecord;
        if (rec[0] >= 10)
            throw std::runtime_error("load_cifar10_binary: label " + std::to_string(rec[0]) +
                                     " out of range in record " + std::to_string(i));
        ds.labels[i] = rec[0];
        float* dst = &ds.images.data[static_cast<std::size_t>(i) * 3072];
        for (std::size_t j = 0; j < 3072; ++j) dst[j] = static_cast<float>(rec[1 + j]);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

struct ChannelStats {
    std::vector<double> mean;
    std::vector<double> std;
};

/// Per-channel standardization. Without `stats`, statistics are computed on
/// the given (training) split and returned for reuse on other splits.
inline std::pair<Dataset, ChannelStats> standardize(const Dataset& ds, const ChannelStats* stats = nullptr) {
    validate_dataset(ds);
    const int n = ds.images.shape[0], c = ds.images.shape[1];
    const std::size_t plane = ds.images.numel() / (static_cast<std::size_t>(n) * c);
    ChannelStats out;
    if (stats) {
        out = *stats;
    } else {
        out.mean.assign(c, 0.0);
        out.std.assign(c, 0.0);
        const double cnt = static_cast<double>(n) * plane;
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch) {
                const float* p = &ds.images.data[(static_cast<std::size_t>(i) * c + ch) * plane];
                for (std::size_t j = 0; j < plane; ++j) out.mean[ch] += p[j];
            }
        for (int ch = 0; ch < c; ++ch) out.mean[ch] /= cnt;
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch) {
                const float* p = &ds.images.data[(static_cast<std::size_t>(i) * c + ch) * plane];
                for (std::size_t j = 0; j < plane; ++j) {
                    double d = p[j] - out.mean[ch];
                    out.std[ch] += d * d;
                }
            }
        for (int ch = 0; ch < c; ++ch) out.std[ch] = std::sqrt(out.std[ch] / cnt);
    }
    for (int ch = 0; ch < c; ++ch)
        if (!(out.std[ch] > 0))
            throw std::runtime_error("standardize: channel " + std::to_string(ch) + " has zero std");

    Dataset r = ds;
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
            float* p = &r.images.data[(static_cast<std::size_t>(i) * c + ch) * plane];
            const float m = static_cast<float>(out.mean[ch]), inv = static_cast<float>(1.0 / out.std[ch]);
            for (std::size_t j = 0; j < plane; ++j) p[j] = (p[j] - m) * inv;
        }
    return {std::move(r), std::move(out)};
}

// ---------------------------------------------------------------------------
// Augmentation and batching
// ---------------------------------------------------------------------------

/// Random translation by up to max_shift pixels in each axis, zero padded.
inline Tensor augment_translate(const Tensor& image, int max_shift, Rng& rng) {
    if (image.rank() != 3) throw std::invalid_argument("augment_translate: expected [C,H,W] image");
    const int dx = rng.uniform_int(-max_shift, max_shift);
    const int dy = rng.uniform_int(-max_shift, max_shift);
    const int c = image.shape[0], h = image.shape[1], w = image.shape[2];
    Tensor out(image.shape);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y) {
            int sy = y - dy;
            if (sy < 0 || sy >= h) continue;
            for (int x = 0; x < w; ++x) {
                int sx = x - dx;
                if (sx < 0 || sx >= w) continue;
                out.data[(static_cast<std::size_t>(ch) * h + y) * w + x] =
                    image.data[(static_cast<std::size_t>(ch) * h + sy) * w + sx];
            }
        }
    return out;
}

/// Independent random translation for each sample of a [N,C,H,W] batch.
inline void augment_batch(Tensor& images, int max_shift, Rng& rng) {
    if (images.rank() != 4) throw std::invalid_argument("augment_batch: expected [N,C,H,W]");
    if (max_shift <= 0) return;
    const int n = images.shape[0];
    const std::size_t plane = images.numel() / static_cast<std::size_t>(n);
    Tensor one({images.shape[1], images.shape[2], images.shape[3]});
    for (int i = 0; i < n; ++i) {
        float* p = &images.data[static_cast<std::size_t>(i) * plane];
        std::copy(p, p + plane, one.data.begin());
        Tensor shifted = augment_translate(one, max_shift, rng);
        std::copy(shifted.data.begin(), shifted.data.end(), p);
    }
}

struct Batch {
    Tensor images;
    std::vector<int> labels;
    std::vector<int> indices;
};

inline Batch gather(const Dataset& ds, const std::vector<int>& indices) {
    const int c = ds.images.shape[1], h = ds.images.shape[2], w = ds.images.shape[3];
    const std::size_t plane = static_cast<std::size_t>(c) * h * w;
    Batch b;
    b.images = Tensor({static_cast<int>(indices.size()), c, h, w});
    b.labels.reserve(indices.size());
    b.indices = indices;
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const float* src = &ds.images.data[static_cast<std::size_t>(indices[i]) * plane];
        std::copy(src, src + plane, &b.images.data[i * plane]);
        b.labels.push_back(ds.labels[indices[i]]);
    }
    return b;
}

/// Seeded epoch iterator: every sample appears exactly once per epoch (final
/// partial batch included); the order is a pure function of the seed and
/// epoch number.
class Batcher {
public:
    Batcher(const Dataset& ds, int batch_size, std::uint64_t shuffle_seed)
        : ds_(&ds), batch_size_(batch_size), base_(Rng(shuffle_seed).split("batcher")) {
        if (batch_size <= 0) throw std::invalid_argument("batches: batch_size must be positive");
        start_epoch();
    }

    Batch next() {
        if (cursor_ >= order_.size()) {
            ++epoch_;
            start_epoch();
        }
        std::size_t end = std::min(order_.size(), cursor_ + static_cast<std::size_t>(batch_size_));
        std::vector<int> idx(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                             order_.begin() + static_cast<std::ptrdiff_t>(end));
        cursor_ = end;
        return gather(*ds_, idx);
    }

    bool epoch_done() const { return cursor_ >= order_.size(); }
    int epoch() const { return epoch_; }

private:
    void start_epoch() {
        order_.resize(static_cast<std::size_t>(ds_->size()));
        std::iota(order_.begin(), order_.end(), 0);
        Rng r = base_.split("epoch", static_cast<std::uint64_t>(epoch_));
        shuffle(order_, r);
        cursor_ = 0;
    }

    const Dataset* ds_;
    int batch_size_;
    Rng base_;
    std::vector<int> order_;
    std::size_t cursor_ = 0;
    int epoch_ = 0;
};

/// Rows of a [N,...] tensor in the given order.
inline Tensor gather_rows(const Tensor& t, const std::vector<int>& indices) {
    if (t.rank() < 1) throw std::invalid_argument("gather_rows: rank must be >= 1");
    const int n = t.shape[0];
    const std::size_t row = t.numel() / static_cast<std::size_t>(n);
    std::vector<int> shape = t.shape;
    shape[0] = static_cast<int>(indices.size());
    Tensor out(shape);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] < 0 || indices[i] >= n) throw std::invalid_argument("gather_rows: index out of range");
        std::copy(&t.data[static_cast<std::size_t>(indices[i]) * row],
                  &t.data[static_cast<std::size_t>(indices[i]) * row] + row, &out.data[i * row]);
    }
    return out;
}

/// Seeded index stream over [0,n): per-epoch permutations, batches always
/// filled (an epoch boundary may fall inside a batch).
class IndexCycler {
public:
    IndexCycler(int n, std::uint64_t seed) : n_(n), base_(Rng(seed).split("cycler")) {
        if (n <= 0) throw std::invalid_argument("IndexCycler: n must be positive");
        refill();
    }

    std::vector<int> next(int count) {
        std::vector<int> out;
        out.reserve(static_cast<std::size_t>(count));
        while (static_cast<int>(out.size()) < count) {
            if (cursor_ >= order_.size()) {
                ++epoch_;
                refill();
            }
            out.push_back(order_[cursor_++]);
        }
        return out;
    }

private:
    void refill() {
        order_.resize(static_cast<std::size_t>(n_));
        std::iota(order_.begin(), order_.end(), 0);
        Rng r = base_.split("epoch", static_cast<std::uint64_t>(epoch_));
        shuffle(order_, r);
        cursor_ = 0;
    }

    int n_;
    Rng base_;
    std::vector<int> order_;
    std::size_t cursor_ = 0;
    int epoch_ = 0;
};

/// Contiguous subset [start, start+count).
inline Dataset subset(const Dataset& ds, int start, int count, const std::string& split_tag) {
    if (start < 0 || count <= 0 || start + count > ds.size())
        throw std::invalid_argument("subset: range out of bounds");
    std::vector<int> idx(static_cast<std::size_t>(count));
    std::iota(idx.begin(), idx.end(), start);
    Batch b = gather(ds, idx);
    Dataset out;
    out.images = std::move(b.images);
    out.labels = std::move(b.labels);
    out.class_count = ds.class_count;
    out.split = split_tag;
    return out;
}

}  // namespace nd
