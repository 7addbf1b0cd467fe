#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ndistill/checkpoint.hpp"
#include "ndistill/data.hpp"
#include "ndistill/network.hpp"
#include "ndistill/tensor.hpp"

namespace nd {

struct CacheMagicError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CacheVersionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CacheFingerprintError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCacheVersion = 1;
inline constexpr char kCacheMagic[4] = {'N', 'D', 'A', 'C'};

/// Activation cache layout: magic "NDAC", u32 version, u8 dtype (0 = f32),
/// u8 rank, u32 dims (sample count first), u64 dataset fingerprint, then the
/// raw little-endian f32 payload.
inline void save_activation_cache(const std::string& path, const Tensor& acts, std::uint64_t fingerprint) {
    if (acts.rank() < 1 || acts.rank() > 255) throw std::invalid_argument("save_activation_cache: bad rank");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_activation_cache: cannot open " + path);
    os.write(kCacheMagic, 4);
    detail::write_u32le(os, kCacheVersion);
    char dtype = 0;
    os.put(dtype);
    os.put(static_cast<char>(acts.rank()));
    for (int d : acts.shape) detail::write_u32le(os, static_cast<std::uint32_t>(d));
    detail::write_u64le(os, fingerprint);
    detail::write_f32_block(os, acts.data);
    if (!os) throw std::runtime_error("save_activation_cache: write failed on " + path);
}

struct LoadedCache {
    Tensor acts;
    std::uint64_t fingerprint = 0;
};

/// Loads a cache file. When `expected_fingerprint` is nonzero it must match
/// the stored one exactly; magic, version and fingerprint failures raise
/// distinct exception types.
inline LoadedCache load_activation_cache(const std::string& path, std::uint64_t expected_fingerprint = 0) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_activation_cache: cannot open " + path);
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != std::string(kCacheMagic, 4))
        throw CacheMagicError("activation cache " + path + ": bad magic");
    std::uint32_t version = detail::read_u32le(is);
    if (version != kCacheVersion)
        throw CacheVersionError("activation cache " + path + ": unsupported version " + std::to_string(version));
    int dtype = is.get();
    if (dtype != 0) throw std::runtime_error("activation cache " + path + ": unsupported dtype");
    int rank = is.get();
    if (rank < 1) throw std::runtime_error("activation cache " + path + ": bad rank");
    std::vector<int> shape(static_cast<std::size_t>(rank));
    for (int i = 0; i < rank; ++i) shape[static_cast<std::size_t>(i)] = static_cast<int>(detail::read_u32le(is));
    LoadedCache out;
    out.fingerprint = detail::read_u64le(is);
    if (expected_fingerprint != 0 && out.fingerprint != expected_fingerprint)
        throw CacheFingerprintError("activation cache " + path + ": dataset fingerprint mismatch");
    out.acts = Tensor(shape);
    detail::read_f32_block(is, out.acts.data);
    if (!is) throw std::runtime_error("load_activation_cache: truncated payload in " + path);
    return out;
}

/// One eval pass through the whole network collecting the activations at
/// every neighbourhood boundary. Index 0 is the stem output; index n (the
/// neighbourhood count) is the head input.
inline std::vector<Tensor> boundary_activations(const NetworkSpec& net, const ParamStore& params,
                                                const Tensor& images, int batch_size = 64) {
    const int n = images.shape[0];
    const int nbs = static_cast<int>(net.neighbourhoods.size());
    std::vector<Tensor> out;
    for (int start = 0; start < n; start += batch_size) {
        const int count = std::min(batch_size, n - start);
        std::vector<int> idx(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i) idx[static_cast<std::size_t>(i)] = start + i;
        Tensor x({count, images.shape[1], images.shape[2], images.shape[3]});
        const std::size_t plane = images.numel() / static_cast<std::size_t>(n);
        for (int i = 0; i < count; ++i)
            std::copy(&images.data[static_cast<std::size_t>(start + i) * plane],
                      &images.data[static_cast<std::size_t>(start + i) * plane] + plane,
                      &x.data[static_cast<std::size_t>(i) * plane]);
        Tensor cur = run_layers(net.stem, "stem", params, x, NormMode::Eval);
        for (int b = 0; b <= nbs; ++b) {
            if (start == 0) {
                std::vector<int> full_shape = cur.shape;
                full_shape[0] = n;
                out.emplace_back(full_shape);
            }
            const std::size_t row = cur.numel() / static_cast<std::size_t>(count);
            std::copy(cur.data.begin(), cur.data.end(), &out[static_cast<std::size_t>(b)].data[row * start]);
            if (b < nbs)
                cur = run_layers(net.neighbourhoods[static_cast<std::size_t>(b)].layers, nb_scope(b), params,
                                 cur, NormMode::Eval);
        }
    }
    return out;
}

/// Writes one cache file per boundary under `dir`; returns the paths in
/// boundary order.
inline std::vector<std::string> cache_all_boundaries(const NetworkSpec& net, const ParamStore& params,
                                                     const Dataset& ds, const std::string& dir,
                                                     int batch_size = 64) {
    std::filesystem::create_directories(dir);
    const std::uint64_t fp = dataset_fingerprint(ds);
    std::vector<Tensor> acts = boundary_activations(net, params, ds.images, batch_size);
    std::vector<std::string> paths;
    for (std::size_t b = 0; b < acts.size(); ++b) {
        std::string p = dir + "/boundary_" + std::to_string(b) + ".ndac";
        save_activation_cache(p, acts[b], fp);
        paths.push_back(std::move(p));
    }
    return paths;
}

inline std::string boundary_cache_path(const std::string& dir, int boundary) {
    return dir + "/boundary_" + std::to_string(boundary) + ".ndac";
}

}  // namespace nd
