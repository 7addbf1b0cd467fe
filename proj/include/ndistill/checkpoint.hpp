#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ndistill/network.hpp"
#include "ndistill/optim.hpp"

namespace nd {

struct CheckpointMagicError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CheckpointVersionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_u32le(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_u64le(std::ostream& os, std::uint64_t v) {
    write_u32le(os, static_cast<std::uint32_t>(v));
    write_u32le(os, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint64_t read_u64le(std::istream& is) {
    std::uint64_t lo = read_u32le(is);
    std::uint64_t hi = read_u32le(is);
    return lo | (hi << 32);
}

// f32 payloads are raw little-endian; this code targets little-endian hosts.
static_assert(sizeof(float) == 4, "expected 32-bit float");

inline void write_f32_block(std::ostream& os, const std::vector<float>& v) {
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 4));
}

inline void read_f32_block(std::istream& is, std::vector<float>& v) {
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * 4));
    if (!is) throw std::runtime_error("checkpoint: truncated payload");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// NetworkSpec <-> JSON
// ---------------------------------------------------------------------------

inline nlohmann::json layer_to_json(const LayerSpec& l) {
    nlohmann::json j;
    switch (l.kind) {
        case LayerKind::Conv:
            j = {{"kind", "conv"}, {"in", l.in_ch}, {"out", l.out_ch}, {"kernel", l.kernel},
                 {"stride", l.stride}, {"pad", l.pad == Padding::Same ? "same" : "valid"}};
            break;
        case LayerKind::Dense:
            j = {{"kind", "dense"}, {"in", l.in_ch}, {"out", l.out_ch}};
            break;
        case LayerKind::Relu:
            j = {{"kind", "relu"}};
            break;
        case LayerKind::Norm:
            j = {{"kind", "norm"}, {"channels", l.in_ch}};
            break;
        case LayerKind::GlobalAvgPool:
            j = {{"kind", "global_avg_pool"}};
            break;
        case LayerKind::Flatten:
            j = {{"kind", "flatten"}};
            break;
        case LayerKind::AddSkipBegin:
            j = {{"kind", "skip_begin"}};
            break;
        case LayerKind::AddSkipEnd:
            j = {{"kind", "skip_end"}};
            if (l.proj)
                j["proj"] = {{"in", l.proj->in_ch}, {"out", l.proj->out_ch}, {"stride", l.proj->stride}};
            break;
    }
    return j;
}

inline LayerSpec layer_from_json(const nlohmann::json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "conv")
        return LayerSpec::conv(j.at("in"), j.at("out"), j.at("kernel"), j.at("stride"),
                               j.at("pad") == "same" ? Padding::Same : Padding::Valid);
    if (kind == "dense") return LayerSpec::dense(j.at("in"), j.at("out"));
    if (kind == "relu") return LayerSpec::relu();
    if (kind == "norm") return LayerSpec::norm(j.at("channels"));
    if (kind == "global_avg_pool") return LayerSpec::global_avg_pool();
    if (kind == "flatten") return LayerSpec::flatten_layer();
    if (kind == "skip_begin") return LayerSpec::skip_begin();
    if (kind == "skip_end") {
        std::optional<ProjectionSpec> proj;
        if (j.contains("proj"))
            proj = ProjectionSpec{j["proj"].at("in"), j["proj"].at("out"), j["proj"].at("stride")};
        return LayerSpec::skip_end(proj);
    }
    throw std::runtime_error("unknown layer kind '" + kind + "'");
}

inline nlohmann::json network_to_json(const NetworkSpec& net) {
    nlohmann::json j;
    j["input_shape"] = net.input_shape;
    j["class_count"] = net.class_count;
    for (const auto& l : net.stem) j["stem"].push_back(layer_to_json(l));
    j["neighbourhoods"] = nlohmann::json::array();
    for (const auto& nb : net.neighbourhoods) {
        nlohmann::json n;
        n["index"] = nb.index;
        n["input_shape"] = nb.input_shape;
        n["output_shape"] = nb.output_shape;
        for (const auto& l : nb.layers) n["layers"].push_back(layer_to_json(l));
        j["neighbourhoods"].push_back(n);
    }
    for (const auto& l : net.head) j["head"].push_back(layer_to_json(l));
    return j;
}

inline NetworkSpec network_from_json(const nlohmann::json& j) {
    NetworkSpec net;
    net.input_shape = j.at("input_shape").get<std::vector<int>>();
    net.class_count = j.at("class_count").get<int>();
    for (const auto& l : j.at("stem")) net.stem.push_back(layer_from_json(l));
    for (const auto& n : j.at("neighbourhoods")) {
        NeighbourhoodSpec nb;
        nb.index = n.at("index").get<int>();
        nb.input_shape = n.at("input_shape").get<std::vector<int>>();
        nb.output_shape = n.at("output_shape").get<std::vector<int>>();
        for (const auto& l : n.at("layers")) nb.layers.push_back(layer_from_json(l));
        net.neighbourhoods.push_back(std::move(nb));
    }
    for (const auto& l : j.at("head")) net.head.push_back(layer_from_json(l));
    validate_network(net);
    return net;
}

// ---------------------------------------------------------------------------
// Checkpoint file: "NDCK" | version u32 LE | header length u32 LE |
// JSON header (network spec + parameter manifest with byte offsets) |
// raw f32 LE blobs in manifest order. Values and running stats persist;
// gradients and momentum do not.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const NetworkSpec& net, const ParamStore& params, const std::string& path) {
    nlohmann::json header;
    header["network"] = network_to_json(net);
    header["manifest"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& [name, p] = params.item(i);
        header["manifest"].push_back({{"name", name},
                                      {"shape", p.value.shape},
                                      {"trainable", p.trainable},
                                      {"offset", offset}});
        offset += p.value.numel() * 4;
    }
    std::string text = header.dump();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
    os.write("NDCK", 4);
    detail::write_u32le(os, kCheckpointVersion);
    detail::write_u32le(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (std::size_t i = 0; i < params.size(); ++i)
        detail::write_f32_block(os, params.item(i).second.value.data);
    if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

namespace detail {
inline nlohmann::json read_checkpoint_header(std::ifstream& is, const std::string& path) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "NDCK", 4) != 0)
        throw CheckpointMagicError("load_checkpoint: bad magic in " + path);
    std::uint32_t version = detail::read_u32le(is);
    if (version != kCheckpointVersion)
        throw CheckpointVersionError("load_checkpoint: unsupported version " + std::to_string(version));
    std::uint32_t header_len = detail::read_u32le(is);
    std::string text(header_len, '\0');
    is.read(text.data(), header_len);
    if (!is) throw std::runtime_error("load_checkpoint: truncated header in " + path);
    return nlohmann::json::parse(text);
}

inline ParamStore read_manifest_blobs(std::ifstream& is, const nlohmann::json& header) {
    ParamStore params;
    for (const auto& entry : header.at("manifest")) {
        Tensor t(entry.at("shape").get<std::vector<int>>());
        detail::read_f32_block(is, t.data);
        params.create(entry.at("name").get<std::string>(), std::move(t), entry.at("trainable").get<bool>());
    }
    if (!is) throw std::runtime_error("load_checkpoint: truncated payload");
    return params;
}
}  // namespace detail

inline std::pair<NetworkSpec, ParamStore> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
    nlohmann::json header = detail::read_checkpoint_header(is, path);
    if (!header.contains("network"))
        throw std::runtime_error("load_checkpoint: " + path + " does not hold a full network");
    NetworkSpec net = network_from_json(header.at("network"));
    ParamStore params = detail::read_manifest_blobs(is, header);
    return {std::move(net), std::move(params)};
}

// ---------------------------------------------------------------------------
// Candidate checkpoints: one trained neighbourhood variant in the same
// container, distinguished by the header payload.
// ---------------------------------------------------------------------------

inline nlohmann::json candidate_to_json(const CandidateSpec& c) {
    nlohmann::json j;
    j["nb_index"] = c.nb_index;
    j["k"] = c.k;
    j["target_sparsity"] = c.target_sparsity;
    j["inner_widths"] = c.inner_widths;
    j["layers"] = nlohmann::json::array();
    for (const auto& l : c.layers) j["layers"].push_back(layer_to_json(l));
    return j;
}

inline CandidateSpec candidate_from_json(const nlohmann::json& j) {
    CandidateSpec c;
    c.nb_index = j.at("nb_index").get<int>();
    c.k = j.at("k").get<double>();
    c.target_sparsity = j.at("target_sparsity").get<double>();
    c.inner_widths = j.at("inner_widths").get<std::vector<int>>();
    for (const auto& l : j.at("layers")) c.layers.push_back(layer_from_json(l));
    return c;
}

inline void save_candidate_checkpoint(const CandidateSpec& cand, const ParamStore& params,
                                      const std::string& path) {
    nlohmann::json header;
    header["candidate"] = candidate_to_json(cand);
    header["manifest"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& [name, p] = params.item(i);
        header["manifest"].push_back({{"name", name},
                                      {"shape", p.value.shape},
                                      {"trainable", p.trainable},
                                      {"offset", offset}});
        offset += p.value.numel() * 4;
    }
    std::string text = header.dump();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("save_candidate_checkpoint: cannot open " + path);
    os.write("NDCK", 4);
    detail::write_u32le(os, kCheckpointVersion);
    detail::write_u32le(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (std::size_t i = 0; i < params.size(); ++i)
        detail::write_f32_block(os, params.item(i).second.value.data);
    if (!os) throw std::runtime_error("save_candidate_checkpoint: write failed for " + path);
}

inline std::pair<CandidateSpec, ParamStore> load_candidate_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_candidate_checkpoint: cannot open " + path);
    nlohmann::json header = detail::read_checkpoint_header(is, path);
    if (!header.contains("candidate"))
        throw std::runtime_error("load_candidate_checkpoint: " + path + " does not hold a candidate");
    CandidateSpec cand = candidate_from_json(header.at("candidate"));
    ParamStore params = detail::read_manifest_blobs(is, header);
    return {std::move(cand), std::move(params)};
}

}  // namespace nd
