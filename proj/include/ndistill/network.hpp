#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ndistill/losses.hpp"
#include "ndistill/ops.hpp"
#include "ndistill/optim.hpp"
#include "ndistill/rng.hpp"
#include "ndistill/tensor.hpp"

namespace nd {

// ---------------------------------------------------------------------------
// Architecture description
// ---------------------------------------------------------------------------

enum class LayerKind { Conv, Dense, Relu, Norm, GlobalAvgPool, AddSkipBegin, AddSkipEnd, Flatten };

/// 1x1 conv + norm on the skip path of a downsampling block.
struct ProjectionSpec {
    int in_ch = 0, out_ch = 0, stride = 1;
    bool operator==(const ProjectionSpec&) const = default;
};

struct LayerSpec {
    LayerKind kind = LayerKind::Relu;
    int in_ch = 0, out_ch = 0;  // conv/dense dims; norm uses in_ch as channel count
    int kernel = 0, stride = 1;
    Padding pad = Padding::Same;
    std::optional<ProjectionSpec> proj;  // AddSkipEnd only

    bool operator==(const LayerSpec&) const = default;

    static LayerSpec conv(int in, int out, int k, int stride, Padding pad) {
        LayerSpec l;
        l.kind = LayerKind::Conv;
        l.in_ch = in;
        l.out_ch = out;
        l.kernel = k;
        l.stride = stride;
        l.pad = pad;
        return l;
    }
    static LayerSpec dense(int in, int out) {
        LayerSpec l;
        l.kind = LayerKind::Dense;
        l.in_ch = in;
        l.out_ch = out;
        return l;
    }
    static LayerSpec relu() { return LayerSpec{}; }
    static LayerSpec norm(int channels) {
        LayerSpec l;
        l.kind = LayerKind::Norm;
        l.in_ch = channels;
        return l;
    }
    static LayerSpec global_avg_pool() {
        LayerSpec l;
        l.kind = LayerKind::GlobalAvgPool;
        return l;
    }
    static LayerSpec skip_begin() {
        LayerSpec l;
        l.kind = LayerKind::AddSkipBegin;
        return l;
    }
    static LayerSpec skip_end(std::optional<ProjectionSpec> proj = std::nullopt) {
        LayerSpec l;
        l.kind = LayerKind::AddSkipEnd;
        l.proj = proj;
        return l;
    }
    static LayerSpec flatten_layer() {
        LayerSpec l;
        l.kind = LayerKind::Flatten;
        return l;
    }
};

/// Contiguous sub-network delimited at explicit boundaries; the unit of
/// independent distillation. Shapes are batch-free [C,H,W].
struct NeighbourhoodSpec {
    int index = 0;
    std::vector<LayerSpec> layers;
    std::vector<int> input_shape;
    std::vector<int> output_shape;
};

struct NetworkSpec {
    std::vector<int> input_shape;  // [C,H,W]
    std::vector<LayerSpec> stem;
    std::vector<NeighbourhoodSpec> neighbourhoods;
    std::vector<LayerSpec> head;
    int class_count = 0;
};

/// Student variant of one neighbourhood: multiplier k scales interior
/// widths, boundary shapes stay the teacher's.
struct CandidateSpec {
    int nb_index = 0;
    double k = 1.0;
    double target_sparsity = 0.0;
    std::vector<LayerSpec> layers;
    std::vector<int> inner_widths;
};

// ---------------------------------------------------------------------------
// Shape inference
// ---------------------------------------------------------------------------

inline std::vector<int> infer_shapes(const std::vector<LayerSpec>& layers, std::vector<int> shape) {
    std::vector<std::vector<int>> skip_stack;
    for (std::size_t li = 0; li < layers.size(); ++li) {
        const LayerSpec& l = layers[li];
        auto fail = [&](const std::string& msg) {
            throw std::invalid_argument("layer " + std::to_string(li) + ": " + msg);
        };
        switch (l.kind) {
            case LayerKind::Conv: {
                if (shape.size() != 3) fail("conv needs [C,H,W] input");
                if (shape[0] != l.in_ch) fail("conv in_ch " + std::to_string(l.in_ch) + " vs C " + std::to_string(shape[0]));
                if (l.out_ch <= 0 || l.kernel <= 0) fail("conv dims must be positive");
                ConvDims d = conv_out_dims(shape[1], shape[2], l.kernel, l.kernel, l.stride, l.pad);
                shape = {l.out_ch, d.out_h, d.out_w};
                break;
            }
            case LayerKind::Dense:
                if (shape.size() != 1) fail("dense needs flat input");
                if (shape[0] != l.in_ch) fail("dense in dim mismatch");
                if (l.out_ch <= 0) fail("dense out dim must be positive");
                shape = {l.out_ch};
                break;
            case LayerKind::Relu:
                break;
            case LayerKind::Norm:
                if (shape.size() != 3) fail("norm needs [C,H,W] input");
                if (shape[0] != l.in_ch) fail("norm channel mismatch");
                break;
            case LayerKind::GlobalAvgPool:
                if (shape.size() != 3) fail("global_avg_pool needs [C,H,W] input");
                shape = {shape[0]};
                break;
            case LayerKind::Flatten: {
                int n = 1;
                for (int d : shape) n *= d;
                shape = {n};
                break;
            }
            case LayerKind::AddSkipBegin:
                skip_stack.push_back(shape);
                break;
            case LayerKind::AddSkipEnd: {
                if (skip_stack.empty()) fail("skip end without begin");
                std::vector<int> saved = skip_stack.back();
                skip_stack.pop_back();
                if (l.proj) {
                    if (saved.size() != 3 || saved[0] != l.proj->in_ch) fail("projection in_ch mismatch");
                    ConvDims d = conv_out_dims(saved[1], saved[2], 1, 1, l.proj->stride, Padding::Valid);
                    saved = {l.proj->out_ch, d.out_h, d.out_w};
                }
                if (saved != shape) fail("skip shapes do not match");
                break;
            }
        }
    }
    if (!skip_stack.empty()) throw std::invalid_argument("unclosed skip connection");
    return shape;
}

inline void validate_network(const NetworkSpec& net) {
    if (net.class_count <= 0) throw std::invalid_argument("network: class_count must be positive");
    if (net.input_shape.size() != 3) throw std::invalid_argument("network: input shape must be [C,H,W]");
    std::vector<int> shape = infer_shapes(net.stem, net.input_shape);
    for (const auto& nb : net.neighbourhoods) {
        if (nb.input_shape != shape)
            throw std::invalid_argument("neighbourhood " + std::to_string(nb.index) + ": declared input shape differs from chain");
        std::vector<int> out = infer_shapes(nb.layers, shape);
        if (nb.output_shape != out)
            throw std::invalid_argument("neighbourhood " + std::to_string(nb.index) + ": declared output shape differs from inference");
        shape = out;
    }
    std::vector<int> logits = infer_shapes(net.head, shape);
    if (logits != std::vector<int>{net.class_count})
        throw std::invalid_argument("network: head output is not [class_count]");
}

// ---------------------------------------------------------------------------
// Parameter creation / counting
// ---------------------------------------------------------------------------

namespace detail {
inline std::string lname(const std::string& scope, std::size_t li) {
    return scope + ".l" + std::to_string(li);
}
}  // namespace detail

/// Creates parameters for a layer sequence under `scope`; weights use
/// scaled-uniform fan-in init keyed by parameter name, so layout changes
/// elsewhere never shift a layer's draw.
inline void create_layer_params(const std::vector<LayerSpec>& layers, const std::string& scope,
                                ParamStore& params, const Rng& base) {
    auto init = [&](const std::string& name, std::vector<int> shape, int fan_in) {
        Tensor t(std::move(shape));
        Rng r = base.split(name);
        init_uniform_fan_in(t, fan_in, r);
        params.create(name, std::move(t));
    };
    auto norm_params = [&](const std::string& prefix, int c) {
        params.create(prefix + ".gamma", Tensor::full({c}, 1.0f));
        params.create(prefix + ".beta", Tensor({c}));
        params.create(prefix + ".rmean", Tensor({c}), false);
        params.create(prefix + ".rvar", Tensor::full({c}, 1.0f), false);
        params.create(prefix + ".rcnt", Tensor({1}), false);
    };
    for (std::size_t li = 0; li < layers.size(); ++li) {
        const LayerSpec& l = layers[li];
        const std::string p = detail::lname(scope, li);
        switch (l.kind) {
            case LayerKind::Conv:
                init(p + ".w", {l.out_ch, l.in_ch, l.kernel, l.kernel}, l.in_ch * l.kernel * l.kernel);
                break;
            case LayerKind::Dense:
                init(p + ".w", {l.in_ch, l.out_ch}, l.in_ch);
                params.create(p + ".b", Tensor({l.out_ch}));
                break;
            case LayerKind::Norm:
                norm_params(p, l.in_ch);
                break;
            case LayerKind::AddSkipEnd:
                if (l.proj) {
                    init(p + ".proj.w", {l.proj->out_ch, l.proj->in_ch, 1, 1}, l.proj->in_ch);
                    norm_params(p + ".proj", l.proj->out_ch);
                }
                break;
            default:
                break;
        }
    }
}

inline long long count_layer_params(const std::vector<LayerSpec>& layers) {
    long long n = 0;
    for (const LayerSpec& l : layers) {
        switch (l.kind) {
            case LayerKind::Conv:
                n += static_cast<long long>(l.out_ch) * l.in_ch * l.kernel * l.kernel;
                break;
            case LayerKind::Dense:
                n += static_cast<long long>(l.in_ch) * l.out_ch + l.out_ch;
                break;
            case LayerKind::Norm:
                n += 2LL * l.in_ch;
                break;
            case LayerKind::AddSkipEnd:
                if (l.proj) n += static_cast<long long>(l.proj->out_ch) * l.proj->in_ch + 2LL * l.proj->out_ch;
                break;
            default:
                break;
        }
    }
    return n;
}

inline long long param_count(const NetworkSpec& net) {
    long long n = count_layer_params(net.stem) + count_layer_params(net.head);
    for (const auto& nb : net.neighbourhoods) n += count_layer_params(nb.layers);
    return n;
}

inline long long param_count(const CandidateSpec& c) { return count_layer_params(c.layers); }

inline ParamStore init_network_params(const NetworkSpec& net, std::uint64_t seed) {
    ParamStore params;
    Rng base(seed);
    create_layer_params(net.stem, "stem", params, base);
    for (const auto& nb : net.neighbourhoods)
        create_layer_params(nb.layers, "nb" + std::to_string(nb.index), params, base);
    create_layer_params(net.head, "head", params, base);
    return params;
}

// ---------------------------------------------------------------------------
// Forward / backward over layer sequences
// ---------------------------------------------------------------------------

struct LayerTape {
    Tensor x_in;                // input as seen by the layer (conv/dense/relu)
    std::vector<int> in_shape;  // for gap/flatten
    NormCtxT<float> norm;
    Tensor skip_in;  // popped skip value at AddSkipEnd
    NormCtxT<float> proj_norm;
};

using Tape = std::vector<LayerTape>;

namespace detail {

struct StatsIO {
    NormStats s;
    Parameter* rmean = nullptr;
    Parameter* rvar = nullptr;
    Parameter* rcnt = nullptr;
};

inline StatsIO load_stats(const ParamStore& params, const std::string& prefix) {
    StatsIO io;
    auto& store = const_cast<ParamStore&>(params);
    io.rmean = &store.at(prefix + ".rmean");
    io.rvar = &store.at(prefix + ".rvar");
    io.rcnt = &store.at(prefix + ".rcnt");
    io.s.mean = io.rmean->value;
    io.s.var = io.rvar->value;
    io.s.count = io.rcnt->value.data[0];
    return io;
}

inline void store_stats(StatsIO& io) {
    io.rmean->value = io.s.mean;
    io.rvar->value = io.s.var;
    io.rcnt->value.data[0] = static_cast<float>(io.s.count);
}

// Core layer-sequence runner. `update_stats` may only be true in train mode
// and requires the caller to own `params`.
inline Tensor run_layers_impl(const std::vector<LayerSpec>& layers, const std::string& scope,
                              const ParamStore& params, Tensor x, NormMode mode, bool update_stats,
                              Tape* tape) {
    std::vector<Tensor> skip_stack;
    if (tape) tape->assign(layers.size(), LayerTape{});
    for (std::size_t li = 0; li < layers.size(); ++li) {
        const LayerSpec& l = layers[li];
        const std::string p = lname(scope, li);
        LayerTape* t = tape ? &(*tape)[li] : nullptr;
        switch (l.kind) {
            case LayerKind::Conv: {
                if (t) t->x_in = x;
                x = conv2d(x, params.at(p + ".w").value, l.stride, l.pad);
                break;
            }
            case LayerKind::Dense: {
                if (t) t->x_in = x;
                x = dense(x, params.at(p + ".w").value, params.at(p + ".b").value);
                break;
            }
            case LayerKind::Relu: {
                if (t) t->x_in = x;
                x = relu(x);
                break;
            }
            case LayerKind::Norm: {
                StatsIO io = load_stats(params, p);
                x = channel_norm(x, params.at(p + ".gamma").value, params.at(p + ".beta").value, mode,
                                 &io.s, t ? &t->norm : nullptr);
                if (update_stats && mode == NormMode::Train) store_stats(io);
                break;
            }
            case LayerKind::GlobalAvgPool: {
                if (t) t->in_shape = x.shape;
                x = global_avg_pool(x);
                break;
            }
            case LayerKind::Flatten: {
                if (t) t->in_shape = x.shape;
                x = flatten(x);
                break;
            }
            case LayerKind::AddSkipBegin: {
                skip_stack.push_back(x);
                break;
            }
            case LayerKind::AddSkipEnd: {
                if (skip_stack.empty()) throw std::invalid_argument("skip end without begin");
                Tensor saved = std::move(skip_stack.back());
                skip_stack.pop_back();
                if (t) t->skip_in = saved;
                Tensor branch;
                if (l.proj) {
                    Tensor proj = conv2d(saved, params.at(p + ".proj.w").value, l.proj->stride, Padding::Valid);
                    StatsIO io = load_stats(params, p + ".proj");
                    branch = channel_norm(proj, params.at(p + ".proj.gamma").value,
                                          params.at(p + ".proj.beta").value, mode, &io.s,
                                          t ? &t->proj_norm : nullptr);
                    if (update_stats && mode == NormMode::Train) store_stats(io);
                } else {
                    branch = std::move(saved);
                }
                require_same_shape(x, branch, "skip add");
                for (std::size_t i = 0; i < x.numel(); ++i) x.data[i] += branch.data[i];
                break;
            }
        }
    }
    return x;
}

}  // namespace detail

/// Read-only forward (eval mode, or train-mode math without touching the
/// running stats). Safe to call concurrently on a shared store.
inline Tensor run_layers(const std::vector<LayerSpec>& layers, const std::string& scope,
                         const ParamStore& params, Tensor x, NormMode mode, Tape* tape = nullptr) {
    return detail::run_layers_impl(layers, scope, params, std::move(x), mode, false, tape);
}

/// Train-mode forward that owns `params`: normalization running stats are
/// updated by EMA.
inline Tensor run_layers_train(const std::vector<LayerSpec>& layers, const std::string& scope,
                               ParamStore& params, Tensor x, Tape& tape) {
    return detail::run_layers_impl(layers, scope, params, std::move(x), NormMode::Train, true, &tape);
}

/// Backward through a layer sequence. Parameter gradients accumulate into
/// `grads` (pass nullptr for a frozen sequence: input gradients only).
inline Tensor backward_layers(const std::vector<LayerSpec>& layers, const std::string& scope,
                              const ParamStore& params, const Tape& tape, Tensor dy, ParamStore* grads) {
    auto add_grad = [&](const std::string& name, const Tensor& g) {
        if (!grads) return;
        Tensor& dst = grads->at(name).grad;
        for (std::size_t i = 0; i < dst.numel(); ++i) dst.data[i] += g.data[i];
    };
    std::vector<Tensor> pending_skip;  // gradients waiting for their AddSkipBegin
    for (std::size_t ri = layers.size(); ri-- > 0;) {
        const LayerSpec& l = layers[ri];
        const std::string p = detail::lname(scope, ri);
        const LayerTape& t = tape[ri];
        switch (l.kind) {
            case LayerKind::Conv: {
                Tensor dx, dw;
                conv2d_backward(t.x_in, params.at(p + ".w").value, dy, l.stride, l.pad,
                                &dx, grads ? &dw : nullptr);
                if (grads) add_grad(p + ".w", dw);
                dy = std::move(dx);
                break;
            }
            case LayerKind::Dense: {
                Tensor dx, dw, db;
                dense_backward(t.x_in, params.at(p + ".w").value, dy, &dx,
                               grads ? &dw : nullptr, grads ? &db : nullptr);
                if (grads) {
                    add_grad(p + ".w", dw);
                    add_grad(p + ".b", db);
                }
                dy = std::move(dx);
                break;
            }
            case LayerKind::Relu:
                dy = relu_backward(t.x_in, dy);
                break;
            case LayerKind::Norm: {
                Tensor dx, dg, db;
                channel_norm_backward(t.norm, params.at(p + ".gamma").value, dy, &dx,
                                      grads ? &dg : nullptr, grads ? &db : nullptr);
                if (grads) {
                    add_grad(p + ".gamma", dg);
                    add_grad(p + ".beta", db);
                }
                dy = std::move(dx);
                break;
            }
            case LayerKind::GlobalAvgPool:
                dy = global_avg_pool_backward(t.in_shape, dy);
                break;
            case LayerKind::Flatten:
                dy = dy.reshaped(t.in_shape);
                break;
            case LayerKind::AddSkipEnd: {
                Tensor dskip = dy;  // additive join: both branches get dy
                if (l.proj) {
                    Tensor dproj_out, dg, db;
                    channel_norm_backward(t.proj_norm, params.at(p + ".proj.gamma").value, dskip,
                                          &dproj_out, grads ? &dg : nullptr, grads ? &db : nullptr);
                    Tensor dsaved, dw;
                    conv2d_backward(t.skip_in, params.at(p + ".proj.w").value, dproj_out,
                                    l.proj->stride, Padding::Valid, &dsaved, grads ? &dw : nullptr);
                    if (grads) {
                        add_grad(p + ".proj.w", dw);
                        add_grad(p + ".proj.gamma", dg);
                        add_grad(p + ".proj.beta", db);
                    }
                    dskip = std::move(dsaved);
                }
                pending_skip.push_back(std::move(dskip));
                break;
            }
            case LayerKind::AddSkipBegin: {
                if (pending_skip.empty()) throw std::logic_error("skip begin without pending gradient");
                Tensor d = std::move(pending_skip.back());
                pending_skip.pop_back();
                for (std::size_t i = 0; i < dy.numel(); ++i) dy.data[i] += d.data[i];
                break;
            }
        }
    }
    return dy;
}

// ---------------------------------------------------------------------------
// Whole-network forward / backward
// ---------------------------------------------------------------------------

inline std::string nb_scope(int index) { return "nb" + std::to_string(index); }

struct FullTape {
    Tape stem;
    std::vector<Tape> nbs;
    Tape head;
};

/// Composition of stem, neighbourhoods and head; eval mode, read-only.
inline Tensor net_forward(const NetworkSpec& net, const ParamStore& params, const Tensor& input,
                          FullTape* tape = nullptr) {
    if (tape) tape->nbs.assign(net.neighbourhoods.size(), Tape{});
    Tensor x = run_layers(net.stem, "stem", params, input, NormMode::Eval, tape ? &tape->stem : nullptr);
    for (std::size_t i = 0; i < net.neighbourhoods.size(); ++i)
        x = run_layers(net.neighbourhoods[i].layers, nb_scope(net.neighbourhoods[i].index), params, std::move(x),
                       NormMode::Eval, tape ? &tape->nbs[i] : nullptr);
    return run_layers(net.head, "head", params, std::move(x), NormMode::Eval, tape ? &tape->head : nullptr);
}

/// Train-mode forward; `post_block_noise` (optional) is added to each
/// neighbourhood output, the train-time regularizer of the perturbation lab.
inline Tensor net_forward_train(const NetworkSpec& net, ParamStore& params, const Tensor& input,
                                FullTape& tape, double noise_sigma = 0.0, Rng* noise_rng = nullptr) {
    tape.nbs.assign(net.neighbourhoods.size(), Tape{});
    Tensor x = run_layers_train(net.stem, "stem", params, input, tape.stem);
    for (std::size_t i = 0; i < net.neighbourhoods.size(); ++i) {
        x = run_layers_train(net.neighbourhoods[i].layers, nb_scope(net.neighbourhoods[i].index), params,
                             std::move(x), tape.nbs[i]);
        if (noise_sigma > 0.0 && noise_rng) {
            Tensor noise = gaussian_sample(*noise_rng, x.shape, 0.0, noise_sigma);
            for (std::size_t j = 0; j < x.numel(); ++j) x.data[j] += noise.data[j];
        }
    }
    return run_layers_train(net.head, "head", params, std::move(x), tape.head);
}

inline void net_backward(const NetworkSpec& net, const ParamStore& params, const FullTape& tape,
                         Tensor dlogits, ParamStore* grads) {
    Tensor d = backward_layers(net.head, "head", params, tape.head, std::move(dlogits), grads);
    for (std::size_t i = net.neighbourhoods.size(); i-- > 0;)
        d = backward_layers(net.neighbourhoods[i].layers, nb_scope(net.neighbourhoods[i].index), params,
                            tape.nbs[i], std::move(d), grads);
    backward_layers(net.stem, "stem", params, tape.stem, std::move(d), grads);
}

/// Activation at boundary i: stem output for i = 0, output of neighbourhood
/// i-1 otherwise. Boundary n feeds the head.
inline Tensor forward_prefix(const NetworkSpec& net, const ParamStore& params, int boundary,
                             const Tensor& input) {
    if (boundary < 0 || boundary > static_cast<int>(net.neighbourhoods.size()))
        throw std::invalid_argument("forward_prefix: boundary out of range");
    Tensor x = run_layers(net.stem, "stem", params, input, NormMode::Eval);
    for (int i = 0; i < boundary; ++i)
        x = run_layers(net.neighbourhoods[i].layers, nb_scope(net.neighbourhoods[i].index), params,
                       std::move(x), NormMode::Eval);
    return x;
}

/// Remaining network from boundary i (neighbourhoods i..n-1, then head).
inline Tensor forward_suffix(const NetworkSpec& net, const ParamStore& params, int boundary, Tensor x) {
    for (std::size_t i = boundary; i < net.neighbourhoods.size(); ++i)
        x = run_layers(net.neighbourhoods[i].layers, nb_scope(net.neighbourhoods[i].index), params,
                       std::move(x), NormMode::Eval);
    return run_layers(net.head, "head", params, std::move(x), NormMode::Eval);
}

/// Partial model: the teacher with exactly one neighbourhood replaced by a
/// candidate (candidate parameters live in their own store under "cand").
inline Tensor forward_with_replacement(const NetworkSpec& net, const ParamStore& params, int nb_index,
                                       const CandidateSpec& cand, const ParamStore& cand_params,
                                       const Tensor& input) {
    if (nb_index < 0 || nb_index >= static_cast<int>(net.neighbourhoods.size()))
        throw std::invalid_argument("forward_with_replacement: neighbourhood out of range");
    Tensor x = forward_prefix(net, params, nb_index, input);
    x = run_layers(cand.layers, "cand", cand_params, std::move(x), NormMode::Eval);
    return forward_suffix(net, params, nb_index + 1, std::move(x));
}

// ---------------------------------------------------------------------------
// Presets and candidates
// ---------------------------------------------------------------------------

namespace detail {
inline std::vector<LayerSpec> residual_block(int in_ch, int out_ch, int stride) {
    std::vector<LayerSpec> layers;
    layers.push_back(LayerSpec::skip_begin());
    layers.push_back(LayerSpec::conv(in_ch, out_ch, 3, stride, Padding::Same));
    layers.push_back(LayerSpec::norm(out_ch));
    layers.push_back(LayerSpec::relu());
    layers.push_back(LayerSpec::conv(out_ch, out_ch, 3, 1, Padding::Same));
    layers.push_back(LayerSpec::norm(out_ch));
    std::optional<ProjectionSpec> proj;
    if (stride != 1 || in_ch != out_ch) proj = ProjectionSpec{in_ch, out_ch, stride};
    layers.push_back(LayerSpec::skip_end(proj));
    layers.push_back(LayerSpec::relu());
    return layers;
}
}  // namespace detail

/// Residual-network presets. "resnet20-cifar": 3 stages x 3 two-layer
/// blocks, widths 16/32/64. "mini-resnet8": desk-scale, stem 3->8 and three
/// blocks (8,16,16) with one stride-2 transition.
inline NetworkSpec build_resnet(const std::string& preset, int input_hw, int class_count,
                                const std::vector<int>& base_widths = {}) {
    if (class_count <= 0) throw std::invalid_argument("build_resnet: class_count must be positive");
    if (input_hw < 8) throw std::invalid_argument("build_resnet: input size too small");
    NetworkSpec net;
    net.class_count = class_count;
    net.input_shape = {3, input_hw, input_hw};

    std::vector<int> block_widths;   // per block: output width
    std::vector<int> block_strides;  // per block
    int stem_width = 0;
    if (preset == "resnet20-cifar") {
        std::vector<int> stages = base_widths.empty() ? std::vector<int>{16, 32, 64} : base_widths;
        if (stages.size() != 3) throw std::invalid_argument("resnet20-cifar: expected 3 stage widths");
        stem_width = stages[0];
        for (int s = 0; s < 3; ++s)
            for (int b = 0; b < 3; ++b) {
                block_widths.push_back(stages[s]);
                block_strides.push_back(s > 0 && b == 0 ? 2 : 1);
            }
    } else if (preset == "mini-resnet8") {
        std::vector<int> widths = base_widths.empty() ? std::vector<int>{8, 16, 16} : base_widths;
        if (widths.size() != 3) throw std::invalid_argument("mini-resnet8: expected 3 block widths");
        stem_width = widths[0];
        block_widths = widths;
        block_strides = {1, 2, 1};
    } else {
        throw std::invalid_argument("build_resnet: unknown preset '" + preset + "'");
    }

    net.stem = {LayerSpec::conv(3, stem_width, 3, 1, Padding::Same), LayerSpec::norm(stem_width),
                LayerSpec::relu()};
    std::vector<int> shape = infer_shapes(net.stem, net.input_shape);
    int cur = stem_width;
    for (std::size_t b = 0; b < block_widths.size(); ++b) {
        NeighbourhoodSpec nb;
        nb.index = static_cast<int>(b);
        nb.layers = detail::residual_block(cur, block_widths[b], block_strides[b]);
        nb.input_shape = shape;
        shape = infer_shapes(nb.layers, shape);
        nb.output_shape = shape;
        net.neighbourhoods.push_back(std::move(nb));
        cur = block_widths[b];
    }
    net.head = {LayerSpec::global_avg_pool(), LayerSpec::dense(cur, class_count)};
    validate_network(net);
    return net;
}

inline int scaled_width(int base, double k) {
    return std::max(1, static_cast<int>(std::floor(k * base + 0.5)));
}

/// Candidate for one neighbourhood: interior widths scaled by k
/// (round-half-up, floor 1); input/output channels and any projection
/// shortcut are kept as the teacher's.
inline CandidateSpec make_candidate(const NeighbourhoodSpec& teacher_nb, double k, double sparsity = 0.0) {
    if (k <= 0.0 || k > 1.0) throw std::invalid_argument("make_candidate: k must be in (0,1]");
    if (sparsity < 0.0 || sparsity >= 1.0) throw std::invalid_argument("make_candidate: s must be in [0,1)");
    CandidateSpec cand;
    cand.nb_index = teacher_nb.index;
    cand.k = k;
    cand.target_sparsity = sparsity;
    cand.layers = teacher_nb.layers;

    // Last width-setting layer on the main path keeps the boundary width.
    std::size_t last_width_layer = teacher_nb.layers.size();
    for (std::size_t li = teacher_nb.layers.size(); li-- > 0;) {
        LayerKind kind = teacher_nb.layers[li].kind;
        if (kind == LayerKind::Conv || kind == LayerKind::Dense) {
            last_width_layer = li;
            break;
        }
    }

    int cur_new = teacher_nb.input_shape[0];
    for (std::size_t li = 0; li < cand.layers.size(); ++li) {
        LayerSpec& l = cand.layers[li];
        switch (l.kind) {
            case LayerKind::Conv:
            case LayerKind::Dense: {
                l.in_ch = cur_new;
                if (li != last_width_layer) {
                    l.out_ch = scaled_width(l.out_ch, k);
                    cand.inner_widths.push_back(l.out_ch);
                }
                cur_new = l.out_ch;
                break;
            }
            case LayerKind::Norm:
                l.in_ch = cur_new;
                break;
            default:
                break;  // skip markers and projection stay as-is
        }
    }
    std::vector<int> out = infer_shapes(cand.layers, teacher_nb.input_shape);
    if (out != teacher_nb.output_shape)
        throw std::logic_error("make_candidate: boundary shapes changed");
    return cand;
}

enum class InitMode { Auto, TeacherCopy, Random };

/// Candidate parameters under scope "cand". Auto resolves to an exact
/// teacher copy when the architecture is unchanged (k = 1 or a
/// sparsification candidate), random fan-in init otherwise.
inline ParamStore init_candidate_params(const CandidateSpec& cand, const NetworkSpec& teacher,
                                        const ParamStore& teacher_params, InitMode mode, std::uint64_t seed) {
    const NeighbourhoodSpec& nb = teacher.neighbourhoods.at(cand.nb_index);
    bool same_arch = cand.layers == nb.layers;
    if (mode == InitMode::Auto) mode = same_arch ? InitMode::TeacherCopy : InitMode::Random;
    ParamStore params;
    if (mode == InitMode::TeacherCopy) {
        if (!same_arch)
            throw std::invalid_argument("init_candidate_params: teacher copy needs identical architecture");
        teacher_params.copy_into(params, nb_scope(nb.index) + ".", "cand.");
    } else {
        create_layer_params(cand.layers, "cand", params, Rng(seed));
        // Distillation runs candidates with frozen normalization, so fresh
        // stats start populated at mean 0 / var 1.
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& [name, p] = params.item(i);
            if (name.size() > 5 && name.compare(name.size() - 5, 5, ".rcnt") == 0) p.value.data[0] = 1.0f;
        }
    }
    return params;
}

/// Number of student architectures reachable by picking one candidate per
/// neighbourhood.
inline std::uint64_t count_search_space(const std::vector<std::size_t>& candidate_set_sizes) {
    std::uint64_t total = 1;
    for (std::size_t s : candidate_set_sizes) {
        if (s == 0) throw std::invalid_argument("count_search_space: empty candidate set");
        if (total > UINT64_MAX / s) throw std::overflow_error("count_search_space: product overflows u64");
        total *= s;
    }
    return total;
}

}  // namespace nd
