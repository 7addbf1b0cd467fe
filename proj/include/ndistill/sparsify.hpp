#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ndistill/data.hpp"
#include "ndistill/distill.hpp"
#include "ndistill/network.hpp"
#include "ndistill/optim.hpp"
#include "ndistill/tensor.hpp"

namespace nd {

// ---------------------------------------------------------------------------
// Magnitude pruning with a ramped sparsity schedule. Each weight-bearing
// layer is treated as a one-layer neighbourhood: teacher-initialized and
// regressed onto the teacher layer's own outputs while the mask tightens.
// ---------------------------------------------------------------------------

struct SparsitySchedule {
    double final_sparsity = 0.0;  // s_f in [0,1)
    int ramp_steps = 1;           // T_r
    int hold_steps = 0;           // training steps under the frozen final mask
};

inline void validate_schedule(const SparsitySchedule& s) {
    if (s.final_sparsity < 0.0 || s.final_sparsity >= 1.0)
        throw std::invalid_argument("sparsity schedule: s_f must be in [0,1)");
    if (s.ramp_steps < 1) throw std::invalid_argument("sparsity schedule: ramp_steps must be >= 1");
    if (s.hold_steps < 0) throw std::invalid_argument("sparsity schedule: hold_steps must be >= 0");
}

/// Cubic ramp: s(t) = s_f * (1 - (1 - min(t,T_r)/T_r)^3), held at s_f after.
inline double sparsity_at_step(const SparsitySchedule& s, long t) {
    validate_schedule(s);
    if (t < 0) throw std::invalid_argument("sparsity_at_step: negative step");
    const double frac = std::min<double>(static_cast<double>(t), s.ramp_steps) / s.ramp_steps;
    const double rem = 1.0 - frac;
    return s.final_sparsity * (1.0 - rem * rem * rem);
}

/// Binary keep-mask zeroing the floor(s*n) smallest-magnitude entries;
/// magnitude ties are broken by pruning the lowest flat index first.
inline Tensor magnitude_prune_mask(const Tensor& w, double s) {
    if (s < 0.0 || s >= 1.0) throw std::invalid_argument("magnitude_prune_mask: s must be in [0,1)");
    const std::size_t n = w.numel();
    const std::size_t prune = static_cast<std::size_t>(std::floor(s * static_cast<double>(n)));
    Tensor mask = Tensor::full(w.shape, 1.0f);
    if (prune == 0) return mask;
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        const float ma = std::fabs(w.data[a]), mb = std::fabs(w.data[b]);
        if (ma != mb) return ma < mb;
        return a < b;
    });
    for (std::size_t i = 0; i < prune; ++i) mask.data[idx[i]] = 0.0f;
    return mask;
}

inline void apply_mask(Tensor& w, const Tensor& mask) {
    require_same_shape(w, mask, "apply_mask");
    for (std::size_t i = 0; i < w.numel(); ++i) w.data[i] *= mask.data[i];
}

inline double zero_fraction(const Tensor& w) {
    std::size_t z = 0;
    for (float v : w.data)
        if (v == 0.0f) ++z;
    return static_cast<double>(z) / static_cast<double>(w.numel());
}

// ---------------------------------------------------------------------------
// Layer addressing
// ---------------------------------------------------------------------------

/// One weight tensor eligible for pruning: a conv or dense layer in the stem,
/// a neighbourhood or the head, or the projection conv inside a skip merge.
struct SparseTarget {
    std::string segment;  // "stem", "nb<i>" or "head"
    int layer_index = 0;  // position in that segment's layer list
    bool proj = false;    // projection conv of an AddSkipEnd layer

    std::string weight_name() const {
        return segment + ".l" + std::to_string(layer_index) + (proj ? ".proj.w" : ".w");
    }
    std::string label() const {
        return segment + "/l" + std::to_string(layer_index) + (proj ? "/proj" : "");
    }
};

namespace detail {
inline void collect_targets(const std::vector<LayerSpec>& layers, const std::string& segment,
                            std::vector<SparseTarget>& out) {
    for (std::size_t li = 0; li < layers.size(); ++li) {
        const LayerSpec& l = layers[li];
        if (l.kind == LayerKind::Conv || l.kind == LayerKind::Dense)
            out.push_back({segment, static_cast<int>(li), false});
        else if (l.kind == LayerKind::AddSkipEnd && l.proj)
            out.push_back({segment, static_cast<int>(li), true});
    }
}

inline const std::vector<LayerSpec>& segment_layers(const NetworkSpec& net, const std::string& segment) {
    if (segment == "stem") return net.stem;
    if (segment == "head") return net.head;
    for (const auto& nb : net.neighbourhoods)
        if (nb_scope(nb.index) == segment) return nb.layers;
    throw std::invalid_argument("unknown segment '" + segment + "'");
}
}  // namespace detail

/// Every prunable weight tensor, in network order.
inline std::vector<SparseTarget> sparsifiable_layers(const NetworkSpec& net) {
    std::vector<SparseTarget> out;
    detail::collect_targets(net.stem, "stem", out);
    for (const auto& nb : net.neighbourhoods) detail::collect_targets(nb.layers, nb_scope(nb.index), out);
    detail::collect_targets(net.head, "head", out);
    return out;
}

/// Input/output pair of one layer under the teacher, eval mode, whole
/// dataset. The input feeds sparse distillation; the output is its target.
inline std::pair<Tensor, Tensor> layer_io(const NetworkSpec& net, const ParamStore& params,
                                          const Tensor& images, const SparseTarget& target,
                                          int batch_size = 128) {
    const std::vector<LayerSpec>& layers = detail::segment_layers(net, target.segment);
    const LayerSpec& l = layers.at(static_cast<std::size_t>(target.layer_index));
    if (target.proj && (l.kind != LayerKind::AddSkipEnd || !l.proj))
        throw std::invalid_argument("layer_io: target is not a projection layer");
    if (!target.proj && l.kind != LayerKind::Conv && l.kind != LayerKind::Dense)
        throw std::invalid_argument("layer_io: target holds no weights");

    const int n = images.shape[0];
    const std::size_t plane = images.numel() / static_cast<std::size_t>(n);
    Tensor in_all, out_all;
    const Tensor& w = params.at(target.weight_name()).value;
    for (int start = 0; start < n; start += batch_size) {
        const int count = std::min(batch_size, n - start);
        Tensor x({count, images.shape[1], images.shape[2], images.shape[3]});
        std::copy(&images.data[static_cast<std::size_t>(start) * plane],
                  &images.data[static_cast<std::size_t>(start) * plane] + plane * static_cast<std::size_t>(count),
                  x.data.begin());
        FullTape tape;
        net_forward(net, params, x, &tape);
        const Tape* seg_tape = nullptr;
        if (target.segment == "stem")
            seg_tape = &tape.stem;
        else if (target.segment == "head")
            seg_tape = &tape.head;
        else
            for (const auto& nb : net.neighbourhoods)
                if (nb_scope(nb.index) == target.segment)
                    seg_tape = &tape.nbs.at(static_cast<std::size_t>(nb.index));
        const LayerTape& lt = seg_tape->at(static_cast<std::size_t>(target.layer_index));
        const Tensor& xin = target.proj ? lt.skip_in : lt.x_in;

        Tensor y;
        if (target.proj)
            y = conv2d(xin, w, l.proj->stride, Padding::Valid);
        else if (l.kind == LayerKind::Conv)
            y = conv2d(xin, w, l.stride, l.pad);
        else
            y = dense(xin, w, params.at(target.segment + ".l" + std::to_string(target.layer_index) + ".b").value);

        if (in_all.numel() == 0) {
            std::vector<int> si = xin.shape;
            si[0] = n;
            in_all = Tensor(si);
            std::vector<int> so = y.shape;
            so[0] = n;
            out_all = Tensor(so);
        }
        const std::size_t rin = xin.numel() / static_cast<std::size_t>(count);
        const std::size_t rout = y.numel() / static_cast<std::size_t>(count);
        std::copy(xin.data.begin(), xin.data.end(), &in_all.data[rin * static_cast<std::size_t>(start)]);
        std::copy(y.data.begin(), y.data.end(), &out_all.data[rout * static_cast<std::size_t>(start)]);
    }
    return {std::move(in_all), std::move(out_all)};
}

// ---------------------------------------------------------------------------
// Sparse distillation of one layer
// ---------------------------------------------------------------------------

inline constexpr int kMaskRecomputeEvery = 100;

struct SparseLayerResult {
    SparseTarget target;
    Tensor weights;
    std::optional<Tensor> bias;  // dense layers only
    Tensor mask;
    std::vector<double> loss_trace;
    double final_loss = 0.0;
    double achieved_sparsity = 0.0;
    bool failed = false;
    std::string diagnostic;
};

/// Teacher-initialized magnitude pruning of a single layer: the mask follows
/// the cubic ramp (recomputed every kMaskRecomputeEvery steps, frozen once
/// the ramp ends) while SGD regresses the layer onto the teacher's outputs.
/// Pruned coordinates are exactly zero after every step.
inline SparseLayerResult distill_sparse_layer(const NetworkSpec& net, const ParamStore& teacher_params,
                                              const SparseTarget& target, const Tensor& inputs,
                                              const Tensor& targets, const SparsitySchedule& schedule,
                                              const TrainConfig& cfg, std::uint64_t seed) {
    validate_schedule(schedule);
    const std::vector<LayerSpec>& layers = detail::segment_layers(net, target.segment);
    const LayerSpec& l = layers.at(static_cast<std::size_t>(target.layer_index));

    SparseLayerResult res;
    res.target = target;
    res.weights = teacher_params.at(target.weight_name()).value;
    const bool is_dense = !target.proj && l.kind == LayerKind::Dense;
    if (is_dense)
        res.bias = teacher_params.at(target.segment + ".l" + std::to_string(target.layer_index) + ".b").value;
    const int stride = target.proj ? l.proj->stride : l.stride;
    const Padding pad = target.proj ? Padding::Valid : l.pad;

    ParamStore ps;
    ps.create("w", res.weights);
    if (res.bias) ps.create("b", *res.bias);

    res.mask = Tensor::full(res.weights.shape, 1.0f);
    double applied_s = 0.0;
    IndexCycler cycler(inputs.shape[0], seed);
    const LrSchedule sched = make_schedule(cfg);
    const long total = static_cast<long>(schedule.ramp_steps) + schedule.hold_steps;

    for (long t = 0; t < total; ++t) {
        if ((t < schedule.ramp_steps && t % kMaskRecomputeEvery == 0) || t == schedule.ramp_steps) {
            applied_s = sparsity_at_step(schedule, t);
            res.mask = magnitude_prune_mask(ps.at("w").value, applied_s);
            apply_mask(ps.at("w").value, res.mask);
        }
        std::vector<int> idx = cycler.next(cfg.batch_size);
        Tensor x = gather_rows(inputs, idx);
        Tensor y = gather_rows(targets, idx);

        Tensor out, dw, db;
        if (is_dense)
            out = dense(x, ps.at("w").value, ps.at("b").value);
        else
            out = conv2d(x, ps.at("w").value, stride, pad);
        const double loss = mse(out, y);
        res.final_loss = loss;
        res.loss_trace.push_back(loss);
        if (!std::isfinite(loss)) {
            res.failed = true;
            res.diagnostic = "non-finite loss at step " + std::to_string(t) + " (" + target.label() + ")";
            break;
        }
        Tensor dy = mse_grad(out, y);
        if (is_dense)
            dense_backward(x, ps.at("w").value, dy, static_cast<Tensor*>(nullptr), &dw, &db);
        else
            conv2d_backward(x, ps.at("w").value, dy, stride, pad, static_cast<Tensor*>(nullptr), &dw);
        apply_mask(dw, res.mask);
        ps.at("w").grad = dw;
        if (res.bias) ps.at("b").grad = db;
        sgd_momentum_step(ps, SgdConfig{sched.at(static_cast<int>(t)), cfg.momentum, cfg.weight_decay});
        apply_mask(ps.at("w").value, res.mask);
    }

    if (!res.failed && applied_s != schedule.final_sparsity) {
        res.mask = magnitude_prune_mask(ps.at("w").value, schedule.final_sparsity);
        apply_mask(ps.at("w").value, res.mask);
    }
    res.weights = ps.at("w").value;
    if (res.bias) *res.bias = ps.at("b").value;
    res.achieved_sparsity = zero_fraction(res.weights);
    return res;
}

/// Teacher parameters with each listed layer's weights replaced by its
/// sparsified version.
inline ParamStore sparse_compose(const ParamStore& teacher_params,
                                 const std::vector<SparseLayerResult>& picks) {
    ParamStore out;
    teacher_params.copy_into(out, "", "");
    for (const SparseLayerResult& r : picks) {
        if (r.failed)
            throw std::invalid_argument("sparse_compose: layer " + r.target.label() + " failed");
        out.at(r.target.weight_name()).value = r.weights;
        if (r.bias)
            out.at(r.target.segment + ".l" + std::to_string(r.target.layer_index) + ".b").value = *r.bias;
    }
    return out;
}

/// Nonzero parameter count of a composed sparse model.
inline long long nonzero_param_count(const ParamStore& params) {
    long long n = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& [name, p] = params.item(i);
        if (!p.trainable) continue;
        for (float v : p.value.data)
            if (v != 0.0f) ++n;
    }
    return n;
}

}  // namespace nd
