#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ndistill/data.hpp"
#include "ndistill/losses.hpp"
#include "ndistill/metrics.hpp"
#include "ndistill/network.hpp"
#include "ndistill/optim.hpp"
#include "ndistill/pool.hpp"
#include "ndistill/rng.hpp"
#include "ndistill/tensor.hpp"

namespace nd {

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

inline double evaluate_forward(const std::function<Tensor(const Tensor&)>& fwd, const Dataset& ds,
                               int batch_size = 256) {
    validate_dataset(ds);
    const int n = ds.size();
    int hits = 0;
    for (int start = 0; start < n; start += batch_size) {
        const int count = std::min(batch_size, n - start);
        std::vector<int> idx(static_cast<std::size_t>(count));
        std::iota(idx.begin(), idx.end(), start);
        Batch b = gather(ds, idx);
        Tensor logits = fwd(b.images);
        for (int i = 0; i < count; ++i) {
            int arg = 0;
            for (int k = 1; k < logits.shape[1]; ++k)
                if (logits.at2(i, k) > logits.at2(i, arg)) arg = k;
            if (arg == b.labels[static_cast<std::size_t>(i)]) ++hits;
        }
    }
    return 100.0 * hits / n;
}

/// Top-1 accuracy in percent, eval mode.
inline double evaluate(const NetworkSpec& net, const ParamStore& params, const Dataset& ds,
                       int batch_size = 256) {
    return evaluate_forward([&](const Tensor& x) { return net_forward(net, params, x); }, ds, batch_size);
}

/// Accuracy of the partial model: teacher with one neighbourhood swapped for
/// a candidate.
inline double evaluate_replaced(const NetworkSpec& net, const ParamStore& params, const CandidateSpec& cand,
                                const ParamStore& cand_params, const Dataset& ds, int batch_size = 256) {
    return evaluate_forward(
        [&](const Tensor& x) {
            return forward_with_replacement(net, params, cand.nb_index, cand, cand_params, x);
        },
        ds, batch_size);
}

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
    int steps = 200;
    int batch_size = 32;
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 0.0;
    double tau = 2.5;     // soft-target temperature
    double lambda = 1.0;  // hard-label weight in the fine-tune objective
    int augment_shift = 0;
    int warmup_steps = 0;
    double decay_factor = 1.0;
    int decay_every = 0;
    int log_every = 0;  // 0 disables periodic metric rows
};

inline LrSchedule make_schedule(const TrainConfig& c) {
    LrSchedule s;
    s.base = c.lr;
    s.warmup_start = c.lr * 0.1;
    s.warmup_steps = c.warmup_steps;
    s.decay_factor = c.decay_factor;
    s.decay_every = c.decay_every;
    return s;
}

namespace detail {
inline void log_step(MetricsWriter* mw, const std::string& exp_id, const std::string& phase, long step,
                     double wall, double loss, std::optional<double> acc, const TrainConfig& cfg) {
    if (!mw || cfg.log_every <= 0) return;
    if (step % cfg.log_every != 0 && step + 1 != cfg.steps) return;
    MetricRow row;
    row.experiment_id = exp_id;
    row.phase = phase;
    row.step = step;
    row.wall_time_s = wall;
    row.loss = loss;
    row.accuracy = acc;
    mw->write(row);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Whole-network training: plain cross entropy, and the soft-target fine-tune
// used after composition.
// ---------------------------------------------------------------------------

/// Cross-entropy SGD training; `noise_sigma > 0` injects fresh Gaussian noise
/// after every residual unit on the forward pass (noise-regularized teacher).
inline double train_supervised(const NetworkSpec& net, ParamStore& params, const Dataset& ds,
                               const TrainConfig& cfg, std::uint64_t seed, double noise_sigma = 0.0,
                               MetricsWriter* mw = nullptr, const std::string& exp_id = "",
                               const std::string& phase = "train") {
    validate_dataset(ds);
    Batcher batcher(ds, cfg.batch_size, seed);
    Rng aug_rng = Rng(seed).split("augment");
    Rng noise_rng = Rng(seed).split("unit-noise");
    const LrSchedule sched = make_schedule(cfg);
    Stopwatch sw;
    double loss = 0.0;
    for (long t = 0; t < cfg.steps; ++t) {
        Batch b = batcher.next();
        if (cfg.augment_shift > 0) augment_batch(b.images, cfg.augment_shift, aug_rng);
        FullTape tape;
        Tensor logits = net_forward_train(net, params, b.images, tape, noise_sigma,
                                          noise_sigma > 0 ? &noise_rng : nullptr);
        Tensor targets = one_hot<float>(b.labels, net.class_count);
        Tensor dlogits;
        loss = softmax_cross_entropy(logits, targets, 1.0, &dlogits);
        if (!std::isfinite(loss))
            throw std::runtime_error("train_supervised: non-finite loss at step " + std::to_string(t));
        net_backward(net, params, tape, std::move(dlogits), &params);
        sgd_momentum_step(params, SgdConfig{sched.at(static_cast<int>(t)), cfg.momentum, cfg.weight_decay});
        detail::log_step(mw, exp_id, phase, t, sw.seconds(), loss, accuracy_percent(logits, b.labels), cfg);
    }
    return loss;
}

/// Fine-tune against teacher soft targets at temperature tau plus
/// lambda-weighted hard labels at temperature 1.
inline double kd_finetune(const NetworkSpec& student_net, ParamStore& student_params,
                          const NetworkSpec& teacher_net, const ParamStore& teacher_params,
                          const Dataset& ds, const TrainConfig& cfg, std::uint64_t seed,
                          MetricsWriter* mw = nullptr, const std::string& exp_id = "",
                          const std::string& phase = "finetune") {
    validate_dataset(ds);
    Batcher batcher(ds, cfg.batch_size, seed);
    Rng aug_rng = Rng(seed).split("augment");
    const LrSchedule sched = make_schedule(cfg);
    Stopwatch sw;
    double loss = 0.0;
    for (long t = 0; t < cfg.steps; ++t) {
        Batch b = batcher.next();
        if (cfg.augment_shift > 0) augment_batch(b.images, cfg.augment_shift, aug_rng);
        Tensor tlogits = net_forward(teacher_net, teacher_params, b.images);
        FullTape tape;
        Tensor slogits = net_forward_train(student_net, student_params, b.images, tape);
        Tensor dlogits;
        loss = kd_loss(tlogits, slogits, b.labels, cfg.tau, cfg.lambda, &dlogits);
        if (!std::isfinite(loss))
            throw std::runtime_error("kd_finetune: non-finite loss at step " + std::to_string(t));
        net_backward(student_net, student_params, tape, std::move(dlogits), &student_params);
        sgd_momentum_step(student_params, SgdConfig{sched.at(static_cast<int>(t)), cfg.momentum, cfg.weight_decay});
        detail::log_step(mw, exp_id, phase, t, sw.seconds(), loss, accuracy_percent(slogits, b.labels), cfg);
    }
    return loss;
}

/// End-to-end soft-target training on pure noise images: inputs are drawn
/// from N(0, input_scale^2) each step and only the teacher's soft targets
/// supervise the student (no labels exist for noise).
inline double train_kd_gaussian_end2end(const NetworkSpec& student_net, ParamStore& student_params,
                                        const NetworkSpec& teacher_net, const ParamStore& teacher_params,
                                        const TrainConfig& cfg, std::uint64_t seed, double input_scale = 1.0,
                                        MetricsWriter* mw = nullptr, const std::string& exp_id = "") {
    const LrSchedule sched = make_schedule(cfg);
    Rng base = Rng(seed).split("gaussian-e2e");
    std::vector<int> xshape = {cfg.batch_size, student_net.input_shape[0], student_net.input_shape[1],
                               student_net.input_shape[2]};
    Stopwatch sw;
    double loss = 0.0;
    for (long t = 0; t < cfg.steps; ++t) {
        Rng step_rng = base.split("step", static_cast<std::uint64_t>(t));
        Tensor x = gaussian_sample(step_rng, xshape, 0.0, input_scale);
        Tensor tlogits = net_forward(teacher_net, teacher_params, x);
        Tensor soft = softmax(tlogits, cfg.tau);
        FullTape tape;
        Tensor slogits = net_forward_train(student_net, student_params, x, tape);
        Tensor dlogits;
        loss = softmax_cross_entropy(slogits, soft, cfg.tau, &dlogits);
        if (!std::isfinite(loss))
            throw std::runtime_error("train_kd_gaussian_end2end: non-finite loss at step " + std::to_string(t));
        net_backward(student_net, student_params, tape, std::move(dlogits), &student_params);
        sgd_momentum_step(student_params, SgdConfig{sched.at(static_cast<int>(t)), cfg.momentum, cfg.weight_decay});
        detail::log_step(mw, exp_id, "gaussian-e2e", t, sw.seconds(), loss, std::nullopt, cfg);
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Per-neighbourhood distillation
// ---------------------------------------------------------------------------

enum class SourceKind { Cache, Gaussian };

struct DistillJob {
    CandidateSpec candidate;
    TrainConfig train;
    std::uint64_t seed = 0;
    InitMode init = InitMode::Auto;
    SourceKind source = SourceKind::Cache;
    int lookahead_depth = 0;        // extra boundaries matched through the frozen teacher
    double lookahead_alpha = 0.5;   // weight of each extra term
    bool gaussian_rescale = false;  // scale noise images by the stored-stats input estimate
};

/// Data-free estimate of the network's input scale. The stem norm's running
/// variances record the stem conv's response to real inputs, so dividing
/// each by the squared norm of the filter that produced it recovers the
/// input variance that filter saw.
inline double input_scale_estimate(const NetworkSpec& net, const ParamStore& params) {
    int conv = -1, norm = -1;
    for (std::size_t li = 0; li < net.stem.size(); ++li) {
        if (net.stem[li].kind == LayerKind::Conv && conv < 0) conv = static_cast<int>(li);
        if (net.stem[li].kind == LayerKind::Norm && conv >= 0 && norm < 0) norm = static_cast<int>(li);
    }
    if (conv < 0 || norm < 0)
        throw std::runtime_error("input_scale_estimate: stem needs a conv followed by a norm");
    const Tensor& w = params.at("stem.l" + std::to_string(conv) + ".w").value;
    const Tensor& rvar = params.at("stem.l" + std::to_string(norm) + ".rvar").value;
    const std::size_t per = w.numel() / static_cast<std::size_t>(w.shape[0]);
    double acc = 0.0;
    for (int c = 0; c < w.shape[0]; ++c) {
        double wsq = 0.0;
        const float* p = &w.data[static_cast<std::size_t>(c) * per];
        for (std::size_t q = 0; q < per; ++q) wsq += static_cast<double>(p[q]) * p[q];
        if (wsq > 0) acc += rvar.data[static_cast<std::size_t>(c)] / wsq;
    }
    return std::sqrt(std::max(acc / w.shape[0], 1e-8));
}

struct DistillResult {
    CandidateSpec candidate;
    ParamStore params;  // candidate parameters, scope "cand"
    std::vector<double> loss_trace;
    double final_loss = 0.0;
    bool failed = false;
    std::string diagnostic;
    double seconds = 0.0;
};

/// Activation views for one neighbourhood: the boundary feeding it plus the
/// target boundaries (the first is its own output; later ones serve the
/// look-ahead terms).
struct CacheView {
    const Tensor* input = nullptr;
    std::vector<const Tensor*> targets;
};

/// Trains one candidate against the frozen teacher. Cache jobs fit the cached
/// boundary activations; Gaussian jobs draw fresh noise images every step,
/// transport them through the frozen teacher prefix to the neighbourhood
/// input, and compute the teacher's response on the fly. Look-ahead terms propagate
/// both outputs through the next `depth` frozen teacher neighbourhoods and
/// add alpha-weighted squared error at each boundary. A non-finite loss marks
/// the result failed instead of throwing.
inline DistillResult distill_neighbourhood(const NetworkSpec& teacher, const ParamStore& teacher_params,
                                           const DistillJob& job, const CacheView* cache = nullptr) {
    const int i = job.candidate.nb_index;
    if (i < 0 || i >= static_cast<int>(teacher.neighbourhoods.size()))
        throw std::invalid_argument("distill_neighbourhood: neighbourhood index out of range");
    const NeighbourhoodSpec& nb = teacher.neighbourhoods[static_cast<std::size_t>(i)];
    const int depth =
        std::min(job.lookahead_depth, static_cast<int>(teacher.neighbourhoods.size()) - 1 - i);
    if (depth < 0 || job.lookahead_depth < 0)
        throw std::invalid_argument("distill_neighbourhood: negative look-ahead depth");

    if (job.source == SourceKind::Cache) {
        if (!cache || !cache->input || cache->targets.empty())
            throw std::invalid_argument("distill_neighbourhood: cache job without cached activations");
        if (static_cast<int>(cache->targets.size()) < depth + 1)
            throw std::invalid_argument("distill_neighbourhood: not enough target boundaries for look-ahead");
    }

    Stopwatch sw;
    DistillResult res;
    res.candidate = job.candidate;
    res.params = init_candidate_params(job.candidate, teacher, teacher_params, job.init, job.seed);

    const TrainConfig& cfg = job.train;
    const LrSchedule sched = make_schedule(cfg);
    std::optional<IndexCycler> cycler;
    if (job.source == SourceKind::Cache) cycler.emplace(cache->input->shape[0], job.seed);
    Rng grng = Rng(job.seed).split("gaussian-src");
    double gscale = 1.0;
    if (job.source == SourceKind::Gaussian && job.gaussian_rescale)
        gscale = input_scale_estimate(teacher, teacher_params);

    std::vector<int> xshape = {cfg.batch_size};
    for (int d : job.source == SourceKind::Gaussian ? teacher.input_shape : nb.input_shape)
        xshape.push_back(d);

    for (long t = 0; t < cfg.steps; ++t) {
        Tensor x, y0;
        std::vector<Tensor> lookahead_targets;
        if (job.source == SourceKind::Cache) {
            std::vector<int> idx = cycler->next(cfg.batch_size);
            x = gather_rows(*cache->input, idx);
            y0 = gather_rows(*cache->targets[0], idx);
            for (int j = 1; j <= depth; ++j)
                lookahead_targets.push_back(gather_rows(*cache->targets[static_cast<std::size_t>(j)], idx));
        } else {
            // Noise images transported through the frozen teacher prefix carry
            // the prefix's own channel and spatial structure to the
            // neighbourhood input; iid noise drawn at the boundary has neither
            // and the student it trains does not survive composition.
            Rng step_rng = grng.split("step", static_cast<std::uint64_t>(t));
            x = gaussian_sample(step_rng, xshape, 0.0, gscale);
            x = run_layers(teacher.stem, "stem", teacher_params, std::move(x), NormMode::Eval);
            for (int j = 0; j < i; ++j)
                x = run_layers(teacher.neighbourhoods[static_cast<std::size_t>(j)].layers, nb_scope(j),
                               teacher_params, std::move(x), NormMode::Eval);
            y0 = run_layers(nb.layers, nb_scope(i), teacher_params, x, NormMode::Eval);
            Tensor cur = y0;
            for (int j = 1; j <= depth; ++j) {
                cur = run_layers(teacher.neighbourhoods[static_cast<std::size_t>(i + j)].layers,
                                 nb_scope(i + j), teacher_params, std::move(cur), NormMode::Eval);
                lookahead_targets.push_back(cur);
            }
        }

        // The candidate runs with frozen normalization statistics: an exact
        // teacher copy then reproduces the cached targets bit for bit (zero
        // loss), and the function being fit is the one used at composition.
        Tape tape;
        Tensor out = run_layers(job.candidate.layers, "cand", res.params, x, NormMode::Eval, &tape);
        double loss = mse(out, y0);
        Tensor dout = mse_grad(out, y0);

        if (depth > 0) {
            // Student output through the frozen teacher suffix, one boundary
            // at a time; gradients flow back through it into the candidate.
            std::vector<Tape> suffix_tapes(static_cast<std::size_t>(depth));
            std::vector<Tensor> s(static_cast<std::size_t>(depth));
            Tensor cur = out;
            for (int j = 1; j <= depth; ++j) {
                cur = run_layers(teacher.neighbourhoods[static_cast<std::size_t>(i + j)].layers,
                                 nb_scope(i + j), teacher_params, std::move(cur), NormMode::Eval,
                                 &suffix_tapes[static_cast<std::size_t>(j - 1)]);
                s[static_cast<std::size_t>(j - 1)] = cur;
                loss += job.lookahead_alpha * mse(cur, lookahead_targets[static_cast<std::size_t>(j - 1)]);
            }
            Tensor dtop;
            for (int j = depth; j >= 1; --j) {
                Tensor g = mse_grad(s[static_cast<std::size_t>(j - 1)],
                                    lookahead_targets[static_cast<std::size_t>(j - 1)]);
                for (auto& v : g.data) v = static_cast<float>(v * job.lookahead_alpha);
                if (dtop.numel() == 0) {
                    dtop = std::move(g);
                } else {
                    for (std::size_t q = 0; q < dtop.numel(); ++q) dtop.data[q] += g.data[q];
                }
                dtop = backward_layers(teacher.neighbourhoods[static_cast<std::size_t>(i + j)].layers,
                                       nb_scope(i + j), teacher_params,
                                       suffix_tapes[static_cast<std::size_t>(j - 1)], std::move(dtop),
                                       nullptr);
            }
            for (std::size_t q = 0; q < dout.numel(); ++q) dout.data[q] += dtop.data[q];
        }

        res.final_loss = loss;
        res.loss_trace.push_back(loss);
        if (!std::isfinite(loss) || !out.all_finite()) {
            res.failed = true;
            res.diagnostic = "non-finite loss at step " + std::to_string(t) + " (neighbourhood " +
                             std::to_string(i) + ", k=" + fmt_num(job.candidate.k) + ")";
            break;
        }
        backward_layers(job.candidate.layers, "cand", res.params, tape, std::move(dout), &res.params);
        sgd_momentum_step(res.params, SgdConfig{sched.at(static_cast<int>(t)), cfg.momentum, cfg.weight_decay});
    }
    res.seconds = sw.seconds();
    return res;
}

/// Runs a batch of independent distillation jobs on a worker pool. The
/// returned vector is ordered like `jobs` and is identical for any worker
/// count. Cache jobs read boundaries[i] .. boundaries[i+1+depth].
inline PoolResult<DistillResult> distill_all(const NetworkSpec& teacher, const ParamStore& teacher_params,
                                             const std::vector<DistillJob>& jobs,
                                             const std::vector<Tensor>& boundaries, int workers) {
    std::vector<std::function<DistillResult()>> fns;
    fns.reserve(jobs.size());
    for (const DistillJob& job : jobs) {
        if (job.source == SourceKind::Cache) {
            const int i = job.candidate.nb_index;
            const int depth =
                std::min(job.lookahead_depth, static_cast<int>(teacher.neighbourhoods.size()) - 1 - i);
            if (static_cast<std::size_t>(i + 1 + depth) >= boundaries.size())
                throw std::invalid_argument("distill_all: boundary cache too short for job");
            CacheView view;
            view.input = &boundaries[static_cast<std::size_t>(i)];
            for (int j = 0; j <= depth; ++j)
                view.targets.push_back(&boundaries[static_cast<std::size_t>(i + 1 + j)]);
            fns.push_back([&teacher, &teacher_params, job, view] {
                return distill_neighbourhood(teacher, teacher_params, job, &view);
            });
        } else {
            fns.push_back([&teacher, &teacher_params, job] {
                return distill_neighbourhood(teacher, teacher_params, job, nullptr);
            });
        }
    }
    return run_jobs(fns, workers);
}

// ---------------------------------------------------------------------------
// Composition
// ---------------------------------------------------------------------------

struct ComposedModel {
    NetworkSpec net;
    ParamStore params;
};

/// Teacher with each listed neighbourhood replaced by its distilled
/// candidate; unlisted neighbourhoods keep the teacher's own parameters.
inline ComposedModel compose_students(const NetworkSpec& teacher, const ParamStore& teacher_params,
                                      const std::vector<DistillResult>& picks) {
    ComposedModel out;
    out.net = teacher;
    teacher_params.copy_into(out.params, "stem.", "stem.");
    std::vector<const DistillResult*> by_nb(teacher.neighbourhoods.size(), nullptr);
    for (const DistillResult& r : picks) {
        if (r.failed)
            throw std::invalid_argument("compose_students: candidate for neighbourhood " +
                                        std::to_string(r.candidate.nb_index) + " failed");
        auto& slot = by_nb.at(static_cast<std::size_t>(r.candidate.nb_index));
        if (slot) throw std::invalid_argument("compose_students: duplicate neighbourhood " +
                                              std::to_string(r.candidate.nb_index));
        slot = &r;
    }
    for (std::size_t i = 0; i < teacher.neighbourhoods.size(); ++i) {
        const std::string scope = nb_scope(static_cast<int>(i)) + ".";
        if (by_nb[i]) {
            out.net.neighbourhoods[i].layers = by_nb[i]->candidate.layers;
            by_nb[i]->params.copy_into(out.params, "cand.", scope);
        } else {
            teacher_params.copy_into(out.params, scope, scope);
        }
    }
    teacher_params.copy_into(out.params, "head.", "head.");
    validate_network(out.net);
    return out;
}

/// Refreshes every norm layer's running statistics from real data: clears
/// them, then runs forward passes in training mode without weight updates.
inline void recalibrate_norm_stats(const NetworkSpec& net, ParamStore& params, const Dataset& ds,
                                   int batches, int batch_size, std::uint64_t seed) {
    auto ends_with = [](const std::string& s, const std::string& suf) {
        return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
    };
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& [name, p] = params.item(i);
        if (ends_with(name, ".rmean") || ends_with(name, ".rvar") || ends_with(name, ".rcnt"))
            for (auto& v : p.value.data) v = 0.0f;
    }
    Batcher batcher(ds, batch_size, seed);
    for (int t = 0; t < batches; ++t) {
        Batch b = batcher.next();
        FullTape tape;
        net_forward_train(net, params, b.images, tape);
    }
    params.zero_grads();
}

}  // namespace nd
