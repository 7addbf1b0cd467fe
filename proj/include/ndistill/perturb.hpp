#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ndistill/cache.hpp"
#include "ndistill/data.hpp"
#include "ndistill/distill.hpp"
#include "ndistill/metrics.hpp"
#include "ndistill/network.hpp"
#include "ndistill/rng.hpp"

namespace nd {

// ---------------------------------------------------------------------------
// Perturbation specs
// ---------------------------------------------------------------------------

struct PerturbSpec {
    enum class Target { Activations, Weights };
    Target target = Target::Activations;
    double epsilon = 0.0;
    std::vector<int> affected_nbs;              // activation noise: neighbourhood indices
    std::vector<std::string> affected_weights;  // weight noise: parameter names
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
};

struct NoiseRegSpec {
    double sigma = 0.0;  // injected after every residual unit at train time
};

struct PerturbEval {
    double mean = 0.0;
    double sd = 0.0;  // population sd over seeds
    double baseline = 0.0;
    std::vector<double> per_seed;
};

namespace detail {
inline void mean_sd(const std::vector<double>& v, double& mean, double& sd) {
    mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - mean) * (x - mean);
    sd = std::sqrt(s / static_cast<double>(v.size()));
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Activation noise
// ---------------------------------------------------------------------------

/// Eval forward with amplitude-eps Gaussian noise added to the output of each
/// affected neighbourhood (post skip merge), resampled per forward pass. The
/// rng stream advances once per affected neighbourhood per batch, in
/// ascending neighbourhood order; eps = 0 draws nothing.
inline Tensor noisy_forward(const NetworkSpec& net, const ParamStore& params, const Tensor& x,
                            const std::vector<int>& affected, double eps, Rng& rng) {
    Tensor cur = run_layers(net.stem, "stem", params, x, NormMode::Eval);
    for (const auto& nb : net.neighbourhoods) {
        cur = run_layers(nb.layers, nb_scope(nb.index), params, std::move(cur), NormMode::Eval);
        if (eps > 0 && std::find(affected.begin(), affected.end(), nb.index) != affected.end()) {
            Tensor noise = gaussian_sample(rng, cur.shape, 0.0, eps);
            for (std::size_t i = 0; i < cur.numel(); ++i) cur.data[i] += noise.data[i];
        }
    }
    return run_layers(net.head, "head", params, std::move(cur), NormMode::Eval);
}

inline PerturbEval eval_with_activation_noise(const NetworkSpec& net, const ParamStore& params,
                                              const Dataset& ds, const PerturbSpec& spec,
                                              int batch_size = 256) {
    if (!std::isfinite(spec.epsilon) || spec.epsilon < 0)
        throw std::invalid_argument("eval_with_activation_noise: eps must be finite and >= 0");
    for (int i : spec.affected_nbs)
        if (i < 0 || i >= static_cast<int>(net.neighbourhoods.size()))
            throw std::invalid_argument("eval_with_activation_noise: neighbourhood index out of range");
    if (spec.seeds.empty()) throw std::invalid_argument("eval_with_activation_noise: no seeds");
    PerturbEval out;
    out.baseline = evaluate(net, params, ds, batch_size);
    for (std::uint64_t seed : spec.seeds) {
        Rng rng = Rng(seed).split("act-noise");
        double acc = evaluate_forward(
            [&](const Tensor& x) { return noisy_forward(net, params, x, spec.affected_nbs, spec.epsilon, rng); },
            ds, batch_size);
        out.per_seed.push_back(acc);
    }
    detail::mean_sd(out.per_seed, out.mean, out.sd);
    return out;
}

// ---------------------------------------------------------------------------
// Threshold sweep
// ---------------------------------------------------------------------------

struct SweepRow {
    double epsilon = 0.0;
    std::vector<int> affected;
    int seed_count = 0;
    double acc_mean = 0.0;
    double acc_sd = 0.0;
    double baseline_acc = 0.0;
};

struct SweepResult {
    std::vector<SweepRow> rows;
    double baseline_acc = 0.0;
    std::vector<double> boundary_std;  // empirical activation std per boundary
};

inline constexpr const char* kSweepHeader =
    "epsilon,affected_count,affected_ids,seed_count,acc_mean,acc_sd,baseline_acc";

/// Full grid sweep: every (eps, affected-set) pair evaluated over the seed
/// list. Also records the empirical per-boundary activation std so the
/// absolute amplitudes can be read in context.
inline SweepResult sweep_threshold(const NetworkSpec& net, const ParamStore& params, const Dataset& ds,
                                   const std::vector<double>& eps_grid,
                                   const std::vector<std::vector<int>>& affected_grid,
                                   const std::vector<std::uint64_t>& seeds, int batch_size = 256) {
    SweepResult out;
    out.baseline_acc = evaluate(net, params, ds, batch_size);
    std::vector<Tensor> bounds = boundary_activations(net, params, ds.images, batch_size);
    for (const Tensor& b : bounds) {
        double mean = 0.0;
        for (float v : b.data) mean += v;
        mean /= static_cast<double>(b.numel());
        double var = 0.0;
        for (float v : b.data) var += (v - mean) * (v - mean);
        out.boundary_std.push_back(std::sqrt(var / static_cast<double>(b.numel())));
    }
    for (const auto& affected : affected_grid)
        for (double eps : eps_grid) {
            PerturbSpec spec;
            spec.epsilon = eps;
            spec.affected_nbs = affected;
            spec.seeds = seeds;
            PerturbEval ev = eval_with_activation_noise(net, params, ds, spec, batch_size);
            SweepRow row;
            row.epsilon = eps;
            row.affected = affected;
            row.seed_count = static_cast<int>(seeds.size());
            row.acc_mean = ev.mean;
            row.acc_sd = ev.sd;
            row.baseline_acc = out.baseline_acc;
            out.rows.push_back(std::move(row));
        }
    return out;
}

inline std::string join_ids(const std::vector<int>& ids) {
    std::ostringstream os;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) os << ';';
        os << ids[i];
    }
    return os.str();
}

inline void write_sweep_csv(const std::string& path, const SweepResult& result) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_sweep_csv: cannot open " + path);
    os << kSweepHeader << '\n';
    for (const SweepRow& r : result.rows)
        os << fmt_num(r.epsilon) << ',' << r.affected.size() << ',' << join_ids(r.affected) << ','
           << r.seed_count << ',' << fmt_num(r.acc_mean) << ',' << fmt_num(r.acc_sd) << ','
           << fmt_num(r.baseline_acc) << '\n';
}

/// Largest eps in the sweep (for the given affected set) whose mean accuracy
/// stays within `slack` points of baseline. Returns 0 when even the smallest
/// nonzero eps breaks it.
inline double threshold_estimate(const SweepResult& result, const std::vector<int>& affected,
                                 double slack = 1.0) {
    double best = 0.0;
    for (const SweepRow& r : result.rows)
        if (r.affected == affected && std::fabs(r.acc_mean - r.baseline_acc) < slack)
            best = std::max(best, r.epsilon);
    return best;
}

// ---------------------------------------------------------------------------
// Weight noise
// ---------------------------------------------------------------------------

/// Adds sigma-scaled Gaussian noise to each named weight tensor; the draw is
/// keyed by (seed, name), so the same perturbation can be reproduced and
/// reused across progressive evaluations.
inline ParamStore perturb_weights(const ParamStore& params, const std::vector<std::string>& names,
                                  double sigma, std::uint64_t seed) {
    ParamStore noisy;
    params.copy_into(noisy, "", "");
    if (sigma == 0.0) return noisy;
    for (const std::string& name : names) {
        Tensor& w = noisy.at(name).value;
        Rng rng = Rng(seed).split("weight-noise").split(name);
        Tensor noise = gaussian_sample(rng, w.shape, 0.0, sigma);
        for (std::size_t i = 0; i < w.numel(); ++i) w.data[i] += noise.data[i];
    }
    return noisy;
}

inline PerturbEval eval_with_weight_noise(const NetworkSpec& net, const ParamStore& params,
                                          const Dataset& ds, const std::vector<std::string>& names,
                                          double sigma, const std::vector<std::uint64_t>& seeds,
                                          int batch_size = 256) {
    if (!std::isfinite(sigma) || sigma < 0)
        throw std::invalid_argument("eval_with_weight_noise: sigma must be finite and >= 0");
    if (seeds.empty()) throw std::invalid_argument("eval_with_weight_noise: no seeds");
    PerturbEval out;
    out.baseline = evaluate(net, params, ds, batch_size);
    for (std::uint64_t seed : seeds) {
        ParamStore noisy = perturb_weights(params, names, sigma, seed);
        out.per_seed.push_back(evaluate(net, noisy, ds, batch_size));
    }
    detail::mean_sd(out.per_seed, out.mean, out.sd);
    return out;
}

struct WeightNoiseCalibration {
    double sigma = 0.0;
    double achieved_drop = 0.0;
    int evaluations = 0;
};

/// Bisects sigma until perturbing one layer costs `target_drop` accuracy
/// points within `tolerance` (seed-averaged). target_drop = 0 returns
/// sigma = 0 exactly.
inline WeightNoiseCalibration calibrate_weight_noise(const NetworkSpec& net, const ParamStore& params,
                                                     const Dataset& ds, const std::string& weight_name,
                                                     double target_drop, double tolerance,
                                                     const std::vector<std::uint64_t>& seeds,
                                                     int batch_size = 256, int max_evals = 40) {
    if (target_drop < 0) throw std::invalid_argument("calibrate_weight_noise: negative target drop");
    if (tolerance <= 0) throw std::invalid_argument("calibrate_weight_noise: tolerance must be positive");
    WeightNoiseCalibration cal;
    if (target_drop == 0.0) return cal;

    const double baseline = evaluate(net, params, ds, batch_size);
    auto drop_at = [&](double sigma) {
        std::vector<double> accs;
        for (std::uint64_t seed : seeds) {
            ParamStore noisy = perturb_weights(params, {weight_name}, sigma, seed);
            accs.push_back(evaluate(net, noisy, ds, batch_size));
        }
        double mean, sd;
        detail::mean_sd(accs, mean, sd);
        ++cal.evaluations;
        return baseline - mean;
    };

    double lo = 0.0, hi = 0.05, drop_hi = drop_at(hi);
    while (drop_hi < target_drop && hi < 1e4 && cal.evaluations < max_evals) {
        lo = hi;
        hi *= 2;
        drop_hi = drop_at(hi);
    }
    cal.sigma = hi;
    cal.achieved_drop = drop_hi;
    while (cal.evaluations < max_evals) {
        if (std::fabs(cal.achieved_drop - target_drop) <= tolerance) break;
        double mid = 0.5 * (lo + hi);
        double d = drop_at(mid);
        if (std::fabs(d - target_drop) < std::fabs(cal.achieved_drop - target_drop)) {
            cal.sigma = mid;
            cal.achieved_drop = d;
        }
        if (d < target_drop)
            lo = mid;
        else
            hi = mid;
    }
    return cal;
}

// ---------------------------------------------------------------------------
// Error accumulation
// ---------------------------------------------------------------------------

struct ErrorAccumulation {
    std::vector<std::string> layer_names;
    std::vector<double> individual;  // drop with only layer j perturbed
    std::vector<double> cumulative;  // drop with layers 0..j perturbed
    std::vector<double> additive;    // running sum of individual drops
    double baseline = 0.0;
};

/// Perturbs layers left to right with per-layer amplitudes, reusing the exact
/// same (seed, layer) noise draw in the single-layer and progressive
/// evaluations, and compares the measured cumulative drop against the
/// additive prediction.
inline ErrorAccumulation error_accumulation(const NetworkSpec& net, const ParamStore& params,
                                            const Dataset& ds, const std::vector<std::string>& names,
                                            const std::vector<double>& sigmas,
                                            const std::vector<std::uint64_t>& seeds, int batch_size = 256) {
    if (names.size() != sigmas.size())
        throw std::invalid_argument("error_accumulation: names/sigmas size mismatch");
    if (seeds.empty()) throw std::invalid_argument("error_accumulation: no seeds");
    ErrorAccumulation out;
    out.layer_names = names;
    out.baseline = evaluate(net, params, ds, batch_size);

    const std::size_t L = names.size();
    std::vector<std::vector<double>> indiv_acc(L), cum_acc(L);
    for (std::uint64_t seed : seeds) {
        for (std::size_t j = 0; j < L; ++j) {
            ParamStore noisy = perturb_weights(params, {names[j]}, sigmas[j], seed);
            indiv_acc[j].push_back(evaluate(net, noisy, ds, batch_size));
        }
        ParamStore progressive;
        params.copy_into(progressive, "", "");
        for (std::size_t j = 0; j < L; ++j) {
            if (sigmas[j] != 0.0) {
                Tensor& w = progressive.at(names[j]).value;
                Rng rng = Rng(seed).split("weight-noise").split(names[j]);
                Tensor noise = gaussian_sample(rng, w.shape, 0.0, sigmas[j]);
                for (std::size_t q = 0; q < w.numel(); ++q) w.data[q] += noise.data[q];
            }
            cum_acc[j].push_back(evaluate(net, progressive, ds, batch_size));
        }
    }
    double running = 0.0;
    for (std::size_t j = 0; j < L; ++j) {
        double m, sd;
        detail::mean_sd(indiv_acc[j], m, sd);
        out.individual.push_back(out.baseline - m);
        detail::mean_sd(cum_acc[j], m, sd);
        out.cumulative.push_back(out.baseline - m);
        running += out.individual.back();
        out.additive.push_back(running);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Noise-regularized teacher
// ---------------------------------------------------------------------------

/// Supervised training with Gaussian noise of std sigma injected after every
/// residual unit on the forward pass. sigma = 0 is bit-identical to plain
/// supervised training.
inline double train_noise_regularized_teacher(const NetworkSpec& net, ParamStore& params, const Dataset& ds,
                                              const NoiseRegSpec& spec, const TrainConfig& cfg,
                                              std::uint64_t seed, MetricsWriter* mw = nullptr,
                                              const std::string& exp_id = "") {
    if (!std::isfinite(spec.sigma) || spec.sigma < 0)
        throw std::invalid_argument("train_noise_regularized_teacher: sigma must be finite and >= 0");
    return train_supervised(net, params, ds, cfg, seed, spec.sigma, mw, exp_id, "train-noise-reg");
}

}  // namespace nd
