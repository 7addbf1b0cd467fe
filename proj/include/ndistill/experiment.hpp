#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ndistill/cache.hpp"
#include "ndistill/checkpoint.hpp"
#include "ndistill/config.hpp"
#include "ndistill/perturb.hpp"
#include "ndistill/search.hpp"
#include "ndistill/sparsify.hpp"

namespace nd {

namespace detail {

inline std::string k_tag(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << v;
    std::string s = os.str();
    for (char& c : s) {
        if (c == '.') c = 'p';
    }
    return s;
}

inline std::vector<std::vector<std::string>> read_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("read_csv: cannot open " + path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (line.back() == ',') cells.emplace_back();
        rows.push_back(std::move(cells));
    }
    return rows;
}

inline std::string join_cells(const std::vector<std::string>& cells) {
    std::ostringstream os;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) os << ',';
        os << cells[i];
    }
    return os.str();
}

inline std::vector<int> all_neighbourhood_ids(const NetworkSpec& net) {
    std::vector<int> ids;
    for (std::size_t i = 0; i < net.neighbourhoods.size(); ++i) ids.push_back(static_cast<int>(i));
    return ids;
}

inline InitMode parse_init(const std::string& s) {
    if (s == "teacher") return InitMode::TeacherCopy;
    if (s == "random") return InitMode::Random;
    return InitMode::Auto;
}

inline std::vector<int> preset_widths(const ModelSpec& m) {
    if (!m.widths.empty()) return m.widths;
    if (m.preset == "resnet20-cifar") return {16, 32, 64};
    return {8, 16, 16};
}

}  // namespace detail

/// Resolves kind-specific defaults the schema leaves open.
inline ExperimentConfig resolve_defaults(ExperimentConfig cfg) {
    if (cfg.k_list.empty()) cfg.k_list = cfg.kind == "search" ? std::vector<double>{0.25, 0.5, 0.75, 1.0}
                                                              : std::vector<double>{1.0};
    if (cfg.s_list.empty()) cfg.s_list = {0.3, 0.5, 0.7, 0.9};
    if (cfg.eps_grid.empty())
        cfg.eps_grid = {0.0, 0.01, 0.02, 0.05, 0.1, 0.15, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0};
    // Long phases always leave heartbeat rows behind.
    if (cfg.train.log_every <= 0) cfg.train.log_every = 100;
    if (cfg.finetune.log_every <= 0) cfg.finetune.log_every = 100;
    return cfg;
}

/// Checks that every artifact the kind consumes is actually present; these
/// are validation failures, not runtime ones.
inline void check_artifacts(const ExperimentConfig& cfg) {
    namespace fs = std::filesystem;
    std::vector<std::string> errs;
    const bool needs_teacher = cfg.kind != "train-teacher" && cfg.kind != "report";
    if (needs_teacher) {
        if (cfg.teacher_checkpoint.empty())
            errs.push_back("'teacher_checkpoint' is required for kind '" + cfg.kind + "'");
        else if (!fs::exists(cfg.teacher_checkpoint))
            errs.push_back("'teacher_checkpoint' not found: " + cfg.teacher_checkpoint);
    }
    if (cfg.kind == "compose") {
        if (cfg.students.empty()) errs.push_back("'students' must list at least one candidate checkpoint");
        for (const std::string& s : cfg.students)
            if (!fs::exists(s)) errs.push_back("'students' entry not found: " + s);
    }
    if (cfg.kind == "finetune" && !cfg.student_checkpoint.empty() && !fs::exists(cfg.student_checkpoint))
        errs.push_back("'student_checkpoint' not found: " + cfg.student_checkpoint);
    if ((cfg.kind == "distill" || cfg.kind == "search") && !cfg.cache_dir.empty() &&
        !fs::exists(cfg.cache_dir))
        errs.push_back("'cache_dir' not found: " + cfg.cache_dir);
    if (cfg.kind == "report") {
        if (cfg.runs.empty()) errs.push_back("'runs' must list at least one run directory");
        for (const std::string& r : cfg.runs)
            if (!fs::is_directory(r)) errs.push_back("'runs' entry is not a directory: " + r);
    }
    if (!errs.empty()) throw ConfigError(errs);
}

namespace detail {

/// Boundary activations for the training split: loaded from an existing
/// cache directory (fingerprint-checked against the dataset) or computed
/// fresh when none is configured.
inline std::vector<Tensor> obtain_boundaries(const ExperimentConfig& cfg, const NetworkSpec& net,
                                             const ParamStore& params, const Dataset& train) {
    const int n_bounds = static_cast<int>(net.neighbourhoods.size()) + 1;
    std::vector<Tensor> bounds;
    if (!cfg.cache_dir.empty()) {
        const std::uint64_t fp = dataset_fingerprint(train);
        for (int b = 0; b < n_bounds; ++b)
            bounds.push_back(load_activation_cache(boundary_cache_path(cfg.cache_dir, b), fp).acts);
    } else {
        bounds = boundary_activations(net, params, train.images, cfg.train.batch_size);
    }
    return bounds;
}

inline DistillJob make_job(const ExperimentConfig& cfg, const NeighbourhoodSpec& nb, double k,
                           std::size_t job_index, SourceKind source, InitMode init) {
    DistillJob j;
    j.candidate = make_candidate(nb, k);
    j.train = cfg.train;
    j.seed = Rng(cfg.seed).split("distill-job", job_index).next_u64();
    j.init = init;
    j.source = source;
    j.lookahead_depth = cfg.lookahead_depth;
    j.lookahead_alpha = cfg.alpha;
    j.gaussian_rescale = cfg.gaussian_rescale;
    return j;
}

inline void log_distill_results(MetricsWriter& mw, const ExperimentConfig& cfg,
                                const std::vector<DistillJob>& jobs,
                                const PoolResult<DistillResult>& pr) {
    for (std::size_t i = 0; i < pr.results.size(); ++i) {
        const DistillResult& r = pr.results[i];
        const long stride = std::max(1L, static_cast<long>(cfg.train.log_every));
        for (std::size_t t = stride - 1; t < r.loss_trace.size(); t += stride) {
            MetricRow row;
            row.experiment_id = cfg.experiment_id;
            row.phase = "distill";
            row.step = static_cast<long>(t);
            row.loss = r.loss_trace[t];
            row.neighbourhood_id = r.candidate.nb_index;
            row.k = r.candidate.k;
            mw.write(row);
        }
        MetricRow row;
        row.experiment_id = cfg.experiment_id;
        row.phase = "distill-job";
        row.step = static_cast<long>(jobs[i].train.steps);
        row.wall_time_s = r.seconds;
        row.loss = r.final_loss;
        row.neighbourhood_id = r.candidate.nb_index;
        row.k = r.candidate.k;
        row.params = param_count(r.candidate);
        mw.write(row);
    }
    double seq = 0.0;
    for (const JobTiming& t : pr.timings) seq += t.seconds;
    MetricRow wall;
    wall.experiment_id = cfg.experiment_id;
    wall.phase = "distill-wall";
    wall.wall_time_s = pr.wall_seconds;
    mw.write(wall);
    MetricRow seqrow;
    seqrow.experiment_id = cfg.experiment_id;
    seqrow.phase = "distill-seq";
    seqrow.wall_time_s = seq;
    mw.write(seqrow);
}

inline void throw_if_failed(const std::vector<DistillResult>& results, const std::string& verb) {
    std::string msg;
    for (const DistillResult& r : results)
        if (r.failed)
            msg += (msg.empty() ? "" : "; ") + ("nb" + std::to_string(r.candidate.nb_index) + " k=" +
                                                k_tag(r.candidate.k) + ": " + r.diagnostic);
    if (!msg.empty()) throw std::runtime_error(verb + ": distillation failed: " + msg);
}

inline void log_eval(MetricsWriter& mw, const ExperimentConfig& cfg, const std::string& phase, double acc,
                     long long params, double wall) {
    MetricRow row;
    row.experiment_id = cfg.experiment_id;
    row.phase = phase;
    row.accuracy = acc;
    row.params = params;
    row.wall_time_s = wall;
    mw.write(row);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Verbs
// ---------------------------------------------------------------------------

inline void run_train_teacher(const ExperimentConfig& cfg, MetricsWriter& mw) {
    DataBundle data = make_datasets(cfg.dataset, cfg.seed);
    NetworkSpec net =
        build_resnet(cfg.model.preset, cfg.dataset.image_size, cfg.dataset.classes, cfg.model.widths);
    ParamStore params = init_network_params(net, cfg.seed);
    Stopwatch sw;
    if (cfg.noise_sigma > 0.0) {
        train_noise_regularized_teacher(net, params, data.train, NoiseRegSpec{cfg.noise_sigma}, cfg.train,
                                        cfg.seed, &mw, cfg.experiment_id);
    } else {
        train_supervised(net, params, data.train, cfg.train, cfg.seed, 0.0, &mw, cfg.experiment_id,
                         "train-teacher");
    }
    detail::log_eval(mw, cfg, "eval-val", evaluate(net, params, data.val), param_count(net), sw.seconds());
    detail::log_eval(mw, cfg, "eval-test", evaluate(net, params, data.test), param_count(net), sw.seconds());
    save_checkpoint(net, params, cfg.out_dir + "/teacher.ndck");
}

inline void run_cache(const ExperimentConfig& cfg, MetricsWriter& mw) {
    auto [net, params] = load_checkpoint(cfg.teacher_checkpoint);
    DataBundle data = make_datasets(cfg.dataset, cfg.seed);
    const std::string dir = cfg.cache_dir.empty() ? cfg.out_dir + "/cache" : cfg.cache_dir;
    Stopwatch sw;
    std::vector<std::string> paths = cache_all_boundaries(net, params, data.train, dir, cfg.train.batch_size);
    for (std::size_t b = 0; b < paths.size(); ++b) {
        MetricRow row;
        row.experiment_id = cfg.experiment_id;
        row.phase = "cache";
        row.neighbourhood_id = static_cast<int>(b);
        row.wall_time_s = sw.seconds();
        mw.write(row);
    }
}

inline void run_distill(const ExperimentConfig& cfg, MetricsWriter& mw) {
    auto [net, tp] = load_checkpoint(cfg.teacher_checkpoint);
    DataBundle data = make_datasets(cfg.dataset, cfg.seed);
    const SourceKind source = cfg.source == "gaussian" ? SourceKind::Gaussian : SourceKind::Cache;
    const InitMode init = detail::parse_init(cfg.init);

    std::vector<Tensor> bounds;
    if (source == SourceKind::Cache) bounds = detail::obtain_boundaries(cfg, net, tp, data.train);

    std::vector<DistillJob> jobs;
    for (double k : cfg.k_list)
        for (const NeighbourhoodSpec& nb : net.neighbourhoods)
            jobs.push_back(detail::make_job(cfg, nb, k, jobs.size(), source, init));

    PoolResult<DistillResult> pr = distill_all(net, tp, jobs, bounds, cfg.workers);
    detail::log_distill_results(mw, cfg, jobs, pr);
    detail::throw_if_failed(pr.results, "distill");

    nlohmann::json manifest = nlohmann::json::array();
    for (const DistillResult& r : pr.results) {
        const std::string path = cfg.out_dir + "/student_nb" + std::to_string(r.candidate.nb_index) +
                                 "_k" + detail::k_tag(r.candidate.k) + ".ndck";
        save_candidate_checkpoint(r.candidate, r.params, path);
        manifest.push_back(path);
    }
    std::ofstream os(cfg.out_dir + "/students.json");
    os << manifest.dump(2) << '\n';
}

inline void run_compose(const ExperimentConfig& cfg, MetricsWriter& mw) {
    auto [net, tp] = load_checkpoint(cfg.teacher_checkpoint);
    std::vector<DistillResult> picks;
    for (const std::string& path : cfg.students) {
        auto [cand, ps] = load_candidate_checkpoint(path);
        DistillResult r;
        r.candidate = std::move(cand);
        r.params = std::move(ps);
        picks.push_back(std::move(r));
    }
    ComposedModel m = compose_students(net, tp, picks);
    DataBundle data = make_datasets(cfg.dataset, cfg.seed);
    Stopwatch sw;
    detail::log_eval(mw, cfg, "compose-eval", evaluate(m.net, m.params, data.test), param_count(m.net),
                     sw.seconds());
    save_checkpoint(m.net, m.params, cfg.out_dir + "/composed.ndck");
}

inline void run_finetune(const ExperimentConfig& cfg, MetricsWriter& mw) {
    auto [tnet, tp] = load_checkpoint(cfg.teacher_checkpoint);
    DataBundle data = make_datasets(cfg.dataset, cfg.seed);
    Stopwatch sw;
    if (!cfg.student_checkpoint.empty()) {
        auto [snet, sp] = load_checkpoint(cfg.student_checkpoint);
        detail::log_eval(mw, cfg, "eval-pre", evaluate(snet, sp, data.test), param_count(snet), sw.seconds());
        kd_finetune(snet, sp, tnet, tp, data.train, cfg.finetune, cfg.seed, &mw, cfg.experiment_id,
                    "finetune");
        detail::log_eval(mw, cfg, "eval-post", evaluate(snet, sp, data.test), param_count(snet),
                         sw.seconds());
        save_checkpoint(snet, sp, cfg.out_dir + "/finetuned.ndck");
        return;
    }
    // No student given: train the KD-from-scratch baseline on the teacher's
    // own architecture, with the full training budget.
    NetworkSpec snet = tnet;
    ParamStore sp = init_network_params(snet, Rng(cfg.seed).split("kd-student").next_u64());
    kd_finetune(snet, sp, tnet, tp, data.train, cfg.train, cfg.seed, &mw, cfg.experiment_id, "kd-e2e");
    detail::log_eval(mw, cfg, "eval-post", evaluate(snet, sp, data.test), param_count(snet), sw.seconds());
    save_checkpoint(snet, sp, cfg.out_dir + "/kd_student.ndck");
}

inline void run_perturb_sweep(const ExperimentConfig& cfg, MetricsWriter& mw) {
    auto [net, tp] = load_checkpoint(cfg.teacher_checkpoint);
    DataBundle data = make_datasets(cfg.dataset, cfg.seed);
    std::vector<std::vector<int>> affected = cfg.affected_sets;
    if (affected.empty()) affected = {detail::all_neighbourhood_ids(net)};

    SweepResult res = sweep_threshold(net, tp, data.test, cfg.eps_grid, affected, cfg.seeds);
    write_sweep_csv(cfg.out_dir + "/sweep.csv", res);

    std::ofstream act(cfg.out_dir + "/activation_std.csv");
    act << "boundary,std\n";
    for (std::size_t b = 0; b < res.boundary_std.size(); ++b)
        act << b << ',' << fmt_num(res.boundary_std[b]) << '\n';

    std::ofstream th(cfg.out_dir + "/thresholds.csv");
    th << "affected_count,affected_ids,epsilon_threshold\n";
    for (const auto& aset : affected)
        th << aset.size() << ',' << join_ids(aset) << ',' << fmt_num(threshold_estimate(res, aset)) << '\n';

    for (const SweepRow& r : res.rows) {
        MetricRow row;
        row.experiment_id = cfg.experiment_id;
        row.phase = "perturb";
        row.epsilon = r.epsilon;
        row.accuracy = r.acc_mean;
        if (r.affected.size() == 1) row.neighbourhood_id = r.affected[0];
        mw.write(row);
    }
}

inline void run_weight_accumulation(const ExperimentConfig& cfg, MetricsWriter& mw) {
    auto [net, tp] = load_checkpoint(cfg.teacher_checkpoint);
    DataBundle data = make_datasets(cfg.dataset, cfg.seed);
    std::vector<SparseTarget> targets = sparsifiable_layers(net);
    std::vector<std::string> names;
    std::vector<double> sigmas;
    for (const SparseTarget& t : targets) {
        names.push_back(t.weight_name());
        WeightNoiseCalibration cal = calibrate_weight_noise(net, tp, data.test, names.back(),
                                                            cfg.target_drop, cfg.tolerance, cfg.seeds);
        sigmas.push_back(cal.sigma);
        MetricRow row;
        row.experiment_id = cfg.experiment_id;
        row.phase = "calibrate";
        row.epsilon = cal.sigma;
        row.loss = cal.achieved_drop;
        row.step = static_cast<long>(names.size()) - 1;
        mw.write(row);
    }
    ErrorAccumulation ea = error_accumulation(net, tp, data.test, names, sigmas, cfg.seeds);
    std::ofstream os(cfg.out_dir + "/accumulation.csv");
    os << "layer_index,layer,sigma,individual_drop,cumulative_drop,additive_prediction,baseline\n";
    for (std::size_t j = 0; j < names.size(); ++j) {
        os << j << ',' << targets[j].label() << ',' << fmt_num(sigmas[j]) << ','
           << fmt_num(ea.individual[j]) << ',' << fmt_num(ea.cumulative[j]) << ','
           << fmt_num(ea.additive[j]) << ',' << fmt_num(ea.baseline) << '\n';
        MetricRow row;
        row.experiment_id = cfg.experiment_id;
        row.phase = "weight-accum";
        row.step = static_cast<long>(j);
        row.epsilon = sigmas[j];
        row.loss = ea.cumulative[j];
        row.accuracy = ea.baseline - ea.cumulative[j];
        mw.write(row);
    }
}

inline void run_search(const ExperimentConfig& cfg, MetricsWriter& mw) {
    auto [net, tp] = load_checkpoint(cfg.teacher_checkpoint);
    DataBundle data = make_datasets(cfg.dataset, cfg.seed);
    std::vector<Tensor> bounds = detail::obtain_boundaries(cfg, net, tp, data.train);

    std::vector<DistillJob> jobs;
    for (double k : cfg.k_list)
        for (const NeighbourhoodSpec& nb : net.neighbourhoods)
            jobs.push_back(detail::make_job(cfg, nb, k, jobs.size(), SourceKind::Cache,
                                            detail::parse_init(cfg.init)));
    PoolResult<DistillResult> pr = distill_all(net, tp, jobs, bounds, cfg.workers);
    detail::log_distill_results(mw, cfg, jobs, pr);

    std::vector<CandidateRecord> records = evaluate_candidates(net, tp, pr.results, data.val);
    std::ofstream cands(cfg.out_dir + "/candidates.csv");
    cands << "nb_index,k,param_count,partial_accuracy,failed\n";
    for (const CandidateRecord& r : records)
        cands << r.nb_index << ',' << fmt_num(r.spec.k) << ',' << r.param_count << ','
              << fmt_num(r.partial_accuracy) << ',' << (r.failed ? 1 : 0) << '\n';

    const double teacher_val = evaluate(net, tp, data.val);
    std::vector<ParetoPoint> points;

    auto score_picks = [&](const std::vector<const DistillResult*>& picks, const std::string& source,
                           double x_or_k, int flagged) {
        std::vector<DistillResult> owned;
        owned.reserve(picks.size());
        for (const DistillResult* p : picks) {
            DistillResult r;
            r.candidate = p->candidate;
            p->params.copy_into(r.params, "", "");
            owned.push_back(std::move(r));
        }
        ComposedModel m = compose_students(net, tp, owned);
        ParetoPoint pt;
        pt.source = source;
        pt.x_or_k = x_or_k;
        pt.total_params = param_count(m.net);
        pt.acc_pre_ft = evaluate(m.net, m.params, data.test);
        pt.flagged_count = flagged;
        if (cfg.finetune.steps > 0)
            kd_finetune(m.net, m.params, net, tp, data.train, cfg.finetune,
                        Rng(cfg.seed).split("search-ft", points.size()).next_u64());
        pt.acc_post_ft = evaluate(m.net, m.params, data.test);
        points.push_back(pt);
        MetricRow row;
        row.experiment_id = cfg.experiment_id;
        row.phase = "search-" + source;
        row.k = x_or_k;
        row.accuracy = pt.acc_pre_ft;
        row.params = pt.total_params;
        mw.write(row);
    };

    for (double x : cfg.x_grid) {
        SearchResult sr = greedy_select(records, teacher_val, x);
        std::vector<const DistillResult*> picks;
        for (const CandidateRecord& rec : sr.selection)
            picks.push_back(&pr.results[static_cast<std::size_t>(rec.result_index)]);
        score_picks(picks, "search", x, sr.flagged_count);
    }

    for (double k : cfg.k_list) {
        std::vector<const DistillResult*> picks;
        bool usable = true;
        for (const CandidateRecord& rec : records)
            if (rec.spec.k == k) {
                if (rec.failed) usable = false;
                picks.push_back(&pr.results[static_cast<std::size_t>(rec.result_index)]);
            }
        if (usable && picks.size() == net.neighbourhoods.size())
            score_picks(picks, "uniform_bneck", k, 0);
    }

    for (std::size_t ki = 0; ki < cfg.k_list.size(); ++ki) {
        const double k = cfg.k_list[ki];
        std::vector<int> widths;
        for (int w : detail::preset_widths(cfg.model)) widths.push_back(scaled_width(w, k));
        NetworkSpec wnet =
            build_resnet(cfg.model.preset, cfg.dataset.image_size, cfg.dataset.classes, widths);
        ParamStore wp = init_network_params(wnet, Rng(cfg.seed).split("uniform-width", ki).next_u64());
        train_supervised(wnet, wp, data.train, cfg.train,
                         Rng(cfg.seed).split("uw-train", ki).next_u64(), 0.0, &mw, cfg.experiment_id,
                         "uniform-width");
        ParetoPoint pt;
        pt.source = "uniform_width";
        pt.x_or_k = k;
        pt.total_params = param_count(wnet);
        pt.acc_pre_ft = pt.acc_post_ft = evaluate(wnet, wp, data.test);
        points.push_back(pt);
    }

    std::sort(points.begin(), points.end(), [](const ParetoPoint& a, const ParetoPoint& b) {
        return a.total_params < b.total_params;
    });
    write_pareto_csv(cfg.out_dir + "/pareto.csv", points);
}

inline void run_sparsify(const ExperimentConfig& cfg, MetricsWriter& mw) {
    auto [net, tp] = load_checkpoint(cfg.teacher_checkpoint);
    DataBundle data = make_datasets(cfg.dataset, cfg.seed);
    std::vector<SparseTarget> targets = sparsifiable_layers(net);
    std::vector<std::pair<Tensor, Tensor>> ios;
    for (const SparseTarget& t : targets) ios.push_back(layer_io(net, tp, data.train.images, t));

    std::ofstream layer_csv(cfg.out_dir + "/sparsity.csv");
    layer_csv << "sparsity,layer,achieved_sparsity,final_loss\n";

    std::vector<SparseLayerResult> all_results;
    std::vector<ParetoPoint> points;
    for (std::size_t si = 0; si < cfg.s_list.size(); ++si) {
        const double s = cfg.s_list[si];
        SparsitySchedule sched{s, cfg.ramp_steps, cfg.hold_steps};
        std::vector<std::function<SparseLayerResult()>> fns;
        for (std::size_t t = 0; t < targets.size(); ++t) {
            const std::uint64_t seed = Rng(cfg.seed).split("sparse", si * 1000 + t).next_u64();
            fns.push_back([&, t, sched, seed] {
                return distill_sparse_layer(net, tp, targets[t], ios[t].first, ios[t].second, sched,
                                            cfg.train, seed);
            });
        }
        PoolResult<SparseLayerResult> pr = run_jobs(fns, cfg.workers);
        for (const SparseLayerResult& r : pr.results) {
            if (r.failed)
                throw std::runtime_error("sparsify: layer " + r.target.label() + " failed: " + r.diagnostic);
            layer_csv << fmt_num(s) << ',' << r.target.label() << ',' << fmt_num(r.achieved_sparsity)
                      << ',' << fmt_num(r.final_loss) << '\n';
            layer_csv.flush();
        }
        ParamStore sp = sparse_compose(tp, pr.results);
        const double acc = evaluate(net, sp, data.test);
        MetricRow row;
        row.experiment_id = cfg.experiment_id;
        row.phase = "sparsify";
        row.sparsity = s;
        row.accuracy = acc;
        row.params = nonzero_param_count(sp);
        row.wall_time_s = pr.wall_seconds;
        mw.write(row);
        save_checkpoint(net, sp, cfg.out_dir + "/sparse_s" + detail::k_tag(s) + ".ndck");

        ParetoPoint pt;
        pt.source = "uniform_sparsity";
        pt.x_or_k = s;
        pt.total_params = nonzero_param_count(sp);
        pt.acc_pre_ft = acc;
        pt.acc_post_ft = acc;
        points.push_back(pt);
        all_results.insert(all_results.end(), pr.results.begin(), pr.results.end());
    }

    // Mixed-rate selection: each layer may keep its own sparsity, picked by
    // the same local-budget rule that drives the width search.
    if (!cfg.x_grid.empty() && !all_results.empty()) {
        const double teacher_val_acc = evaluate(net, tp, data.val);
        std::vector<CandidateRecord> records =
            evaluate_sparse_candidates(net, tp, targets, all_results, data.val);
        for (double x : cfg.x_grid) {
            SearchResult sel = greedy_select(records, teacher_val_acc, x);
            ParamStore mixed = compose_sparse_selection(tp, all_results, sel);
            ParetoPoint pt;
            pt.source = "search_sparsity";
            pt.x_or_k = x;
            pt.total_params = nonzero_param_count(mixed);
            pt.acc_pre_ft = evaluate(net, mixed, data.test);
            pt.acc_post_ft = pt.acc_pre_ft;
            pt.flagged_count = sel.flagged_count;
            points.push_back(pt);
            detail::log_eval(mw, cfg, "sparsity-search", pt.acc_pre_ft, pt.total_params, 0.0);
        }
        write_pareto_csv(cfg.out_dir + "/sparsity_pareto.csv", points);
    }
}

inline void run_datafree(const ExperimentConfig& cfg, MetricsWriter& mw) {
    auto [net, tp] = load_checkpoint(cfg.teacher_checkpoint);
    DataBundle data = make_datasets(cfg.dataset, cfg.seed);
    // Noise-only training must not start from the teacher's weights, so
    // "auto" resolves to random initialization here.
    const InitMode init = cfg.init == "teacher" ? InitMode::TeacherCopy : InitMode::Random;
    // The end-to-end phases share the neighbourhood jobs' input scaling.
    const double gin = cfg.gaussian_rescale ? input_scale_estimate(net, tp) : 1.0;

    std::vector<DistillJob> jobs;
    for (double k : cfg.k_list)
        for (const NeighbourhoodSpec& nb : net.neighbourhoods)
            jobs.push_back(detail::make_job(cfg, nb, k, jobs.size(), SourceKind::Gaussian, init));
    PoolResult<DistillResult> pr = distill_all(net, tp, jobs, std::vector<Tensor>{}, cfg.workers);
    detail::log_distill_results(mw, cfg, jobs, pr);
    detail::throw_if_failed(pr.results, "datafree");

    std::vector<ParetoPoint> points;
    const std::size_t nbs = net.neighbourhoods.size();
    for (std::size_t ki = 0; ki < cfg.k_list.size(); ++ki) {
        std::vector<DistillResult> picks;
        for (std::size_t i = 0; i < nbs; ++i) {
            const DistillResult& src = pr.results[ki * nbs + i];
            DistillResult r;
            r.candidate = src.candidate;
            src.params.copy_into(r.params, "", "");
            picks.push_back(std::move(r));
        }
        ComposedModel m = compose_students(net, tp, picks);
        ParetoPoint pt;
        pt.source = "g-nd";
        pt.x_or_k = cfg.k_list[ki];
        pt.total_params = param_count(m.net);
        pt.acc_pre_ft = evaluate(m.net, m.params, data.test);
        // Fine-tuning stays data-free: soft targets on fresh noise.
        train_kd_gaussian_end2end(m.net, m.params, net, tp, cfg.finetune,
                                  Rng(cfg.seed).split("gn-ft", ki).next_u64(), gin, &mw, cfg.experiment_id);
        pt.acc_post_ft = evaluate(m.net, m.params, data.test);
        points.push_back(pt);
        detail::log_eval(mw, cfg, "g-nd-eval", pt.acc_post_ft, pt.total_params, 0.0);
        save_checkpoint(m.net, m.params, cfg.out_dir + "/gnd_k" + detail::k_tag(pt.x_or_k) + ".ndck");
    }

    NetworkSpec snet = net;
    ParamStore sp = init_network_params(snet, Rng(cfg.seed).split("gn-kd").next_u64());
    train_kd_gaussian_end2end(snet, sp, net, tp, cfg.train, Rng(cfg.seed).split("gn-kd-train").next_u64(),
                              gin, &mw, cfg.experiment_id);
    ParetoPoint base;
    base.source = "gn-kd";
    base.x_or_k = 1.0;
    base.total_params = param_count(snet);
    base.acc_pre_ft = base.acc_post_ft = evaluate(snet, sp, data.test);
    points.push_back(base);
    detail::log_eval(mw, cfg, "gn-kd-eval", base.acc_pre_ft, base.total_params, 0.0);
    write_pareto_csv(cfg.out_dir + "/datafree.csv", points);
}

// ---------------------------------------------------------------------------
// Reporting across runs
// ---------------------------------------------------------------------------

struct TimingRow {
    std::string run;
    std::string phase;
    double seconds = 0.0;
};

/// Per-phase wall times from each run's metrics.csv (maximum stopwatch value
/// seen within the phase), plus derived rows: distill speed-up, and the
/// ND-total vs KD-baseline ratio when both pipelines are present.
inline std::vector<TimingRow> collect_timing(const std::vector<std::string>& run_dirs) {
    std::vector<TimingRow> rows;
    double nd_total = 0.0, kd_total = 0.0;
    for (const std::string& run : run_dirs) {
        const std::string path = run + "/metrics.csv";
        if (!std::filesystem::exists(path)) continue;
        std::map<std::string, double> phase_wall;
        std::vector<std::string> order;
        for (const auto& cells : detail::read_csv(path)) {
            if (cells.size() < 4 || cells[0] == "experiment_id") continue;
            const std::string& phase = cells[1];
            if (cells[3].empty()) continue;
            const double wall = std::stod(cells[3]);
            if (!phase_wall.count(phase)) order.push_back(phase);
            phase_wall[phase] = std::max(phase_wall[phase], wall);
        }
        for (const std::string& phase : order) rows.push_back({run, phase, phase_wall[phase]});
        if (phase_wall.count("distill-seq") && phase_wall.count("distill-wall") &&
            phase_wall["distill-wall"] > 0)
            rows.push_back({run, "distill-speedup", phase_wall["distill-seq"] / phase_wall["distill-wall"]});
        if (phase_wall.count("distill-wall")) nd_total += phase_wall["distill-wall"];
        if (phase_wall.count("finetune")) nd_total += phase_wall["finetune"];
        if (phase_wall.count("kd-e2e")) kd_total += phase_wall["kd-e2e"];
    }
    if (nd_total > 0) rows.push_back({"(all)", "nd-total", nd_total});
    if (kd_total > 0) rows.push_back({"(all)", "kd-total", kd_total});
    if (nd_total > 0 && kd_total > 0) rows.push_back({"(all)", "nd-kd-ratio", nd_total / kd_total});
    return rows;
}

namespace detail {

/// Concatenates one artifact across runs with a leading `run` column; returns
/// false when no run has it.
inline bool merge_artifact(const std::vector<std::string>& run_dirs, const std::string& name,
                           const std::string& out_path) {
    std::ofstream os;
    for (const std::string& run : run_dirs) {
        const std::string path = run + "/" + name;
        if (!std::filesystem::exists(path)) continue;
        auto rows = read_csv(path);
        if (rows.empty()) continue;
        if (!os.is_open()) {
            os.open(out_path);
            os << "run," << join_cells(rows[0]) << '\n';
        }
        for (std::size_t i = 1; i < rows.size(); ++i) os << run << ',' << join_cells(rows[i]) << '\n';
    }
    return os.is_open();
}

}  // namespace detail

/// Figure bundles: threshold sweeps, pareto fronts (sorted by parameter
/// count), error accumulation with the additive prediction recomputed, the
/// regularized-teacher thresholds and the data-free table. Returns the paths
/// written.
inline std::vector<std::string> write_figure_bundles(const std::vector<std::string>& run_dirs,
                                                     const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::vector<std::string> written;
    auto note = [&](const std::string& p, bool ok) {
        if (ok) written.push_back(p);
    };

    const std::string fig1 = out_dir + "/fig1_threshold.csv";
    note(fig1, detail::merge_artifact(run_dirs, "sweep.csv", fig1));

    // Pareto rows merge then sort ascending by total_params (column 3 after
    // the run prefix).
    {
        std::vector<std::vector<std::string>> merged;
        std::string header;
        for (const std::string& run : run_dirs) {
            const std::string path = run + "/pareto.csv";
            if (!fs::exists(path)) continue;
            auto rows = detail::read_csv(path);
            if (rows.empty()) continue;
            header = detail::join_cells(rows[0]);
            for (std::size_t i = 1; i < rows.size(); ++i) {
                rows[i].insert(rows[i].begin(), run);
                merged.push_back(std::move(rows[i]));
            }
        }
        if (!header.empty()) {
            std::sort(merged.begin(), merged.end(),
                      [](const std::vector<std::string>& a, const std::vector<std::string>& b) {
                          return std::stoll(a[3]) < std::stoll(b[3]);
                      });
            const std::string fig3 = out_dir + "/fig3_pareto.csv";
            std::ofstream os(fig3);
            os << "run," << header << '\n';
            for (const auto& r : merged) os << detail::join_cells(r) << '\n';
            written.push_back(fig3);
        }
    }

    // Accumulation rows gain a recomputed additive column so the prediction
    // can be checked against the stored one.
    {
        std::ofstream os;
        for (const std::string& run : run_dirs) {
            const std::string path = run + "/accumulation.csv";
            if (!fs::exists(path)) continue;
            auto rows = detail::read_csv(path);
            if (rows.size() < 2) continue;
            if (!os.is_open()) {
                os.open(out_dir + "/fig8_accumulation.csv");
                os << "run," << detail::join_cells(rows[0]) << ",additive_recomputed\n";
            }
            double running = 0.0;
            for (std::size_t i = 1; i < rows.size(); ++i) {
                running += std::stod(rows[i][3]);
                os << run << ',' << detail::join_cells(rows[i]) << ',' << fmt_num(running) << '\n';
            }
        }
        if (os.is_open()) written.push_back(out_dir + "/fig8_accumulation.csv");
    }

    const std::string fig9 = out_dir + "/fig9_thresholds.csv";
    note(fig9, detail::merge_artifact(run_dirs, "thresholds.csv", fig9));
    const std::string fig10 = out_dir + "/fig10_datafree.csv";
    note(fig10, detail::merge_artifact(run_dirs, "datafree.csv", fig10));
    return written;
}

inline void run_report(const ExperimentConfig& cfg, MetricsWriter& mw) {
    std::vector<std::string> written = write_figure_bundles(cfg.runs, cfg.out_dir);
    std::vector<TimingRow> timing = collect_timing(cfg.runs);
    std::ofstream os(cfg.out_dir + "/timing.csv");
    os << "run,phase,seconds\n";
    for (const TimingRow& t : timing) os << t.run << ',' << t.phase << ',' << fmt_num(t.seconds) << '\n';
    MetricRow row;
    row.experiment_id = cfg.experiment_id;
    row.phase = "report";
    row.step = static_cast<long>(written.size());
    mw.write(row);
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

inline void run_experiment(const ExperimentConfig& cfg0) {
    ExperimentConfig cfg = resolve_defaults(cfg0);
    check_artifacts(cfg);
    std::filesystem::create_directories(cfg.out_dir);
    MetricsWriter mw(cfg.out_dir + "/metrics.csv");

    if (cfg.kind == "train-teacher") return run_train_teacher(cfg, mw);
    if (cfg.kind == "cache") return run_cache(cfg, mw);
    if (cfg.kind == "distill") return run_distill(cfg, mw);
    if (cfg.kind == "compose") return run_compose(cfg, mw);
    if (cfg.kind == "finetune") return run_finetune(cfg, mw);
    if (cfg.kind == "perturb-sweep") return run_perturb_sweep(cfg, mw);
    if (cfg.kind == "weight-accumulation") return run_weight_accumulation(cfg, mw);
    if (cfg.kind == "search") return run_search(cfg, mw);
    if (cfg.kind == "sparsify") return run_sparsify(cfg, mw);
    if (cfg.kind == "datafree") return run_datafree(cfg, mw);
    if (cfg.kind == "report") return run_report(cfg, mw);
    throw ConfigError({"'kind' has unknown value '" + cfg.kind + "'"});
}

/// CLI entry: loads the config, applies flag overrides and maps failures to
/// exit codes (1 validation, 2 runtime). A non-empty `expected_kind` must
/// match the config's kind.
inline int run_cli(const std::string& config_path, const std::string& expected_kind,
                   const std::uint64_t* seed_override, const int* workers_override,
                   const std::string* out_override, std::ostream& err) {
    try {
        ExperimentConfig cfg = load_config_file(config_path);
        if (!expected_kind.empty() && cfg.kind != expected_kind)
            throw ConfigError({"config 'kind' is '" + cfg.kind + "' but the subcommand is '" +
                               expected_kind + "'"});
        if (seed_override) cfg.seed = *seed_override;
        if (workers_override) {
            if (*workers_override < 1) throw ConfigError({"'workers' must be >= 1"});
            cfg.workers = *workers_override;
        }
        if (out_override) cfg.out_dir = *out_override;
        run_experiment(cfg);
        return 0;
    } catch (const ConfigError& e) {
        err << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
}

}  // namespace nd
