#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ndistill/distill.hpp"
#include "ndistill/metrics.hpp"
#include "ndistill/network.hpp"
#include "ndistill/sparsify.hpp"

namespace nd {

// ---------------------------------------------------------------------------
// Candidate records and selection. The budget is local: a candidate
// qualifies when the partial model (teacher with only that slot replaced)
// stays within x accuracy points of the teacher. Because the constraint is
// separable per slot, greedy per-slot minimization equals the exhaustive
// optimum; the oracle below exists to prove that on random instances.
// ---------------------------------------------------------------------------

struct CandidateRecord {
    int nb_index = 0;  // slot: neighbourhood index, or layer ordinal for sparsity search
    CandidateSpec spec;
    long long param_count = 0;
    double partial_accuracy = 0.0;
    int result_index = -1;  // position of the trained weights in the caller's result list
    bool failed = false;
};

struct SearchResult {
    std::vector<CandidateRecord> selection;  // one per slot, ascending slot index
    long long total_params = 0;
    double composed_acc_pre_ft = -1.0;
    double composed_acc_post_ft = -1.0;
    double budget_x = 0.0;
    int flagged_count = 0;
    std::vector<int> flagged_slots;
};

/// Builds records by scoring every trained candidate as a partial model on
/// the evaluation split. Failed candidates keep accuracy 0 and stay flagged.
inline std::vector<CandidateRecord> evaluate_candidates(const NetworkSpec& teacher,
                                                        const ParamStore& teacher_params,
                                                        const std::vector<DistillResult>& results,
                                                        const Dataset& eval_ds, int batch_size = 256) {
    std::vector<CandidateRecord> records;
    records.reserve(results.size());
    for (std::size_t r = 0; r < results.size(); ++r) {
        const DistillResult& res = results[r];
        CandidateRecord rec;
        rec.nb_index = res.candidate.nb_index;
        rec.spec = res.candidate;
        rec.param_count = param_count(res.candidate);
        rec.result_index = static_cast<int>(r);
        rec.failed = res.failed;
        if (!res.failed)
            rec.partial_accuracy =
                evaluate_replaced(teacher, teacher_params, res.candidate, res.params, eval_ds, batch_size);
        records.push_back(std::move(rec));
    }
    return records;
}

namespace detail {

inline std::map<int, std::vector<const CandidateRecord*>> group_by_slot(
    const std::vector<CandidateRecord>& records) {
    std::map<int, std::vector<const CandidateRecord*>> groups;
    for (const CandidateRecord& r : records) groups[r.nb_index].push_back(&r);
    if (groups.empty()) throw std::invalid_argument("search: no candidate records");
    return groups;
}

/// Fallback when nothing meets the budget: highest accuracy among non-failed
/// candidates, lower list position on ties.
inline const CandidateRecord* best_accuracy_fallback(const std::vector<const CandidateRecord*>& cands) {
    const CandidateRecord* best = nullptr;
    for (const CandidateRecord* c : cands) {
        if (c->failed) continue;
        if (!best || c->partial_accuracy > best->partial_accuracy) best = c;
    }
    if (!best) throw std::runtime_error("search: every candidate failed for slot " +
                                        std::to_string(cands.front()->nb_index));
    return best;
}

}  // namespace detail

/// Per slot: the smallest qualifying candidate; ties prefer higher partial
/// accuracy, then lower list position. Slots with no qualifier fall back to
/// the best-accuracy candidate and are flagged.
inline SearchResult greedy_select(const std::vector<CandidateRecord>& records, double teacher_accuracy,
                                  double x) {
    if (x < 0) throw std::invalid_argument("greedy_select: budget x must be >= 0");
    SearchResult out;
    out.budget_x = x;
    const double floor_acc = teacher_accuracy - x;
    for (auto& [slot, cands] : detail::group_by_slot(records)) {
        const CandidateRecord* pick = nullptr;
        for (const CandidateRecord* c : cands) {
            if (c->failed || c->partial_accuracy < floor_acc) continue;
            if (!pick || c->param_count < pick->param_count ||
                (c->param_count == pick->param_count && c->partial_accuracy > pick->partial_accuracy))
                pick = c;
        }
        if (!pick) {
            pick = detail::best_accuracy_fallback(cands);
            ++out.flagged_count;
            out.flagged_slots.push_back(slot);
        }
        out.selection.push_back(*pick);
        out.total_params += pick->param_count;
    }
    return out;
}

/// Exhaustive oracle: enumerates every combination of qualifying candidates
/// and returns the minimum total parameters (ties: maximum summed accuracy,
/// then lexicographically earliest). Slots with no qualifier contribute the
/// same flagged fallback as the greedy path, chosen independently here.
inline SearchResult exhaustive_select(const std::vector<CandidateRecord>& records, double teacher_accuracy,
                                      double x, std::uint64_t enumeration_cap = 2000000) {
    if (x < 0) throw std::invalid_argument("exhaustive_select: budget x must be >= 0");
    SearchResult out;
    out.budget_x = x;
    const double floor_acc = teacher_accuracy - x;

    std::vector<int> slots;
    std::vector<std::vector<const CandidateRecord*>> pools;  // qualifiers per enumerated slot
    std::vector<const CandidateRecord*> fixed;               // fallback picks, paired with slots order
    std::vector<bool> enumerated;

    for (auto& [slot, cands] : detail::group_by_slot(records)) {
        std::vector<const CandidateRecord*> q;
        for (const CandidateRecord* c : cands)
            if (!c->failed && c->partial_accuracy >= floor_acc) q.push_back(c);
        slots.push_back(slot);
        if (q.empty()) {
            fixed.push_back(detail::best_accuracy_fallback(cands));
            pools.emplace_back();
            enumerated.push_back(false);
            ++out.flagged_count;
            out.flagged_slots.push_back(slot);
        } else {
            fixed.push_back(nullptr);
            pools.push_back(std::move(q));
            enumerated.push_back(true);
        }
    }

    std::vector<std::size_t> sizes;
    for (std::size_t g = 0; g < pools.size(); ++g)
        if (enumerated[g]) sizes.push_back(pools[g].size());
    if (!sizes.empty() && count_search_space(sizes) > enumeration_cap)
        throw std::invalid_argument("exhaustive_select: search space exceeds enumeration cap");

    std::vector<std::size_t> odometer(pools.size(), 0);
    std::vector<const CandidateRecord*> best;
    long long best_params = 0;
    double best_acc = 0;
    for (;;) {
        std::vector<const CandidateRecord*> combo;
        long long params = 0;
        double acc = 0;
        for (std::size_t g = 0; g < pools.size(); ++g) {
            const CandidateRecord* c = enumerated[g] ? pools[g][odometer[g]] : fixed[g];
            combo.push_back(c);
            params += c->param_count;
            acc += c->partial_accuracy;
        }
        if (best.empty() || params < best_params || (params == best_params && acc > best_acc)) {
            best = combo;
            best_params = params;
            best_acc = acc;
        }
        // advance odometer over enumerated slots only
        std::size_t g = 0;
        for (; g < pools.size(); ++g) {
            if (!enumerated[g]) continue;
            if (++odometer[g] < pools[g].size()) break;
            odometer[g] = 0;
        }
        if (g == pools.size()) break;
    }

    for (const CandidateRecord* c : best) {
        out.selection.push_back(*c);
        out.total_params += c->param_count;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Mixed-rate sparsity selection: the same greedy machinery over per-layer
// sparsification results. A slot is a layer's ordinal in sparsifiable_layers
// order and its candidates are that layer at different final sparsities.
// ---------------------------------------------------------------------------

/// Surviving parameter count of one sparsified layer; pruned weights drop
/// out, the bias (dense layers) survives whole.
inline long long sparse_record_params(const SparseLayerResult& r) {
    long long n = 0;
    for (float v : r.weights.data)
        if (v != 0.0f) ++n;
    if (r.bias) n += static_cast<long long>(r.bias->numel());
    return n;
}

///// Scores every sparse layer result as a partial model: the teacher with
/// only that one layer swapped for its sparsified weights.
inline std::vector<CandidateRecord> evaluate_sparse_candidates(
    const NetworkSpec& teacher, const ParamStore& teacher_params, const std::vector<SparseTarget>& targets,
    const std::vector<SparseLayerResult>& results, const Dataset& eval_ds, int batch_size = 256) {
    auto slot_of = [&](const SparseTarget& t) {
        for (std::size_t i = 0; i < targets.size(); ++i)
            if (targets[i].weight_name() == t.weight_name()) return static_cast<int>(i);
        throw std::invalid_argument("evaluate_sparse_candidates: unknown layer " + t.label());
    };
    std::vector<CandidateRecord> records;
    records.reserve(results.size());
    for (std::size_t r = 0; r < results.size(); ++r) {
        const SparseLayerResult& res = results[r];
        CandidateRecord rec;
        rec.nb_index = slot_of(res.target);
        rec.param_count = sparse_record_params(res);
        rec.result_index = static_cast<int>(r);
        rec.failed = res.failed;
        if (!res.failed) {
            ParamStore swapped = sparse_compose(teacher_params, {res});
            rec.partial_accuracy = evaluate(teacher, swapped, eval_ds, batch_size);
        }
        records.push_back(std::move(rec));
    }
    return records;
}

/// Materializes a sparse selection over the teacher.
inline ParamStore compose_sparse_selection(const ParamStore& teacher_params,
                                           const std::vector<SparseLayerResult>& results,
                                           const SearchResult& sel) {
    std::vector<SparseLayerResult> picks;
    picks.reserve(sel.selection.size());
    for (const CandidateRecord& rec : sel.selection)
        picks.push_back(results.at(static_cast<std::size_t>(rec.result_index)));
    return sparse_compose(teacher_params, picks);
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

struct ParetoPoint {
    std::string source;  // search | uniform_bneck | uniform_width | search_sparsity | uniform_sparsity
    double x_or_k = 0.0;
    long long total_params = 0;
    double acc_pre_ft = 0.0;
    double acc_post_ft = 0.0;
    int flagged_count = 0;
};

inline constexpr const char* kParetoHeader = "source,x_or_k,total_params,acc_pre_ft,acc_post_ft,flagged_count";

inline void write_pareto_csv(const std::string& path, const std::vector<ParetoPoint>& points) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_pareto_csv: cannot open " + path);
    os << kParetoHeader << '\n';
    for (const ParetoPoint& p : points)
        os << p.source << ',' << fmt_num(p.x_or_k) << ',' << p.total_params << ',' << fmt_num(p.acc_pre_ft)
           << ',' << fmt_num(p.acc_post_ft) << ',' << p.flagged_count << '\n';
}

/// A point weakly dominates another when it is at least as small and at
/// least as accurate.
inline bool weakly_dominates(long long params_a, double acc_a, long long params_b, double acc_b) {
    return params_a <= params_b && acc_a >= acc_b;
}

}  // namespace nd
