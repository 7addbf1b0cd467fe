#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ndistill/distill.hpp"

namespace nd {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::vector<std::string>& problems)
        : std::runtime_error(join(problems)), errors(problems) {}
    std::vector<std::string> errors;

private:
    static std::string join(const std::vector<std::string>& v) {
        std::ostringstream os;
        os << "config invalid:";
        for (const auto& e : v) os << "\n  - " << e;
        return os.str();
    }
};

inline const std::vector<std::string>& experiment_kinds() {
    static const std::vector<std::string> kinds = {
        "train-teacher", "cache",  "distill",  "compose",  "finetune", "perturb-sweep",
        "weight-accumulation", "search", "sparsify", "datafree", "report"};
    return kinds;
}

struct DatasetSpec {
    std::string source = "synthetic";  // synthetic | cifar10
    int classes = 10;
    int image_size = 12;
    int train_per_class = 60;
    int val_per_class = 20;
    int test_per_class = 20;
    double noise_level = 0.2;
    std::string dir;  // cifar10 binary directory
};

struct ModelSpec {
    std::string preset = "mini-resnet8";
    std::vector<int> widths;  // optional stage/block width override
};

struct ExperimentConfig {
    int schema_version = 1;
    std::string kind;
    std::string experiment_id;  // defaults to kind
    std::uint64_t seed = 0;
    std::string out_dir = "out";
    int workers = 1;

    DatasetSpec dataset;
    ModelSpec model;
    TrainConfig train;     // primary phase (teacher training / distillation)
    TrainConfig finetune;  // post-composition fine-tune

    std::vector<double> k_list;
    std::vector<double> s_list;
    std::vector<double> eps_grid;
    std::vector<double> x_grid = {0.1, 0.25, 0.5, 1.0, 2.0, 5.0};
    std::vector<std::vector<int>> affected_sets;
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};

    double alpha = 0.5;
    int lookahead_depth = 0;
    double noise_sigma = 0.0;
    std::string init = "auto";      // auto | teacher | random
    std::string source = "cache";   // cache | gaussian
    bool gaussian_rescale = false;
    int ramp_steps = 300;
    int hold_steps = 200;
    double target_drop = 0.05;
    double tolerance = 0.05;
    std::string teacher_checkpoint;
    std::string student_checkpoint;
    std::vector<std::string> students;
    std::string cache_dir;
    std::vector<std::string> runs;  // report inputs
};

namespace detail {

/// Parses JSON while rejecting duplicate keys inside any object.
inline nlohmann::json parse_json_strict(const std::string& text, std::vector<std::string>& errors) {
    std::vector<std::set<std::string>> scopes;
    auto cb = [&](int, nlohmann::json::parse_event_t event, nlohmann::json& parsed) {
        using ev = nlohmann::json::parse_event_t;
        if (event == ev::object_start) {
            scopes.emplace_back();
        } else if (event == ev::object_end) {
            if (!scopes.empty()) scopes.pop_back();
        } else if (event == ev::key) {
            const std::string k = parsed.get<std::string>();
            if (!scopes.empty() && !scopes.back().insert(k).second)
                errors.push_back("duplicate key '" + k + "'");
        }
        return true;
    };
    try {
        return nlohmann::json::parse(text, cb);
    } catch (const nlohmann::json::parse_error& e) {
        errors.push_back(std::string("not valid JSON: ") + e.what());
        return nlohmann::json::object();
    }
}

/// Field-by-field reader that records type errors and unknown keys with
/// their full paths.
class Reader {
public:
    Reader(const nlohmann::json& j, std::string path, std::vector<std::string>& errors)
        : j_(j), path_(std::move(path)), errors_(&errors) {}

    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key);
    }

    template <typename T>
    void get(const std::string& key, T& out) {
        if (!has(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            errors_->push_back("wrong type for " + at(key));
        }
    }

    const nlohmann::json* object(const std::string& key) {
        if (!has(key)) return nullptr;
        if (!j_.at(key).is_object()) {
            errors_->push_back(at(key) + " must be an object");
            return nullptr;
        }
        return &j_.at(key);
    }

    void finish() {
        for (const auto& [key, value] : j_.items())
            if (!seen_.count(key)) errors_->push_back("unknown key " + at(key));
    }

    std::string at(const std::string& key) const {
        return "'" + (path_.empty() ? key : path_ + "." + key) + "'";
    }

private:
    const nlohmann::json& j_;
    std::string path_;
    std::vector<std::string>* errors_;
    std::set<std::string> seen_;
};

inline void read_train(const nlohmann::json& j, const std::string& path, TrainConfig& t,
                       std::vector<std::string>& errors) {
    Reader r(j, path, errors);
    r.get("steps", t.steps);
    r.get("batch_size", t.batch_size);
    r.get("lr", t.lr);
    r.get("momentum", t.momentum);
    r.get("weight_decay", t.weight_decay);
    r.get("tau", t.tau);
    r.get("lambda", t.lambda);
    r.get("augment_shift", t.augment_shift);
    r.get("warmup_steps", t.warmup_steps);
    r.get("decay_factor", t.decay_factor);
    r.get("decay_every", t.decay_every);
    r.get("log_every", t.log_every);
    r.finish();
    if (t.steps < 0) errors.push_back(path + ".steps must be >= 0");
    if (t.batch_size <= 0) errors.push_back(path + ".batch_size must be > 0");
    if (t.tau <= 0) errors.push_back(path + ".tau must be > 0");
    if (t.lambda < 0) errors.push_back(path + ".lambda must be >= 0");
}

}  // namespace detail

/// Parses and validates a config document; every problem is reported with
/// its field path in one ConfigError.
inline ExperimentConfig validate_config(const std::string& text) {
    std::vector<std::string> errors;
    nlohmann::json j = detail::parse_json_strict(text, errors);
    if (!errors.empty()) throw ConfigError(errors);
    if (!j.is_object()) throw ConfigError({"top level must be an object"});

    ExperimentConfig c;
    // Desk-scale phase defaults: distillation at lr 1e-3, fine-tune at 1e-2.
    c.train.steps = 2000;
    c.train.batch_size = 64;
    c.train.lr = 1e-3;
    c.finetune.steps = 1000;
    c.finetune.batch_size = 64;
    c.finetune.lr = 1e-2;

    detail::Reader r(j, "", errors);
    r.get("schema_version", c.schema_version);
    if (c.schema_version != 1) errors.push_back("'schema_version' must be 1");
    r.get("kind", c.kind);
    if (c.kind.empty()) {
        errors.push_back("missing required key 'kind'");
    } else {
        const auto& kinds = experiment_kinds();
        if (std::find(kinds.begin(), kinds.end(), c.kind) == kinds.end()) {
            std::string known;
            for (const auto& k : kinds) known += (known.empty() ? "" : ", ") + k;
            errors.push_back("'kind' has unknown value '" + c.kind + "' (known: " + known + ")");
        }
    }
    if (r.has("seed")) {
        r.get("seed", c.seed);
    } else {
        errors.push_back("missing required key 'seed'");
    }
    r.get("experiment_id", c.experiment_id);
    if (c.experiment_id.empty()) c.experiment_id = c.kind;
    r.get("out_dir", c.out_dir);
    r.get("workers", c.workers);
    if (c.workers < 1) errors.push_back("'workers' must be >= 1");

    if (const nlohmann::json* dj = r.object("dataset")) {
        detail::Reader dr(*dj, "dataset", errors);
        dr.get("source", c.dataset.source);
        dr.get("classes", c.dataset.classes);
        dr.get("image_size", c.dataset.image_size);
        dr.get("train_per_class", c.dataset.train_per_class);
        dr.get("val_per_class", c.dataset.val_per_class);
        dr.get("test_per_class", c.dataset.test_per_class);
        dr.get("noise_level", c.dataset.noise_level);
        dr.get("dir", c.dataset.dir);
        dr.finish();
        if (c.dataset.source != "synthetic" && c.dataset.source != "cifar10")
            errors.push_back("'dataset.source' must be 'synthetic' or 'cifar10'");
        if (c.dataset.classes <= 1) errors.push_back("'dataset.classes' must be > 1");
        if (c.dataset.noise_level < 0) errors.push_back("'dataset.noise_level' must be >= 0");
        if (c.dataset.source == "cifar10" && c.dataset.dir.empty())
            errors.push_back("'dataset.dir' required for cifar10");
    }
    if (const nlohmann::json* mj = r.object("model")) {
        detail::Reader mr(*mj, "model", errors);
        mr.get("preset", c.model.preset);
        mr.get("widths", c.model.widths);
        mr.finish();
    }
    if (const nlohmann::json* tj = r.object("train")) detail::read_train(*tj, "train", c.train, errors);
    if (const nlohmann::json* fj = r.object("finetune"))
        detail::read_train(*fj, "finetune", c.finetune, errors);

    r.get("k_list", c.k_list);
    for (double k : c.k_list)
        if (k <= 0 || k > 1) errors.push_back("'k_list' entries must be in (0,1]");
    r.get("s_list", c.s_list);
    for (double s : c.s_list)
        if (s < 0 || s >= 1) errors.push_back("'s_list' entries must be in [0,1)");
    r.get("eps_grid", c.eps_grid);
    for (double e : c.eps_grid)
        if (e < 0) errors.push_back("'eps_grid' entries must be >= 0");
    r.get("x_grid", c.x_grid);
    for (double x : c.x_grid)
        if (x < 0) errors.push_back("'x_grid' entries must be >= 0");
    r.get("affected_sets", c.affected_sets);
    r.get("seeds", c.seeds);
    if (c.seeds.empty()) errors.push_back("'seeds' must not be empty");

    r.get("alpha", c.alpha);
    r.get("lookahead_depth", c.lookahead_depth);
    if (c.lookahead_depth < 0 || c.lookahead_depth > 2)
        errors.push_back("'lookahead_depth' must be 0, 1 or 2");
    r.get("noise_sigma", c.noise_sigma);
    if (c.noise_sigma < 0) errors.push_back("'noise_sigma' must be >= 0");
    r.get("init", c.init);
    if (c.init != "auto" && c.init != "teacher" && c.init != "random")
        errors.push_back("'init' must be auto, teacher or random");
    r.get("source", c.source);
    if (c.source != "cache" && c.source != "gaussian")
        errors.push_back("'source' must be cache or gaussian");
    r.get("gaussian_rescale", c.gaussian_rescale);
    r.get("ramp_steps", c.ramp_steps);
    if (c.ramp_steps < 1) errors.push_back("'ramp_steps' must be >= 1");
    r.get("hold_steps", c.hold_steps);
    if (c.hold_steps < 0) errors.push_back("'hold_steps' must be >= 0");
    r.get("target_drop", c.target_drop);
    if (c.target_drop < 0) errors.push_back("'target_drop' must be >= 0");
    r.get("tolerance", c.tolerance);
    if (c.tolerance <= 0) errors.push_back("'tolerance' must be > 0");
    r.get("teacher_checkpoint", c.teacher_checkpoint);
    r.get("student_checkpoint", c.student_checkpoint);
    r.get("students", c.students);
    r.get("cache_dir", c.cache_dir);
    r.get("runs", c.runs);
    r.finish();

    if (!errors.empty()) throw ConfigError(errors);
    return c;
}

inline ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError({"cannot open config file '" + path + "'"});
    std::ostringstream os;
    os << is.rdbuf();
    return validate_config(os.str());
}

/// The dataset triple a config describes; synthetic splits are disjoint by
/// split-keyed seeding, cifar10 is carved front-to-back from the files.
struct DataBundle {
    Dataset train;
    Dataset val;
    Dataset test;
};

inline DataBundle make_datasets(const DatasetSpec& spec, std::uint64_t seed) {
    DataBundle b;
    if (spec.source == "synthetic") {
        b.train = gen_synthetic(spec.train_per_class, spec.classes, spec.image_size, spec.image_size,
                                spec.noise_level, seed, "train");
        b.val = gen_synthetic(spec.val_per_class, spec.classes, spec.image_size, spec.image_size,
                              spec.noise_level, seed, "val");
        b.test = gen_synthetic(spec.test_per_class, spec.classes, spec.image_size, spec.image_size,
                               spec.noise_level, seed, "test");
        return b;
    }
    Dataset all = load_cifar10_binary(spec.dir);
    const int train_n = spec.train_per_class * spec.classes;
    const int val_n = spec.val_per_class * spec.classes;
    const int test_n = spec.test_per_class * spec.classes;
    if (train_n + val_n + test_n > all.size())
        throw ConfigError({"cifar10 directory holds fewer samples than the requested splits"});
    b.train = subset(all, 0, train_n, "train");
    b.val = subset(all, train_n, val_n, "val");
    b.test = subset(all, train_n + val_n, test_n, "test");
    auto [train_std, stats] = standardize(b.train);
    b.train = std::move(train_std);
    b.val = standardize(b.val, &stats).first;
    b.test = standardize(b.test, &stats).first;
    return b;
}

}  // namespace nd
