#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <string>

#include "helpers.hpp"
#include "ndistill/config.hpp"

using namespace nd;
using Catch::Matchers::ContainsSubstring;

namespace {

std::string msg_of(const std::string& text) {
    try {
        validate_config(text);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST_CASE("minimal config fills the documented defaults") {
    ExperimentConfig c = validate_config(R"({"schema_version":1,"kind":"train-teacher","seed":7})");
    REQUIRE(c.kind == "train-teacher");
    REQUIRE(c.seed == 7);
    REQUIRE(c.experiment_id == "train-teacher");
    REQUIRE(c.out_dir == "out");
    REQUIRE(c.workers == 1);

    REQUIRE(c.dataset.source == "synthetic");
    REQUIRE(c.dataset.classes == 10);
    REQUIRE(c.dataset.image_size == 12);
    REQUIRE(c.dataset.train_per_class == 60);
    REQUIRE(c.dataset.noise_level == 0.2);
    REQUIRE(c.model.preset == "mini-resnet8");

    REQUIRE(c.train.steps == 2000);
    REQUIRE(c.train.batch_size == 64);
    REQUIRE(c.train.lr == 1e-3);
    REQUIRE(c.train.momentum == 0.9);
    REQUIRE(c.train.weight_decay == 0.0);
    REQUIRE(c.train.tau == 2.5);
    REQUIRE(c.train.lambda == 1.0);
    REQUIRE(c.finetune.steps == 1000);
    REQUIRE(c.finetune.lr == 1e-2);

    REQUIRE(c.x_grid == std::vector<double>{0.1, 0.25, 0.5, 1.0, 2.0, 5.0});
    REQUIRE(c.seeds == std::vector<std::uint64_t>{1, 2, 3, 4, 5});
    REQUIRE(c.alpha == 0.5);
    REQUIRE(c.lookahead_depth == 0);
    REQUIRE(c.init == "auto");
    REQUIRE(c.source == "cache");
    REQUIRE(c.ramp_steps == 300);
    REQUIRE(c.hold_steps == 200);
}

TEST_CASE("explicit fields override defaults") {
    ExperimentConfig c = validate_config(R"({
        "schema_version": 1, "kind": "distill", "seed": 3,
        "experiment_id": "run-a", "workers": 4, "out_dir": "results",
        "k_list": [0.5, 1.0],
        "dataset": {"classes": 4, "image_size": 8, "noise_level": 0.1},
        "train": {"steps": 50, "lr": 0.02, "tau": 2.0},
        "teacher_checkpoint": "t.ndck"
    })");
    REQUIRE(c.experiment_id == "run-a");
    REQUIRE(c.workers == 4);
    REQUIRE(c.out_dir == "results");
    REQUIRE(c.k_list == std::vector<double>{0.5, 1.0});
    REQUIRE(c.dataset.classes == 4);
    REQUIRE(c.train.steps == 50);
    REQUIRE(c.train.lr == 0.02);
    REQUIRE(c.train.tau == 2.0);
    REQUIRE(c.train.batch_size == 64);  // untouched default
    REQUIRE(c.teacher_checkpoint == "t.ndck");
}

TEST_CASE("missing required keys") {
    REQUIRE_THAT(msg_of(R"({"schema_version":1,"kind":"distill"})"),
                 ContainsSubstring("missing required key 'seed'"));
    REQUIRE_THAT(msg_of(R"({"schema_version":1,"seed":1})"),
                 ContainsSubstring("missing required key 'kind'"));
}

TEST_CASE("unknown kind lists the valid verbs") {
    std::string m = msg_of(R"({"schema_version":1,"kind":"frobnicate","seed":1})");
    REQUIRE_THAT(m, ContainsSubstring("frobnicate"));
    REQUIRE_THAT(m, ContainsSubstring("train-teacher"));
    REQUIRE_THAT(m, ContainsSubstring("perturb-sweep"));
}

TEST_CASE("duplicate keys are rejected") {
    std::string m = msg_of(R"({"schema_version":1,"kind":"cache","seed":1,"seed":2})");
    REQUIRE_THAT(m, ContainsSubstring("duplicate"));
    REQUIRE_THAT(m, ContainsSubstring("seed"));
}

TEST_CASE("unknown keys are reported with their dotted path") {
    std::string m = msg_of(R"({
        "schema_version": 1, "kind": "cache", "seed": 1,
        "dataset": {"classez": 10},
        "typo_top": true
    })");
    REQUIRE_THAT(m, ContainsSubstring("dataset.classez"));
    REQUIRE_THAT(m, ContainsSubstring("typo_top"));
}

TEST_CASE("range checks accumulate into one report") {
    std::string m = msg_of(R"({
        "schema_version": 1, "kind": "distill", "seed": 1,
        "workers": 0,
        "k_list": [0.0, 2.0],
        "s_list": [1.0],
        "train": {"batch_size": 0, "tau": 0}
    })");
    REQUIRE_THAT(m, ContainsSubstring("'workers' must be >= 1"));
    REQUIRE_THAT(m, ContainsSubstring("'k_list' entries must be in (0,1]"));
    REQUIRE_THAT(m, ContainsSubstring("'s_list' entries must be in [0,1)"));
    REQUIRE_THAT(m, ContainsSubstring("train.batch_size must be > 0"));
    REQUIRE_THAT(m, ContainsSubstring("train.tau must be > 0"));
}

TEST_CASE("type errors name the field") {
    std::string m = msg_of(R"({"schema_version":1,"kind":"cache","seed":"seven"})");
    REQUIRE_THAT(m, ContainsSubstring("seed"));
}

TEST_CASE("schema version gate") {
    REQUIRE_THAT(msg_of(R"({"schema_version":2,"kind":"cache","seed":1})"),
                 ContainsSubstring("'schema_version' must be 1"));
}

TEST_CASE("enumerated string fields are validated") {
    std::string m = msg_of(R"({
        "schema_version": 1, "kind": "datafree", "seed": 1,
        "init": "psychic", "source": "dreams",
        "dataset": {"source": "imagenet"}
    })");
    REQUIRE_THAT(m, ContainsSubstring("init"));
    REQUIRE_THAT(m, ContainsSubstring("source"));
    REQUIRE_THAT(m, ContainsSubstring("dataset.source"));
}

TEST_CASE("cifar10 needs a directory") {
    REQUIRE_THAT(msg_of(R"({
        "schema_version": 1, "kind": "cache", "seed": 1,
        "dataset": {"source": "cifar10"}
    })"),
                 ContainsSubstring("'dataset.dir' required for cifar10"));
}

TEST_CASE("malformed JSON is a config error, not a crash") {
    REQUIRE_THROWS_AS(validate_config("{\"kind\": "), ConfigError);
    REQUIRE_THROWS_AS(validate_config("[1,2,3]"), ConfigError);
}

TEST_CASE("load_config_file") {
    std::string dir = ndt::scratch_dir("config_file");
    std::string path = dir + "/exp.json";
    {
        std::ofstream os(path);
        os << R"({"schema_version":1,"kind":"compose","seed":11})";
    }
    ExperimentConfig c = load_config_file(path);
    REQUIRE(c.kind == "compose");
    REQUIRE(c.seed == 11);
    REQUIRE_THROWS_AS(load_config_file(dir + "/missing.json"), ConfigError);
}

TEST_CASE("synthetic data bundle splits are disjoint draws") {
    DatasetSpec spec;
    spec.classes = 3;
    spec.image_size = 8;
    spec.train_per_class = 4;
    spec.val_per_class = 2;
    spec.test_per_class = 2;
    DataBundle b = make_datasets(spec, 5);
    REQUIRE(b.train.size() == 12);
    REQUIRE(b.val.size() == 6);
    REQUIRE(b.test.size() == 6);
    REQUIRE(dataset_fingerprint(b.train) != dataset_fingerprint(b.val));
    REQUIRE(dataset_fingerprint(b.val) != dataset_fingerprint(b.test));

    // Reproducible from the seed alone.
    DataBundle b2 = make_datasets(spec, 5);
    REQUIRE(dataset_fingerprint(b2.train) == dataset_fingerprint(b.train));
}
