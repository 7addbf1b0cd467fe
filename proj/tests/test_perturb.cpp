#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <fstream>
#include <vector>

#include "helpers.hpp"
#include "ndistill/perturb.hpp"

using namespace nd;

namespace {

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    return std::memcmp(a.data.data(), b.data.data(), a.numel() * sizeof(float)) == 0;
}

struct PerturbFixture {
    NetworkSpec net;
    ParamStore params;
    Dataset ds;

    PerturbFixture() {
        net = ndt::tiny_net();
        params = init_network_params(net, 41);
        ds = ndt::tiny_data(5, 4, 8, 0.1, 14, "test");
        FullTape tape;
        net_forward_train(net, params, ds.images, tape);
    }
};

}  // namespace

TEST_CASE("zero amplitude activation noise is a bitwise no-op") {
    PerturbFixture f;
    Rng rng(1);
    Tensor clean = net_forward(f.net, f.params, f.ds.images);
    Tensor noisy = noisy_forward(f.net, f.params, f.ds.images, {0, 1, 2}, 0.0, rng);
    REQUIRE(bitwise_equal(noisy, clean));

    PerturbSpec spec;
    spec.epsilon = 0.0;
    spec.affected_nbs = {0, 1, 2};
    spec.seeds = {1, 2};
    PerturbEval ev = eval_with_activation_noise(f.net, f.params, f.ds, spec, 16);
    REQUIRE(ev.mean == ev.baseline);
    REQUIRE(ev.sd == 0.0);
}

TEST_CASE("activation noise only touches the affected neighbourhoods") {
    PerturbFixture f;
    // Huge noise on an unaffected set: output equals clean if the set is empty.
    Rng rng(2);
    Tensor out = noisy_forward(f.net, f.params, f.ds.images, {}, 100.0, rng);
    REQUIRE(bitwise_equal(out, net_forward(f.net, f.params, f.ds.images)));

    // With a nonempty set the output moves.
    Rng rng2(2);
    Tensor moved = noisy_forward(f.net, f.params, f.ds.images, {1}, 100.0, rng2);
    REQUIRE(!bitwise_equal(moved, out));

    PerturbSpec bad;
    bad.affected_nbs = {7};
    bad.epsilon = 0.1;
    REQUIRE_THROWS_AS(eval_with_activation_noise(f.net, f.params, f.ds, bad, 16), std::invalid_argument);
}

TEST_CASE("sweep grid shape and csv header") {
    PerturbFixture f;
    std::vector<double> eps = {0.0, 0.5};
    std::vector<std::vector<int>> affected = {{0}, {0, 1, 2}};
    SweepResult sweep = sweep_threshold(f.net, f.params, f.ds, eps, affected, {1, 2}, 16);

    REQUIRE(sweep.rows.size() == 4);
    REQUIRE(sweep.boundary_std.size() == 4);  // three neighbourhoods plus stem boundary
    for (double s : sweep.boundary_std) REQUIRE(s > 0.0);
    // eps = 0 rows sit exactly at baseline.
    for (const SweepRow& r : sweep.rows)
        if (r.epsilon == 0.0) REQUIRE(r.acc_mean == sweep.baseline_acc);

    std::string dir = ndt::scratch_dir("sweep_csv");
    write_sweep_csv(dir + "/sweep.csv", sweep);
    std::string text = ndt::read_file(dir + "/sweep.csv");
    REQUIRE(text.rfind("epsilon,affected_count,affected_ids,seed_count,acc_mean,acc_sd,baseline_acc\n", 0) == 0);
    REQUIRE(text.find("\n0.5,3,0;1;2,2,") != std::string::npos);
}

TEST_CASE("threshold estimate picks the largest safe epsilon") {
    SweepResult sweep;
    sweep.baseline_acc = 90.0;
    auto add = [&](double eps, std::vector<int> affected, double mean) {
        SweepRow r;
        r.epsilon = eps;
        r.affected = std::move(affected);
        r.acc_mean = mean;
        r.baseline_acc = 90.0;
        sweep.rows.push_back(r);
    };
    add(0.0, {0}, 90.0);
    add(0.1, {0}, 89.8);
    add(0.5, {0}, 89.4);
    add(1.0, {0}, 84.0);
    add(0.0, {0, 1}, 90.0);
    add(0.1, {0, 1}, 89.1);
    add(0.5, {0, 1}, 86.0);

    REQUIRE(threshold_estimate(sweep, {0}, 1.0) == 0.5);
    REQUIRE(threshold_estimate(sweep, {0, 1}, 1.0) == 0.1);
    // Tighter slack shrinks the threshold; an unknown set reports 0.
    REQUIRE(threshold_estimate(sweep, {0}, 0.3) == 0.1);
    REQUIRE(threshold_estimate(sweep, {2}, 1.0) == 0.0);
}

TEST_CASE("weight noise draws are keyed by seed and name") {
    PerturbFixture f;
    ParamStore a = perturb_weights(f.params, {"nb0.l1.w"}, 0.1, 9);
    ParamStore b = perturb_weights(f.params, {"nb0.l1.w"}, 0.1, 9);
    REQUIRE(bitwise_equal(a.at("nb0.l1.w").value, b.at("nb0.l1.w").value));
    REQUIRE(!bitwise_equal(a.at("nb0.l1.w").value, f.params.at("nb0.l1.w").value));
    // Untouched tensors stay identical.
    REQUIRE(bitwise_equal(a.at("nb0.l4.w").value, f.params.at("nb0.l4.w").value));

    // The draw for a name does not depend on which other names are perturbed.
    ParamStore c = perturb_weights(f.params, {"nb0.l4.w", "nb0.l1.w"}, 0.1, 9);
    REQUIRE(bitwise_equal(c.at("nb0.l1.w").value, a.at("nb0.l1.w").value));

    ParamStore d = perturb_weights(f.params, {"nb0.l1.w"}, 0.0, 9);
    REQUIRE(bitwise_equal(d.at("nb0.l1.w").value, f.params.at("nb0.l1.w").value));
}

TEST_CASE("weight noise calibration") {
    PerturbFixture f;

    SECTION("zero target returns zero sigma without evaluating") {
        WeightNoiseCalibration cal =
            calibrate_weight_noise(f.net, f.params, f.ds, "nb0.l1.w", 0.0, 0.05, {1, 2}, 16);
        REQUIRE(cal.sigma == 0.0);
        REQUIRE(cal.evaluations == 0);
    }
    SECTION("calibrated sigma reproduces the measured drop") {
        // An untrained tiny net still degrades monotonically on average, so
        // ask for a large drop that bisection can actually find.
        WeightNoiseCalibration cal =
            calibrate_weight_noise(f.net, f.params, f.ds, "stem.l0.w", 20.0, 8.0, {1, 2, 3}, 16, 24);
        REQUIRE(cal.evaluations <= 24);
        PerturbEval ev = eval_with_weight_noise(f.net, f.params, f.ds, {"stem.l0.w"}, cal.sigma, {1, 2, 3}, 16);
        REQUIRE(ev.baseline - ev.mean == Catch::Approx(cal.achieved_drop).margin(1e-9));
    }
    SECTION("argument checks") {
        REQUIRE_THROWS_AS(calibrate_weight_noise(f.net, f.params, f.ds, "stem.l0.w", -1.0, 0.1, {1}),
                          std::invalid_argument);
        REQUIRE_THROWS_AS(calibrate_weight_noise(f.net, f.params, f.ds, "stem.l0.w", 1.0, 0.0, {1}),
                          std::invalid_argument);
    }
}

TEST_CASE("error accumulation bookkeeping") {
    PerturbFixture f;
    std::vector<std::string> names = {"nb0.l1.w", "nb1.l1.w", "nb2.l1.w"};
    std::vector<double> sigmas = {0.3, 0.3, 0.3};
    ErrorAccumulation acc = error_accumulation(f.net, f.params, f.ds, names, sigmas, {1, 2}, 16);

    REQUIRE(acc.individual.size() == 3);
    REQUIRE(acc.cumulative.size() == 3);
    // The additive track is exactly the running sum of individual drops.
    REQUIRE(acc.additive[0] == Catch::Approx(acc.individual[0]));
    REQUIRE(acc.additive[1] == Catch::Approx(acc.individual[0] + acc.individual[1]));
    REQUIRE(acc.additive[2] == Catch::Approx(acc.individual[0] + acc.individual[1] + acc.individual[2]));
    // With one layer the cumulative and individual measurements use the very
    // same noise draw, so they agree to the bit.
    ErrorAccumulation one = error_accumulation(f.net, f.params, f.ds, {"nb1.l1.w"}, {0.3}, {1, 2}, 16);
    REQUIRE(one.cumulative[0] == one.individual[0]);

    REQUIRE_THROWS_AS(error_accumulation(f.net, f.params, f.ds, names, {0.3}, {1}, 16),
                      std::invalid_argument);
}

TEST_CASE("sigma zero noise regularization is plain supervised training") {
    Dataset train = ndt::tiny_data(6, 4, 8, 0.1, 5, "train");
    NetworkSpec net = ndt::tiny_net();
    TrainConfig cfg;
    cfg.steps = 25;
    cfg.batch_size = 8;
    cfg.lr = 0.02;

    ParamStore a = init_network_params(net, 13);
    ParamStore b = init_network_params(net, 13);
    train_noise_regularized_teacher(net, a, train, NoiseRegSpec{0.0}, cfg, 3);
    train_supervised(net, b, train, cfg, 3);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto& [name, p] = a.item(i);
        REQUIRE(bitwise_equal(p.value, b.at(name).value));
    }

    // Nonzero sigma changes the trajectory.
    ParamStore c = init_network_params(net, 13);
    train_noise_regularized_teacher(net, c, train, NoiseRegSpec{0.5}, cfg, 3);
    REQUIRE(!bitwise_equal(c.at("stem.l0.w").value, b.at("stem.l0.w").value));

    REQUIRE_THROWS_AS(train_noise_regularized_teacher(net, c, train, NoiseRegSpec{-0.1}, cfg, 3),
                      std::invalid_argument);
}
