#pragma once

// Shared fixtures for the test binaries: scaled-down datasets and networks
// that keep each case well under a second, plus a single-neighbourhood
// linear network whose distillation optimum is known in closed form.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "ndistill/config.hpp"
#include "ndistill/distill.hpp"
#include "ndistill/network.hpp"

namespace ndt {

inline nd::Dataset tiny_data(int per_class = 6, int classes = 4, int hw = 8, double noise = 0.1,
                             std::uint64_t seed = 7, const std::string& split = "train") {
    return nd::gen_synthetic(per_class, classes, hw, hw, noise, seed, split);
}

inline nd::NetworkSpec tiny_net(int hw = 8, int classes = 4) {
    return nd::build_resnet("mini-resnet8", hw, classes, {4, 6, 6});
}

/// Teacher trained just enough to beat chance comfortably; shared by cases
/// that need a non-degenerate model but not a strong one.
struct TinyTeacher {
    nd::NetworkSpec net;
    nd::ParamStore params;
    nd::Dataset train, test;

    explicit TinyTeacher(int steps = 120, std::uint64_t seed = 11) {
        train = tiny_data(8, 4, 8, 0.1, 5, "train");
        test = tiny_data(6, 4, 8, 0.1, 5, "test");
        net = tiny_net();
        params = nd::init_network_params(net, seed);
        nd::TrainConfig cfg;
        cfg.steps = steps;
        cfg.batch_size = 16;
        cfg.lr = 0.02;
        nd::train_supervised(net, params, train, cfg, seed);
    }
};

/// One neighbourhood holding a single 1x1 conv: a pure linear map per
/// channel, so the MSE optimum against targets y = a*x is the weight a.
inline nd::NetworkSpec linear_net(float scale, nd::ParamStore& params, int hw = 4) {
    nd::NetworkSpec net;
    net.input_shape = {1, hw, hw};
    net.class_count = 2;
    nd::NeighbourhoodSpec nb;
    nb.index = 0;
    nb.layers = {nd::LayerSpec::conv(1, 1, 1, 1, nd::Padding::Valid)};
    nb.input_shape = {1, hw, hw};
    nb.output_shape = {1, hw, hw};
    net.neighbourhoods.push_back(nb);
    net.head = {nd::LayerSpec::global_avg_pool(), nd::LayerSpec::dense(1, 2)};
    nd::validate_network(net);

    params = nd::init_network_params(net, 3);
    params.at("nb0.l0.w").value.data[0] = scale;
    return net;
}

/// Two stacked 1x1-conv neighbourhoods computing x -> a*x -> b*a*x.
inline nd::NetworkSpec two_linear_net(float a, float b, nd::ParamStore& params, int hw = 4) {
    nd::NetworkSpec net;
    net.input_shape = {1, hw, hw};
    net.class_count = 2;
    for (int i = 0; i < 2; ++i) {
        nd::NeighbourhoodSpec nb;
        nb.index = i;
        nb.layers = {nd::LayerSpec::conv(1, 1, 1, 1, nd::Padding::Valid)};
        nb.input_shape = {1, hw, hw};
        nb.output_shape = {1, hw, hw};
        net.neighbourhoods.push_back(nb);
    }
    net.head = {nd::LayerSpec::global_avg_pool(), nd::LayerSpec::dense(1, 2)};
    nd::validate_network(net);
    params = nd::init_network_params(net, 3);
    params.at("nb0.l0.w").value.data[0] = a;
    params.at("nb1.l0.w").value.data[0] = b;
    return net;
}

/// Fresh scratch directory under the build tree.
inline std::string scratch_dir(const std::string& name) {
    std::string dir = "scratch/" + name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

}  // namespace ndt
