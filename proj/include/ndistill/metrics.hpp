#pragma once

#include <chrono>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>

namespace nd {

inline std::string fmt_num(double v) {
    std::ostringstream os;
    os.precision(10);
    os << v;
    return os.str();
}

inline constexpr const char* kMetricsHeader =
    "experiment_id,phase,step,wall_time_s,loss,accuracy,epsilon,neighbourhood_id,k,sparsity,params";

struct MetricRow {
    std::string experiment_id;
    std::string phase;
    std::optional<long> step;
    std::optional<double> wall_time_s;
    std::optional<double> loss;
    std::optional<double> accuracy;
    std::optional<double> epsilon;
    std::optional<int> neighbourhood_id;
    std::optional<double> k;
    std::optional<double> sparsity;
    std::optional<long long> params;

    std::string to_csv() const {
        auto num = [](const auto& o) { return o ? fmt_num(static_cast<double>(*o)) : std::string(); };
        std::ostringstream os;
        os << experiment_id << ',' << phase << ',' << (step ? std::to_string(*step) : "") << ','
           << num(wall_time_s) << ',' << num(loss) << ',' << num(accuracy) << ',' << num(epsilon) << ','
           << (neighbourhood_id ? std::to_string(*neighbourhood_id) : "") << ',' << num(k) << ','
           << num(sparsity) << ',' << (params ? std::to_string(*params) : "");
        return os.str();
    }
};

/// Append-only metrics log; every row is flushed so partial runs stay
/// readable.
class MetricsWriter {
public:
    MetricsWriter() = default;

    explicit MetricsWriter(const std::string& path) : os_(path) {
        if (!os_) throw std::runtime_error("metrics: cannot open " + path);
        os_ << kMetricsHeader << '\n';
        os_.flush();
    }

    void write(const MetricRow& row) {
        if (!os_.is_open()) return;
        os_ << row.to_csv() << '\n';
        os_.flush();
    }

    bool open() const { return os_.is_open(); }

private:
    std::ofstream os_;
};

class Stopwatch {
public:
    Stopwatch() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

}  // namespace nd
