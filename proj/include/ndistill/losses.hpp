#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "ndistill/tensor.hpp"

namespace nd {

/// Row-wise softmax of logits/temperature.
template <typename T>
TensorT<T> softmax(const TensorT<T>& logits, double temperature = 1.0) {
    if (logits.rank() != 2) throw std::invalid_argument("softmax: expected [N,K] logits");
    if (temperature <= 0) throw std::invalid_argument("softmax: temperature must be > 0");
    const int N = logits.shape[0], K = logits.shape[1];
    TensorT<T> p(logits.shape);
    for (int n = 0; n < N; ++n) {
        double mx = -1e300;
        for (int k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(logits.at2(n, k)) / temperature);
        double z = 0;
        for (int k = 0; k < K; ++k) {
            double e = std::exp(static_cast<double>(logits.at2(n, k)) / temperature - mx);
            p.at2(n, k) = static_cast<T>(e);
            z += e;
        }
        for (int k = 0; k < K; ++k) p.at2(n, k) = static_cast<T>(p.at2(n, k) / z);
    }
    return p;
}

/// Mean over the batch of -sum_k target * log softmax(logits / tau).
/// Target rows must sum to 1 within tolerance.
template <typename T>
double softmax_cross_entropy(const TensorT<T>& logits, const TensorT<T>& target, double tau,
                             TensorT<T>* dlogits = nullptr) {
    require_same_shape(logits, target, "softmax_cross_entropy");
    if (tau <= 0) throw std::invalid_argument("softmax_cross_entropy: tau must be > 0");
    const int N = logits.shape[0], K = logits.shape[1];
    if (dlogits) *dlogits = TensorT<T>(logits.shape);
    double loss = 0;
    for (int n = 0; n < N; ++n) {
        double tsum = 0;
        for (int k = 0; k < K; ++k) tsum += target.at2(n, k);
        if (std::abs(tsum - 1.0) > 1e-3)
            throw std::invalid_argument("softmax_cross_entropy: target row " + std::to_string(n) +
                                        " sums to " + std::to_string(tsum));
        double mx = -1e300;
        for (int k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(logits.at2(n, k)) / tau);
        double z = 0;
        for (int k = 0; k < K; ++k) z += std::exp(static_cast<double>(logits.at2(n, k)) / tau - mx);
        const double logz = std::log(z) + mx;
        for (int k = 0; k < K; ++k) {
            double logp = static_cast<double>(logits.at2(n, k)) / tau - logz;
            loss -= target.at2(n, k) * logp;
            if (dlogits)
                dlogits->at2(n, k) = static_cast<T>((std::exp(logp) - target.at2(n, k)) / (tau * N));
        }
    }
    return loss / N;
}

/// Mean squared error over every element.
template <typename T>
double mse(const TensorT<T>& a, const TensorT<T>& b) {
    require_same_shape(a, b, "mse");
    double s = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        double d = static_cast<double>(a.data[i]) - b.data[i];
        s += d * d;
    }
    return s / static_cast<double>(a.numel());
}

/// d mse(a,b) / da
template <typename T>
TensorT<T> mse_grad(const TensorT<T>& a, const TensorT<T>& b) {
    require_same_shape(a, b, "mse_grad");
    TensorT<T> g(a.shape);
    const double inv = 2.0 / static_cast<double>(a.numel());
    for (std::size_t i = 0; i < a.numel(); ++i)
        g.data[i] = static_cast<T>(inv * (static_cast<double>(a.data[i]) - b.data[i]));
    return g;
}

template <typename T>
TensorT<T> one_hot(const std::vector<int>& labels, int classes) {
    TensorT<T> t({static_cast<int>(labels.size()), classes});
    for (std::size_t n = 0; n < labels.size(); ++n) {
        if (labels[n] < 0 || labels[n] >= classes)
            throw std::invalid_argument("one_hot: label out of range");
        t.at2(static_cast<int>(n), labels[n]) = T(1);
    }
    return t;
}

/// KD objective: CE(softmax(teacher/tau), student at tau) plus
/// lambda * CE(one-hot labels, student at temperature 1). The soft term is
/// not tau^2-rescaled.
template <typename T>
double kd_loss(const TensorT<T>& teacher_logits, const TensorT<T>& student_logits,
               const std::vector<int>& labels, double tau, double lambda,
               TensorT<T>* dstudent = nullptr) {
    require_same_shape(teacher_logits, student_logits, "kd_loss");
    TensorT<T> soft_target = softmax(teacher_logits, tau);
    TensorT<T> dsoft;
    double loss = softmax_cross_entropy(student_logits, soft_target, tau, dstudent ? &dsoft : nullptr);
    TensorT<T> dhard;
    if (lambda > 0 || dstudent) {
        TensorT<T> hard = one_hot<T>(labels, student_logits.shape[1]);
        double hard_loss = softmax_cross_entropy(student_logits, hard, 1.0, dstudent ? &dhard : nullptr);
        loss += lambda * hard_loss;
    }
    if (dstudent) {
        *dstudent = dsoft;
        for (std::size_t i = 0; i < dstudent->numel(); ++i)
            dstudent->data[i] += static_cast<T>(lambda * dhard.data[i]);
    }
    return loss;
}

/// Percent of rows whose argmax matches the label; ties take the lowest index.
template <typename T>
double accuracy_percent(const TensorT<T>& logits, const std::vector<int>& labels) {
    const int N = logits.shape[0], K = logits.shape[1];
    if (static_cast<std::size_t>(N) != labels.size())
        throw std::invalid_argument("accuracy: batch size mismatch");
    int hits = 0;
    for (int n = 0; n < N; ++n) {
        int arg = 0;
        for (int k = 1; k < K; ++k)
            if (logits.at2(n, k) > logits.at2(n, arg)) arg = k;
        if (arg == labels[n]) ++hits;
    }
    return 100.0 * hits / N;
}

}  // namespace nd
