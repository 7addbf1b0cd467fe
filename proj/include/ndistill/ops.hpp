#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "ndistill/tensor.hpp"

namespace nd {

enum class Padding { Valid, Same };

namespace detail {

// C[m x n] (+)= A[m x k] * B[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
    if (!accumulate)
        for (std::size_t i = 0; i < static_cast<std::size_t>(m) * n; ++i) c[i] = T(0);
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<std::size_t>(i) * k;
        T* crow = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] (+)= A[m x k] * B[n x k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<std::size_t>(i) * k;
        T* crow = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* brow = b + static_cast<std::size_t>(j) * k;
            T acc = accumulate ? crow[j] : T(0);
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] = acc;
        }
    }
}

// C[m x n] (+)= A[k x m]^T * B[k x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
    if (!accumulate)
        for (std::size_t i = 0; i < static_cast<std::size_t>(m) * n; ++i) c[i] = T(0);
    for (int p = 0; p < k; ++p) {
        const T* arow = a + static_cast<std::size_t>(p) * m;
        const T* brow = b + static_cast<std::size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const T av = arow[i];
            T* crow = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw std::invalid_argument("matmul: expected rank-2 tensors");
    if (a.shape[1] != b.shape[0])
        throw std::invalid_argument("matmul: inner dimensions " + a.shape_str() + " vs " + b.shape_str());
    TensorT<T> c({a.shape[0], b.shape[1]});
    detail::gemm_nn(a.data.data(), b.data.data(), c.data.data(), a.shape[0], a.shape[1], b.shape[1], false);
    return c;
}

// ---------------------------------------------------------------------------
// conv2d: direct cross-correlation over NCHW via im2col + gemm.
// "same" pads with zeros, (k-1)/2 per side (odd kernels), so stride 1
// preserves H,W.
// ---------------------------------------------------------------------------

struct ConvDims {
    int pad = 0, out_h = 0, out_w = 0;
};

inline ConvDims conv_out_dims(int h, int w, int kh, int kw, int stride, Padding pad) {
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    ConvDims d;
    if (pad == Padding::Same) {
        if (kh % 2 == 0 || kw % 2 == 0)
            throw std::invalid_argument("conv2d: same padding requires odd kernel");
        d.pad = (kh - 1) / 2;
    }
    int eff_h = h + 2 * d.pad, eff_w = w + 2 * d.pad;
    if (kh > eff_h || kw > eff_w)
        throw std::invalid_argument("conv2d: kernel larger than padded input");
    d.out_h = (eff_h - kh) / stride + 1;
    d.out_w = (eff_w - kw) / stride + 1;
    return d;
}

namespace detail {

template <typename T>
void im2col(const TensorT<T>& x, int n, int kh, int kw, int stride, int pad, int oh, int ow, T* col) {
    const int C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int cols = oh * ow;
    std::size_t row = 0;
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj, ++row) {
                T* dst = col + row * cols;
                for (int i = 0; i < oh; ++i) {
                    int src_h = i * stride - pad + ki;
                    if (src_h < 0 || src_h >= H) {
                        for (int j = 0; j < ow; ++j) dst[static_cast<std::size_t>(i) * ow + j] = T(0);
                        continue;
                    }
                    for (int j = 0; j < ow; ++j) {
                        int src_w = j * stride - pad + kj;
                        dst[static_cast<std::size_t>(i) * ow + j] =
                            (src_w < 0 || src_w >= W) ? T(0) : x.at4(n, c, src_h, src_w);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, int kh, int kw, int stride, int pad, int oh, int ow, TensorT<T>& dx, int n) {
    const int C = dx.shape[1], H = dx.shape[2], W = dx.shape[3];
    const int cols = oh * ow;
    std::size_t row = 0;
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj, ++row) {
                const T* src = col + row * cols;
                for (int i = 0; i < oh; ++i) {
                    int dst_h = i * stride - pad + ki;
                    if (dst_h < 0 || dst_h >= H) continue;
                    for (int j = 0; j < ow; ++j) {
                        int dst_w = j * stride - pad + kj;
                        if (dst_w >= 0 && dst_w < W) dx.at4(n, c, dst_h, dst_w) += src[static_cast<std::size_t>(i) * ow + j];
                    }
                }
            }
        }
    }
}

}  // namespace detail

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, int stride, Padding pad) {
    if (x.rank() != 4 || w.rank() != 4)
        throw std::invalid_argument("conv2d: expected NCHW input and OCkk kernel");
    if (x.shape[1] != w.shape[1])
        throw std::invalid_argument("conv2d: channel mismatch, input C=" + std::to_string(x.shape[1]) +
                                    " kernel C=" + std::to_string(w.shape[1]));
    const int N = x.shape[0], O = w.shape[0], C = w.shape[1], kh = w.shape[2], kw = w.shape[3];
    ConvDims d = conv_out_dims(x.shape[2], x.shape[3], kh, kw, stride, pad);
    TensorT<T> y({N, O, d.out_h, d.out_w});
    const int ckk = C * kh * kw, hw = d.out_h * d.out_w;
    std::vector<T> col(static_cast<std::size_t>(ckk) * hw);
    for (int n = 0; n < N; ++n) {
        detail::im2col(x, n, kh, kw, stride, d.pad, d.out_h, d.out_w, col.data());
        detail::gemm_nn(w.data.data(), col.data(), &y.data[static_cast<std::size_t>(n) * O * hw], O, ckk, hw, false);
    }
    return y;
}

/// Gradients w.r.t. input and kernel; either sink may be null.
template <typename T>
void conv2d_backward(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& dy, int stride, Padding pad,
                     TensorT<T>* dx, TensorT<T>* dw) {
    const int N = x.shape[0], O = w.shape[0], C = w.shape[1], kh = w.shape[2], kw = w.shape[3];
    ConvDims d = conv_out_dims(x.shape[2], x.shape[3], kh, kw, stride, pad);
    const int ckk = C * kh * kw, hw = d.out_h * d.out_w;
    if (dx) *dx = TensorT<T>(x.shape);
    if (dw) *dw = TensorT<T>(w.shape);
    std::vector<T> col(static_cast<std::size_t>(ckk) * hw);
    std::vector<T> dcol(static_cast<std::size_t>(ckk) * hw);
    for (int n = 0; n < N; ++n) {
        const T* dyn = &dy.data[static_cast<std::size_t>(n) * O * hw];
        if (dw) {
            detail::im2col(x, n, kh, kw, stride, d.pad, d.out_h, d.out_w, col.data());
            detail::gemm_nt(dyn, col.data(), dw->data.data(), O, hw, ckk, true);
        }
        if (dx) {
            detail::gemm_tn(w.data.data(), dyn, dcol.data(), ckk, O, hw, false);
            detail::col2im_add(dcol.data(), kh, kw, stride, d.pad, d.out_h, d.out_w, *dx, n);
        }
    }
}

// ---------------------------------------------------------------------------
// dense: affine map on [N,F].
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> dense(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1)
        throw std::invalid_argument("dense: expected x[N,F], w[F,G], b[G]");
    if (x.shape[1] != w.shape[0] || w.shape[1] != b.shape[0])
        throw std::invalid_argument("dense: shape mismatch " + x.shape_str() + " * " + w.shape_str());
    TensorT<T> y = matmul(x, w);
    const int N = y.shape[0], G = y.shape[1];
    for (int n = 0; n < N; ++n)
        for (int g = 0; g < G; ++g) y.at2(n, g) += b.data[g];
    return y;
}

template <typename T>
void dense_backward(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& dy,
                    TensorT<T>* dx, TensorT<T>* dw, TensorT<T>* db) {
    const int N = x.shape[0], F = x.shape[1], G = w.shape[1];
    if (dx) {
        *dx = TensorT<T>(x.shape);
        detail::gemm_nt(dy.data.data(), w.data.data(), dx->data.data(), N, G, F, false);
    }
    if (dw) {
        *dw = TensorT<T>(w.shape);
        detail::gemm_tn(x.data.data(), dy.data.data(), dw->data.data(), F, N, G, false);
    }
    if (db) {
        *db = TensorT<T>({G});
        for (int n = 0; n < N; ++n)
            for (int g = 0; g < G; ++g) db->data[g] += dy.at2(n, g);
    }
}

// ---------------------------------------------------------------------------
// relu
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
    TensorT<T> y(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) y.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);
    return y;
}

template <typename T>
TensorT<T> relu_backward(const TensorT<T>& x, const TensorT<T>& upstream) {
    require_same_shape(x, upstream, "relu_backward");
    TensorT<T> dx(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) dx.data[i] = x.data[i] > T(0) ? upstream.data[i] : T(0);
    return dx;
}

// ---------------------------------------------------------------------------
// channel_norm: batch-style per-channel standardization over (N,H,W) with
// EMA running stats. Variance floor (eps) 1e-5, EMA momentum 0.9.
// ---------------------------------------------------------------------------

inline constexpr double kNormEps = 1e-5;
inline constexpr double kNormMomentum = 0.9;

enum class NormMode { Train, Eval };

/// Running statistics; `count` doubles as the populated flag (eval before
/// any train-mode batch is an error).
template <typename T>
struct NormStatsT {
    TensorT<T> mean;  // [C]
    TensorT<T> var;   // [C]
    double count = 0;
};
using NormStats = NormStatsT<float>;

/// Saved context for the train-mode backward pass.
template <typename T>
struct NormCtxT {
    TensorT<T> xhat;
    std::vector<T> invstd;  // per channel
    NormMode mode = NormMode::Train;
};

/// Train mode standardizes with batch statistics and, when `stats` is
/// non-null, folds them into the running EMA. Eval mode requires populated
/// running stats.
template <typename T>
TensorT<T> channel_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta, NormMode mode,
                        NormStatsT<T>* stats, NormCtxT<T>* ctx = nullptr) {
    if (x.rank() != 4) throw std::invalid_argument("channel_norm: expected NCHW input");
    const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    if (gamma.numel() != static_cast<std::size_t>(C) || beta.numel() != static_cast<std::size_t>(C))
        throw std::invalid_argument("channel_norm: gamma/beta must have C entries");

    std::vector<double> mean(C, 0.0), var(C, 0.0);
    if (mode == NormMode::Train) {
        const double m = static_cast<double>(N) * H * W;
        for (int c = 0; c < C; ++c) {
            double s = 0;
            for (int n = 0; n < N; ++n)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) s += x.at4(n, c, h, w);
            mean[c] = s / m;
            double v = 0;
            for (int n = 0; n < N; ++n)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) {
                        double d = x.at4(n, c, h, w) - mean[c];
                        v += d * d;
                    }
            var[c] = v / m;
        }
        if (stats) {
            if (stats->mean.numel() != static_cast<std::size_t>(C)) {
                stats->mean = TensorT<T>({C});
                stats->var = TensorT<T>::full({C}, T(1));
            }
            const double k = (stats->count == 0) ? 0.0 : kNormMomentum;
            for (int c = 0; c < C; ++c) {
                stats->mean.data[c] = static_cast<T>(k * stats->mean.data[c] + (1 - k) * mean[c]);
                stats->var.data[c] = static_cast<T>(k * stats->var.data[c] + (1 - k) * var[c]);
            }
            stats->count += 1;
        }
    } else {
        if (!stats || stats->count == 0)
            throw std::runtime_error("channel_norm: eval mode requires populated running stats");
        for (int c = 0; c < C; ++c) {
            mean[c] = stats->mean.data[c];
            var[c] = stats->var.data[c];
        }
    }

    TensorT<T> y(x.shape);
    if (ctx) {
        ctx->xhat = TensorT<T>(x.shape);
        ctx->invstd.assign(C, T(0));
        ctx->mode = mode;
    }
    for (int c = 0; c < C; ++c) {
        const double invstd = 1.0 / std::sqrt(var[c] + kNormEps);
        if (ctx) ctx->invstd[c] = static_cast<T>(invstd);
        const double g = gamma.data[c], b = beta.data[c], mu = mean[c];
        for (int n = 0; n < N; ++n)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    double xh = (x.at4(n, c, h, w) - mu) * invstd;
                    if (ctx) ctx->xhat.at4(n, c, h, w) = static_cast<T>(xh);
                    y.at4(n, c, h, w) = static_cast<T>(g * xh + b);
                }
    }
    return y;
}

/// Backward through channel_norm; in train mode the batch-statistic
/// dependence is included. Any sink may be null.
template <typename T>
void channel_norm_backward(const NormCtxT<T>& ctx, const TensorT<T>& gamma, const TensorT<T>& dy,
                           TensorT<T>* dx, TensorT<T>* dgamma, TensorT<T>* dbeta) {
    const TensorT<T>& xhat = ctx.xhat;
    const int N = xhat.shape[0], C = xhat.shape[1], H = xhat.shape[2], W = xhat.shape[3];
    const double m = static_cast<double>(N) * H * W;
    if (dgamma) *dgamma = TensorT<T>({C});
    if (dbeta) *dbeta = TensorT<T>({C});
    if (dx) *dx = TensorT<T>(xhat.shape);
    for (int c = 0; c < C; ++c) {
        double sum_dy = 0, sum_dy_xhat = 0;
        for (int n = 0; n < N; ++n)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    double d = dy.at4(n, c, h, w);
                    sum_dy += d;
                    sum_dy_xhat += d * xhat.at4(n, c, h, w);
                }
        if (dgamma) dgamma->data[c] = static_cast<T>(sum_dy_xhat);
        if (dbeta) dbeta->data[c] = static_cast<T>(sum_dy);
        if (!dx) continue;
        const double g = gamma.data[c], invstd = ctx.invstd[c];
        if (ctx.mode == NormMode::Eval) {
            for (int n = 0; n < N; ++n)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w)
                        dx->at4(n, c, h, w) = static_cast<T>(dy.at4(n, c, h, w) * g * invstd);
        } else {
            for (int n = 0; n < N; ++n)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) {
                        double d = dy.at4(n, c, h, w);
                        double xh = xhat.at4(n, c, h, w);
                        dx->at4(n, c, h, w) =
                            static_cast<T>(g * invstd / m * (m * d - sum_dy - xh * sum_dy_xhat));
                    }
        }
    }
}

// ---------------------------------------------------------------------------
// global average pool and flatten
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& x) {
    if (x.rank() != 4) throw std::invalid_argument("global_avg_pool: expected NCHW input");
    const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    TensorT<T> y({N, C});
    const double inv = 1.0 / (static_cast<double>(H) * W);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            double s = 0;
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) s += x.at4(n, c, h, w);
            y.at2(n, c) = static_cast<T>(s * inv);
        }
    return y;
}

template <typename T>
TensorT<T> global_avg_pool_backward(const std::vector<int>& in_shape, const TensorT<T>& dy) {
    const int N = in_shape[0], C = in_shape[1], H = in_shape[2], W = in_shape[3];
    TensorT<T> dx(in_shape);
    const T inv = static_cast<T>(1.0 / (static_cast<double>(H) * W));
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T g = dy.at2(n, c) * inv;
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) dx.at4(n, c, h, w) = g;
        }
    return dx;
}

template <typename T>
TensorT<T> flatten(const TensorT<T>& x) {
    int rest = 1;
    for (int i = 1; i < x.rank(); ++i) rest *= x.shape[i];
    return x.reshaped({x.shape[0], rest});
}

}  // namespace nd
