#pragma once

#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "docparse/common.hpp"

// Low-level dense kernels. Parallel loops only ever split the *output*;
// every reduction runs sequentially in a fixed order, so results are bitwise
// identical for any thread count.

namespace docparse::detail {

inline int kernel_threads() {
#ifdef _OPENMP
    int cap = max_threads();
    int hw = omp_get_max_threads();
    return cap > 0 ? std::min(cap, hw) : hw;
#else
    return 1;
#endif
}

// C[M,N] (+)= A[M,K] * B[K,N]
template <typename S>
void gemm_nn(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
#pragma omp parallel for schedule(static) num_threads(kernel_threads())
    for (int64_t i = 0; i < m; ++i) {
        S* crow = c + i * n;
        if (!accumulate) {
            for (int64_t j = 0; j < n; ++j) crow[j] = S(0);
        }
        const S* arow = a + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const S av = arow[p];
            if (av == S(0)) continue;
            const S* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M,N] (+)= A[M,K] * B[N,K]^T   (dot-product form; both operands row-contiguous)
template <typename S>
void gemm_nt(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
#pragma omp parallel for schedule(static) num_threads(kernel_threads())
    for (int64_t i = 0; i < m; ++i) {
        const S* arow = a + i * k;
        S* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const S* brow = b + j * k;
            S acc = S(0);
            for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] = accumulate ? crow[j] + acc : acc;
        }
    }
}

// C[M,N] (+)= A[K,M]^T * B[K,N]
template <typename S>
void gemm_tn(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
#pragma omp parallel for schedule(static) num_threads(kernel_threads())
    for (int64_t i = 0; i < m; ++i) {
        S* crow = c + i * n;
        if (!accumulate) {
            for (int64_t j = 0; j < n; ++j) crow[j] = S(0);
        }
        for (int64_t p = 0; p < k; ++p) {
            const S av = a[p * m + i];
            if (av == S(0)) continue;
            const S* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

struct ConvDims {
    int64_t batch, c_in, h, w;
    int64_t c_out, k, stride, pad, groups;
    int64_t oh, ow;
};

inline ConvDims conv_dims(int64_t batch, int64_t c_in, int64_t h, int64_t w, int64_t c_out,
                          int64_t k, int64_t stride, int64_t pad, int64_t groups) {
    ConvDims d{batch, c_in, h, w, c_out, k, stride, pad, groups, 0, 0};
    d.oh = (h + 2 * pad - k) / stride + 1;
    d.ow = (w + 2 * pad - k) / stride + 1;
    return d;
}

// Valid output range [lo, hi) along one spatial axis for a given kernel offset,
// so the inner loops never test image bounds.
inline void conv_span(int64_t kk, int64_t pad, int64_t stride, int64_t in_size, int64_t out_size,
                      int64_t& lo, int64_t& hi) {
    // in = out*stride + kk - pad must land in [0, in_size)
    int64_t shift = kk - pad;
    lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
    int64_t max_in = in_size - 1 - shift;
    hi = max_in < 0 ? 0 : std::min(out_size, max_in / stride + 1);
    if (lo > hi) lo = hi;
}

template <typename S>
void conv2d_forward(const S* x, const S* w, const S* bias, S* y, const ConvDims& d) {
    const int64_t cpg_in = d.c_in / d.groups;
    const int64_t cpg_out = d.c_out / d.groups;
    const int64_t plane = d.h * d.w;
    const int64_t oplane = d.oh * d.ow;
#pragma omp parallel for collapse(2) schedule(static) num_threads(kernel_threads())
    for (int64_t b = 0; b < d.batch; ++b) {
        for (int64_t co = 0; co < d.c_out; ++co) {
            const int64_t g = co / cpg_out;
            S* yp = y + (b * d.c_out + co) * oplane;
            const S bv = bias ? bias[co] : S(0);
            for (int64_t i = 0; i < oplane; ++i) yp[i] = bv;
            for (int64_t ci = 0; ci < cpg_in; ++ci) {
                const S* xp = x + (b * d.c_in + g * cpg_in + ci) * plane;
                const S* wp = w + (co * cpg_in + ci) * d.k * d.k;
                for (int64_t kh = 0; kh < d.k; ++kh) {
                    int64_t olo, ohi;
                    conv_span(kh, d.pad, d.stride, d.h, d.oh, olo, ohi);
                    for (int64_t kw = 0; kw < d.k; ++kw) {
                        const S wv = wp[kh * d.k + kw];
                        if (wv == S(0)) continue;
                        int64_t wlo, whi;
                        conv_span(kw, d.pad, d.stride, d.w, d.ow, wlo, whi);
                        for (int64_t oh = olo; oh < ohi; ++oh) {
                            const int64_t ih = oh * d.stride + kh - d.pad;
                            const S* xrow = xp + ih * d.w + (wlo * d.stride + kw - d.pad);
                            S* yrow = yp + oh * d.ow + wlo;
                            const int64_t len = whi - wlo;
                            if (d.stride == 1) {
                                for (int64_t t = 0; t < len; ++t) yrow[t] += wv * xrow[t];
                            } else {
                                for (int64_t t = 0; t < len; ++t) yrow[t] += wv * xrow[t * d.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

// Gradient wrt input. Threads partition (batch, c_in) planes.
template <typename S>
void conv2d_backward_input(const S* w, const S* gy, S* gx, const ConvDims& d) {
    const int64_t cpg_in = d.c_in / d.groups;
    const int64_t cpg_out = d.c_out / d.groups;
    const int64_t plane = d.h * d.w;
    const int64_t oplane = d.oh * d.ow;
#pragma omp parallel for collapse(2) schedule(static) num_threads(kernel_threads())
    for (int64_t b = 0; b < d.batch; ++b) {
        for (int64_t ci = 0; ci < d.c_in; ++ci) {
            const int64_t g = ci / cpg_in;
            S* gxp = gx + (b * d.c_in + ci) * plane;
            for (int64_t co = g * cpg_out; co < (g + 1) * cpg_out; ++co) {
                const S* gyp = gy + (b * d.c_out + co) * oplane;
                const S* wp = w + (co * cpg_in + (ci - g * cpg_in)) * d.k * d.k;
                for (int64_t kh = 0; kh < d.k; ++kh) {
                    int64_t olo, ohi;
                    conv_span(kh, d.pad, d.stride, d.h, d.oh, olo, ohi);
                    for (int64_t kw = 0; kw < d.k; ++kw) {
                        const S wv = wp[kh * d.k + kw];
                        if (wv == S(0)) continue;
                        int64_t wlo, whi;
                        conv_span(kw, d.pad, d.stride, d.w, d.ow, wlo, whi);
                        for (int64_t oh = olo; oh < ohi; ++oh) {
                            const int64_t ih = oh * d.stride + kh - d.pad;
                            S* gxrow = gxp + ih * d.w + (wlo * d.stride + kw - d.pad);
                            const S* gyrow = gyp + oh * d.ow + wlo;
                            const int64_t len = whi - wlo;
                            if (d.stride == 1) {
                                for (int64_t t = 0; t < len; ++t) gxrow[t] += wv * gyrow[t];
                            } else {
                                for (int64_t t = 0; t < len; ++t) gxrow[t * d.stride] += wv * gyrow[t];
                            }
                        }
                    }
                }
            }
        }
    }
}

// Gradients wrt weight and bias. Threads partition output channels; the batch
// reduction stays sequential inside each thread.
template <typename S>
void conv2d_backward_params(const S* x, const S* gy, S* gw, S* gb, const ConvDims& d) {
    const int64_t cpg_in = d.c_in / d.groups;
    const int64_t cpg_out = d.c_out / d.groups;
    const int64_t plane = d.h * d.w;
    const int64_t oplane = d.oh * d.ow;
#pragma omp parallel for schedule(static) num_threads(kernel_threads())
    for (int64_t co = 0; co < d.c_out; ++co) {
        const int64_t g = co / cpg_out;
        for (int64_t b = 0; b < d.batch; ++b) {
            const S* gyp = gy + (b * d.c_out + co) * oplane;
            if (gb) {
                S acc = S(0);
                for (int64_t i = 0; i < oplane; ++i) acc += gyp[i];
                gb[co] += acc;
            }
            for (int64_t ci = 0; ci < cpg_in; ++ci) {
                const S* xp = x + (b * d.c_in + g * cpg_in + ci) * plane;
                S* gwp = gw + (co * cpg_in + ci) * d.k * d.k;
                for (int64_t kh = 0; kh < d.k; ++kh) {
                    int64_t olo, ohi;
                    conv_span(kh, d.pad, d.stride, d.h, d.oh, olo, ohi);
                    for (int64_t kw = 0; kw < d.k; ++kw) {
                        int64_t wlo, whi;
                        conv_span(kw, d.pad, d.stride, d.w, d.ow, wlo, whi);
                        S acc = S(0);
                        for (int64_t oh = olo; oh < ohi; ++oh) {
                            const int64_t ih = oh * d.stride + kh - d.pad;
                            const S* xrow = xp + ih * d.w + (wlo * d.stride + kw - d.pad);
                            const S* gyrow = gyp + oh * d.ow + wlo;
                            const int64_t len = whi - wlo;
                            if (d.stride == 1) {
                                for (int64_t t = 0; t < len; ++t) acc += gyrow[t] * xrow[t];
                            } else {
                                for (int64_t t = 0; t < len; ++t) acc += gyrow[t] * xrow[t * d.stride];
                            }
                        }
                        gwp[kh * d.k + kw] += acc;
                    }
                }
            }
        }
    }
}

}  // namespace docparse::detail
