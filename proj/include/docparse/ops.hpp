#pragma once

#include <cmath>
#include <optional>

#include "docparse/tensor.hpp"

// Neural operators: each op computes its forward value and, when a tape is
// supplied, records the matching backward rule.

namespace docparse {

template <typename S>
struct ConvParams {
    Tensor<S> weight;  // [C_out, C_in/groups, k, k]
    Tensor<S> bias;    // [C_out]
    int64_t stride = 1;
    int64_t padding = 0;
    int64_t groups = 1;

    int64_t out_channels() const { return weight.dim(0); }
    int64_t in_channels() const { return weight.dim(1) * groups; }
    int64_t kernel() const { return weight.dim(2); }
    bool depthwise() const { return groups == in_channels() && groups == out_channels(); }

    void validate() const {
        if (weight.rank() != 4 || weight.dim(2) != weight.dim(3))
            throw ShapeError("conv weight must be [C_out, C_in/g, k, k], got " + shape_str(weight.shape()));
        if (bias.rank() != 1 || bias.dim(0) != weight.dim(0))
            throw ShapeError("conv bias must match C_out");
        if (groups < 1 || weight.dim(0) % groups != 0)
            throw ShapeError("C_out not divisible by groups");
    }
};

template <typename S>
struct LinearParams {
    Tensor<S> weight;  // [C_out, C_in]
    Tensor<S> bias;    // [C_out]

    int64_t in_features() const { return weight.dim(1); }
    int64_t out_features() const { return weight.dim(0); }

    void validate() const {
        if (weight.rank() != 2) throw ShapeError("linear weight must be rank 2");
        if (bias.rank() != 1 || bias.dim(0) != weight.dim(0))
            throw ShapeError("linear bias length must equal weight rows");
    }
};

// ---------------------------------------------------------------------------
// conv2d / dwconv
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const ConvParams<S>& p, Tape<S>* tape = nullptr) {
    p.validate();
    if (x.rank() != 4) throw ShapeError("conv2d expects [B,C,H,W], got " + shape_str(x.shape()));
    if (x.dim(1) != p.in_channels())
        throw ShapeError("conv2d: input has " + std::to_string(x.dim(1)) + " channels, weight expects " +
                         std::to_string(p.in_channels()));
    if (x.dim(1) % p.groups != 0) throw ShapeError("C_in not divisible by groups");
    const auto d = detail::conv_dims(x.dim(0), x.dim(1), x.dim(2), x.dim(3), p.out_channels(),
                                     p.kernel(), p.stride, p.padding, p.groups);
    if (d.oh < 1 || d.ow < 1) throw ShapeError("conv2d: spatial dims smaller than kernel after padding");
    Tensor<S> out = Tensor<S>::zeros({d.batch, d.c_out, d.oh, d.ow});
    detail::conv2d_forward(x.data().data(), p.weight.data().data(), p.bias.data().data(),
                           out.data().data(), d);
    if (tape) {
        int ix = tape->track(x), iw = tape->track(p.weight), ib = tape->track(p.bias);
        tape->record(out, {ix, iw, ib},
                     [=, xd = x.storage(), wd = p.weight.storage()](Tape<S>& tp, const std::vector<S>& g) {
                         if (ix >= 0)
                             detail::conv2d_backward_input(wd->data(), g.data(), tp.grad(ix).data(), d);
                         if (iw >= 0 || ib >= 0)
                             detail::conv2d_backward_params(xd->data(), g.data(),
                                                            iw >= 0 ? tp.grad(iw).data() : nullptr,
                                                            ib >= 0 ? tp.grad(ib).data() : nullptr, d);
                     });
    }
    return out;
}

/// Depthwise 3x3, pad 1, stride 1 — the shifted-MLP block configuration.
template <typename S>
Tensor<S> dwconv(const Tensor<S>& x, const ConvParams<S>& p, Tape<S>* tape = nullptr) {
    if (!p.depthwise()) throw ContractError("dwconv requires groups == C_in == C_out");
    if (p.kernel() != 3 || p.padding != 1 || p.stride != 1)
        throw ContractError("dwconv requires k=3, pad=1, stride=1");
    return conv2d(x, p, tape);
}

// conv2d_backward_params needs a null-tolerant gw pointer; wrap the kernel call.
namespace detail {
template <typename S>
void conv2d_backward_params_safe(const S* x, const S* gy, S* gw, S* gb, const ConvDims& d,
                                 std::vector<S>& scratch) {
    if (!gw) {
        scratch.assign(static_cast<size_t>(d.c_out * (d.c_in / d.groups) * d.k * d.k), S(0));
        gw = scratch.data();
    }
    conv2d_backward_params(x, gy, gw, gb, d);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
S softplus_stable(S x) {
    // max(x,0) + log1p(exp(-|x|))
    S a = x > S(0) ? x : S(0);
    return a + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace detail

/// Mish: x * tanh(softplus(x)).
template <typename S>
Tensor<S> mish(const Tensor<S>& x, Tape<S>* tape = nullptr) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    auto xv = x.data();
    auto ov = out.data();
    for (int64_t i = 0; i < x.numel(); ++i) ov[i] = xv[i] * std::tanh(detail::softplus_stable(xv[i]));
    if (tape) {
        int ix = tape->track(x);
        tape->record(out, {ix}, [=, xd = x.storage()](Tape<S>& tp, const std::vector<S>& g) {
            auto& gx = tp.grad(ix);
            for (size_t i = 0; i < g.size(); ++i) {
                const S v = (*xd)[i];
                const S t = std::tanh(detail::softplus_stable(v));
                const S sig = S(1) / (S(1) + std::exp(-v));
                gx[i] += g[i] * (t + v * (S(1) - t * t) * sig);
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x, Tape<S>* tape = nullptr) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    auto xv = x.data();
    auto ov = out.data();
    for (int64_t i = 0; i < x.numel(); ++i) ov[i] = S(1) / (S(1) + std::exp(-xv[i]));
    if (tape) {
        int ix = tape->track(x);
        tape->record(out, {ix}, [=, od = out.storage()](Tape<S>& tp, const std::vector<S>& g) {
            auto& gx = tp.grad(ix);
            for (size_t i = 0; i < g.size(); ++i) {
                const S s = (*od)[i];
                gx[i] += g[i] * s * (S(1) - s);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cyclic shift: rotate each channel along one spatial axis by its own offset.
// Offset +s moves the element at index i to index (i+s) mod size.
// ---------------------------------------------------------------------------

enum class Axis { Height, Width };

template <typename S>
Tensor<S> cyclic_shift(const Tensor<S>& x, Axis axis, const std::vector<int>& offsets,
                       Tape<S>* tape = nullptr) {
    if (x.rank() != 4) throw ShapeError("cyclic_shift expects [B,C,H,W]");
    const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (static_cast<int64_t>(offsets.size()) != c)
        throw ContractError("cyclic_shift: offsets length " + std::to_string(offsets.size()) +
                            " != channels " + std::to_string(c));
    auto rotate = [&](const S* src, S* dst, const std::vector<int>& offs, int sign) {
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t ci = 0; ci < c; ++ci) {
                const int64_t size = axis == Axis::Height ? h : w;
                int64_t s = (sign * offs[static_cast<size_t>(ci)]) % size;
                if (s < 0) s += size;
                const S* sp = src + (bi * c + ci) * h * w;
                S* dp = dst + (bi * c + ci) * h * w;
                if (axis == Axis::Width) {
                    for (int64_t y = 0; y < h; ++y)
                        for (int64_t xw = 0; xw < w; ++xw) dp[y * w + (xw + s) % w] += sp[y * w + xw];
                } else {
                    for (int64_t y = 0; y < h; ++y) {
                        const int64_t ty = (y + s) % h;
                        for (int64_t xw = 0; xw < w; ++xw) dp[ty * w + xw] += sp[y * w + xw];
                    }
                }
            }
    };
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    rotate(x.data().data(), out.data().data(), offsets, +1);
    if (tape) {
        int ix = tape->track(x);
        tape->record(out, {ix}, [=](Tape<S>& tp, const std::vector<S>& g) {
            rotate(g.data(), tp.grad(ix).data(), offsets, -1);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Layer normalization over trailing dims, with affine transform.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> layernorm(const Tensor<S>& x, size_t normalized_rank, const Tensor<S>& gamma,
                    const Tensor<S>& beta, S eps, Tape<S>* tape = nullptr) {
    if (eps <= S(0)) throw ContractError("layernorm: eps must be positive");
    if (normalized_rank < 1 || normalized_rank > x.rank())
        throw ShapeError("layernorm: bad normalized rank");
    int64_t inner = 1;
    for (size_t i = x.rank() - normalized_rank; i < x.rank(); ++i) inner *= x.dim(i);
    if (gamma.numel() != inner || beta.numel() != inner)
        throw ShapeError("layernorm: gamma/beta must cover the normalized dims");
    const int64_t outer = x.numel() / inner;

    Tensor<S> out = Tensor<S>::zeros(x.shape());
    // cache per-instance mean and inverse stddev for backward
    auto xhat = std::make_shared<std::vector<S>>(static_cast<size_t>(x.numel()));
    auto inv_std = std::make_shared<std::vector<S>>(static_cast<size_t>(outer));
    auto xv = x.data();
    auto gv = gamma.data();
    auto bv = beta.data();
    auto ov = out.data();
    for (int64_t o = 0; o < outer; ++o) {
        const S* xp = xv.data() + o * inner;
        S m = S(0);
        for (int64_t i = 0; i < inner; ++i) m += xp[i];
        m /= static_cast<S>(inner);
        S var = S(0);
        for (int64_t i = 0; i < inner; ++i) {
            const S dxi = xp[i] - m;
            var += dxi * dxi;
        }
        var /= static_cast<S>(inner);
        const S istd = S(1) / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(o)] = istd;
        for (int64_t i = 0; i < inner; ++i) {
            const S xh = (xp[i] - m) * istd;
            (*xhat)[static_cast<size_t>(o * inner + i)] = xh;
            ov[o * inner + i] = gv[i] * xh + bv[i];
        }
    }
    if (tape) {
        int ix = tape->track(x), ig = tape->track(gamma), ib = tape->track(beta);
        tape->record(out, {ix, ig, ib},
                     [=, gd = gamma.storage()](Tape<S>& tp, const std::vector<S>& g) {
            for (int64_t o = 0; o < outer; ++o) {
                const S* gp = g.data() + o * inner;
                const S* xh = xhat->data() + o * inner;
                const S istd = (*inv_std)[static_cast<size_t>(o)];
                if (ig >= 0) {
                    auto& gg = tp.grad(ig);
                    for (int64_t i = 0; i < inner; ++i) gg[i] += gp[i] * xh[i];
                }
                if (ib >= 0) {
                    auto& gb = tp.grad(ib);
                    for (int64_t i = 0; i < inner; ++i) gb[i] += gp[i];
                }
                if (ix >= 0) {
                    auto& gx = tp.grad(ix);
                    S sum_gy = S(0), sum_gyxh = S(0);
                    for (int64_t i = 0; i < inner; ++i) {
                        const S gyi = gp[i] * (*gd)[static_cast<size_t>(i)];
                        sum_gy += gyi;
                        sum_gyxh += gyi * xh[i];
                    }
                    const S n = static_cast<S>(inner);
                    for (int64_t i = 0; i < inner; ++i) {
                        const S gyi = gp[i] * (*gd)[static_cast<size_t>(i)];
                        gx[o * inner + i] += istd * (gyi - sum_gy / n - xh[i] * sum_gyxh / n);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax along one axis (max-subtracted for stability).
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, size_t axis, Tape<S>* tape = nullptr) {
    if (axis >= x.rank()) throw ShapeError("softmax: axis out of range");
    const int64_t n = x.dim(axis);
    int64_t inner = 1;
    for (size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    const int64_t outer = x.numel() / (n * inner);

    Tensor<S> out = Tensor<S>::zeros(x.shape());
    auto xv = x.data();
    auto ov = out.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * n * inner + in;
            S mx = xv[base];
            for (int64_t i = 1; i < n; ++i) mx = std::max(mx, xv[base + i * inner]);
            S z = S(0);
            for (int64_t i = 0; i < n; ++i) {
                const S e = std::exp(xv[base + i * inner] - mx);
                ov[base + i * inner] = e;
                z += e;
            }
            const S iz = S(1) / z;
            for (int64_t i = 0; i < n; ++i) ov[base + i * inner] *= iz;
        }
    if (tape) {
        int ix = tape->track(x);
        tape->record(out, {ix}, [=, od = out.storage()](Tape<S>& tp, const std::vector<S>& g) {
            auto& gx = tp.grad(ix);
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t in = 0; in < inner; ++in) {
                    const int64_t base = o * n * inner + in;
                    S dot = S(0);
                    for (int64_t i = 0; i < n; ++i) dot += g[base + i * inner] * (*od)[base + i * inner];
                    for (int64_t i = 0; i < n; ++i) {
                        const S y = (*od)[base + i * inner];
                        gx[base + i * inner] += y * (g[base + i * inner] - dot);
                    }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dropout (inverted): kept values scaled by 1/(1-rate). Identity in eval mode.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double rate, Mode mode, uint64_t seed, Tape<S>* tape = nullptr) {
    if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout: rate must be in [0, 1)");
    if (mode == Mode::Eval || rate == 0.0) {
        // identity, but still a tape node so gradients flow
        Tensor<S> out = x.clone();
        out.set_requires_grad(false);
        if (tape) {
            int ix = tape->track(x);
            tape->record(out, {ix}, [=](Tape<S>& tp, const std::vector<S>& g) {
                auto& gx = tp.grad(ix);
                for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            });
        }
        return out;
    }
    Rng rng(seed);
    const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
    auto mask = std::make_shared<std::vector<S>>(static_cast<size_t>(x.numel()));
    for (S& m : *mask) m = rng.uniform() < rate ? S(0) : keep_scale;
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    auto xv = x.data();
    auto ov = out.data();
    for (int64_t i = 0; i < x.numel(); ++i) ov[i] = xv[i] * (*mask)[static_cast<size_t>(i)];
    if (tape) {
        int ix = tape->track(x);
        tape->record(out, {ix}, [=](Tape<S>& tp, const std::vector<S>& g) {
            auto& gx = tp.grad(ix);
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// 2x2 max pooling / nearest-neighbor 2x upsampling
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> maxpool2(const Tensor<S>& x, Tape<S>* tape = nullptr) {
    if (x.rank() != 4) throw ShapeError("maxpool2 expects [B,C,H,W]");
    const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0) throw ShapeError("maxpool2 requires even H and W");
    const int64_t oh = h / 2, ow = w / 2;
    Tensor<S> out = Tensor<S>::zeros({b, c, oh, ow});
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out.numel()));
    auto xv = x.data();
    auto ov = out.data();
    for (int64_t p = 0; p < b * c; ++p) {
        const S* xp = xv.data() + p * h * w;
        S* op = ov.data() + p * oh * ow;
        for (int64_t y = 0; y < oh; ++y)
            for (int64_t xx = 0; xx < ow; ++xx) {
                // first-index tie break: scan in row-major order, strict >
                int64_t best = (2 * y) * w + 2 * xx;
                S bv = xp[best];
                const int64_t cands[3] = {(2 * y) * w + 2 * xx + 1, (2 * y + 1) * w + 2 * xx,
                                          (2 * y + 1) * w + 2 * xx + 1};
                for (int64_t cand : cands) {
                    if (xp[cand] > bv) {
                        bv = xp[cand];
                        best = cand;
                    }
                }
                op[y * ow + xx] = bv;
                (*argmax)[static_cast<size_t>(p * oh * ow + y * ow + xx)] = p * h * w + best;
            }
    }
    if (tape) {
        int ix = tape->track(x);
        tape->record(out, {ix}, [=](Tape<S>& tp, const std::vector<S>& g) {
            auto& gx = tp.grad(ix);
            for (size_t i = 0; i < g.size(); ++i) gx[static_cast<size_t>((*argmax)[i])] += g[i];
        });
    }
    return out;
}

template <typename S>
Tensor<S> upsample2(const Tensor<S>& x, Tape<S>* tape = nullptr) {
    if (x.rank() != 4) throw ShapeError("upsample2 expects [B,C,H,W]");
    const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<S> out = Tensor<S>::zeros({b, c, 2 * h, 2 * w});
    auto xv = x.data();
    auto ov = out.data();
    for (int64_t p = 0; p < b * c; ++p) {
        const S* xp = xv.data() + p * h * w;
        S* op = ov.data() + p * 4 * h * w;
        for (int64_t y = 0; y < h; ++y)
            for (int64_t xx = 0; xx < w; ++xx) {
                const S v = xp[y * w + xx];
                S* o0 = op + (2 * y) * 2 * w + 2 * xx;
                o0[0] = v;
                o0[1] = v;
                o0[2 * w] = v;
                o0[2 * w + 1] = v;
            }
    }
    if (tape) {
        int ix = tape->track(x);
        tape->record(out, {ix}, [=](Tape<S>& tp, const std::vector<S>& g) {
            auto& gx = tp.grad(ix);
            for (int64_t p = 0; p < b * c; ++p) {
                const S* gp = g.data() + p * 4 * h * w;
                S* gxp = gx.data() + p * h * w;
                for (int64_t y = 0; y < h; ++y)
                    for (int64_t xx = 0; xx < w; ++xx) {
                        const S* g0 = gp + (2 * y) * 2 * w + 2 * xx;
                        gxp[y * w + xx] += g0[0] + g0[1] + g0[2 * w] + g0[2 * w + 1];
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Channel concat for skip connections: [B,C1,H,W] ++ [B,C2,H,W].
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
    if (a.rank() != 4 || b.rank() != 4) throw ShapeError("concat_channels expects [B,C,H,W]");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw ShapeError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int64_t bt = a.dim(0), ca = a.dim(1), cb = b.dim(1), plane = a.dim(2) * a.dim(3);
    Tensor<S> out = Tensor<S>::zeros({bt, ca + cb, a.dim(2), a.dim(3)});
    auto ov = out.data();
    for (int64_t i = 0; i < bt; ++i) {
        std::copy_n(a.data().data() + i * ca * plane, ca * plane, ov.data() + i * (ca + cb) * plane);
        std::copy_n(b.data().data() + i * cb * plane, cb * plane,
                    ov.data() + (i * (ca + cb) + ca) * plane);
    }
    if (tape) {
        int ia = tape->track(a), ib = tape->track(b);
        tape->record(out, {ia, ib}, [=](Tape<S>& tp, const std::vector<S>& g) {
            for (int64_t i = 0; i < bt; ++i) {
                if (ia >= 0) {
                    auto& ga = tp.grad(ia);
                    const S* gp = g.data() + i * (ca + cb) * plane;
                    for (int64_t j = 0; j < ca * plane; ++j) ga[i * ca * plane + j] += gp[j];
                }
                if (ib >= 0) {
                    auto& gb = tp.grad(ib);
                    const S* gp = g.data() + (i * (ca + cb) + ca) * plane;
                    for (int64_t j = 0; j < cb * plane; ++j) gb[i * cb * plane + j] += gp[j];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Token-wise linear: y[..., C_out] = x[..., C_in] W^T + b, applied over the
// flattened leading dims.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const LinearParams<S>& p, Tape<S>* tape = nullptr) {
    p.validate();
    const int64_t cin = p.in_features(), cout = p.out_features();
    if (x.dim(x.rank() - 1) != cin)
        throw ShapeError("linear: last dim " + std::to_string(x.dim(x.rank() - 1)) + " != " +
                         std::to_string(cin));
    const int64_t rows = x.numel() / cin;
    Shape out_shape = x.shape();
    out_shape.back() = cout;
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    detail::gemm_nt(x.data().data(), p.weight.data().data(), out.data().data(), rows, cin, cout, false);
    auto ov = out.data();
    auto bv = p.bias.data();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < cout; ++j) ov[r * cout + j] += bv[j];
    if (tape) {
        int ix = tape->track(x), iw = tape->track(p.weight), ib = tape->track(p.bias);
        tape->record(out, {ix, iw, ib},
                     [=, xd = x.storage(), wd = p.weight.storage()](Tape<S>& tp, const std::vector<S>& g) {
                         if (ix >= 0)
                             detail::gemm_nn(g.data(), wd->data(), tp.grad(ix).data(), rows, cout, cin, true);
                         if (iw >= 0)
                             detail::gemm_tn(g.data(), xd->data(), tp.grad(iw).data(), cout, rows, cin, true);
                         if (ib >= 0) {
                             auto& gb = tp.grad(ib);
                             for (int64_t r = 0; r < rows; ++r)
                                 for (int64_t j = 0; j < cout; ++j) gb[j] += g[r * cout + j];
                         }
                     });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention. Queries come from q_tokens
// [B,N,D], keys and values from kv_tokens [B,L,D_kv]; output is [B,N,D].
// ---------------------------------------------------------------------------

template <typename S>
struct AttentionParams {
    LinearParams<S> q;    // D    -> D
    LinearParams<S> k;    // D_kv -> D
    LinearParams<S> v;    // D_kv -> D
    LinearParams<S> out;  // D    -> D
    int heads = 4;
};

template <typename S>
Tensor<S> multi_head_attention(const Tensor<S>& q_tokens, const Tensor<S>& kv_tokens,
                               const AttentionParams<S>& p, Tape<S>* tape = nullptr) {
    if (q_tokens.rank() != 3 || kv_tokens.rank() != 3)
        throw ShapeError("attention expects [B,N,D] and [B,L,D_kv]");
    const int64_t b = q_tokens.dim(0), n = q_tokens.dim(1), d = q_tokens.dim(2);
    const int64_t l = kv_tokens.dim(1);
    if (kv_tokens.dim(0) != b) throw ShapeError("attention: batch mismatch");
    if (p.heads < 1 || d % p.heads != 0)
        throw ContractError("attention: model dim " + std::to_string(d) + " not divisible by heads " +
                            std::to_string(p.heads));
    const int64_t heads = p.heads, dh = d / heads;

    Tensor<S> q = linear(q_tokens, p.q, tape);   // [B,N,D]
    Tensor<S> k = linear(kv_tokens, p.k, tape);  // [B,L,D]
    Tensor<S> v = linear(kv_tokens, p.v, tape);  // [B,L,D]

    // [B,T,D] -> [B*heads, T, dh]
    auto split_heads = [&](const Tensor<S>& t, int64_t tok) {
        Tensor<S> r = reshape(t, {b, tok, heads, dh}, tape);
        r = permute(r, {0, 2, 1, 3}, tape);
        return reshape(r, {b * heads, tok, dh}, tape);
    };
    Tensor<S> qh = split_heads(q, n);
    Tensor<S> kh = split_heads(k, l);
    Tensor<S> vh = split_heads(v, l);

    Tensor<S> scores = bmm(qh, kh, /*transpose_b=*/true, tape);  // [B*H, N, L]
    scores = scale(scores, static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh))), tape);
    Tensor<S> weights = softmax(scores, 2, tape);
    Tensor<S> ctx = bmm(weights, vh, /*transpose_b=*/false, tape);  // [B*H, N, dh]

    Tensor<S> merged = reshape(ctx, {b, heads, n, dh}, tape);
    merged = permute(merged, {0, 2, 1, 3}, tape);
    merged = reshape(merged, {b, n, d}, tape);
    return linear(merged, p.out, tape);
}

}  // namespace docparse
