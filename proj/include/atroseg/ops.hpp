#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "atroseg/parallel.hpp"
#include "atroseg/tensor.hpp"

namespace atroseg {

constexpr std::int64_t kElementwiseGrain = 1 << 14;

struct ConvSpec {
    std::int64_t in_channels = 0;
    std::int64_t out_channels = 0;
    std::int64_t kernel = 3;
    std::int64_t stride = 1;
    std::int64_t rate = 1;
    std::int64_t padding = 0;
    bool has_bias = false;

    std::int64_t effective_kernel() const { return rate * (kernel - 1) + 1; }

    std::int64_t out_extent(std::int64_t in) const {
        return (in + 2 * padding - effective_kernel()) / stride + 1;
    }

    // padding that keeps stride-1 output extents equal to the input
    static std::int64_t same_padding(std::int64_t kernel, std::int64_t rate) {
        return rate * (kernel - 1) / 2;
    }

    void validate() const {
        if (in_channels < 1 || out_channels < 1)
            throw std::invalid_argument("ConvSpec: channel counts must be positive");
        if (kernel < 1 || kernel % 2 == 0)
            throw std::invalid_argument("ConvSpec: kernel extent must be odd and positive");
        if (stride < 1) throw std::invalid_argument("ConvSpec: stride must be positive");
        if (rate < 1) throw std::invalid_argument("ConvSpec: rate must be positive");
        if (padding < 0) throw std::invalid_argument("ConvSpec: padding must be non-negative");
    }
};

namespace detail {

// ow range such that 0 <= ow*stride + off < w
inline void ow_bounds(std::int64_t off, std::int64_t stride, std::int64_t w, std::int64_t ow_count,
                      std::int64_t& lo, std::int64_t& hi) {
    lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
    hi = off > w - 1 ? 0 : std::min(ow_count, (w - 1 - off) / stride + 1);
    if (hi < lo) hi = lo;
}

// Dot product with a fixed partial-sum tree: 4 independent 8-wide lane
// accumulators folded in a fixed order. The summation order depends only on
// n, never on threading, so results are reproducible run to run.
template <class T>
T lane_dot(const T* a, const T* b, std::int64_t n) {
#if defined(__GNUC__) || defined(__clang__)
    typedef T Vec __attribute__((vector_size(8 * sizeof(T))));
    Vec acc0{}, acc1{}, acc2{}, acc3{};
    std::int64_t i = 0;
    for (; i + 32 <= n; i += 32) {
        Vec va0, vb0, va1, vb1, va2, vb2, va3, vb3;
        std::memcpy(&va0, a + i, sizeof va0);
        std::memcpy(&vb0, b + i, sizeof vb0);
        std::memcpy(&va1, a + i + 8, sizeof va1);
        std::memcpy(&vb1, b + i + 8, sizeof vb1);
        std::memcpy(&va2, a + i + 16, sizeof va2);
        std::memcpy(&vb2, b + i + 16, sizeof vb2);
        std::memcpy(&va3, a + i + 24, sizeof va3);
        std::memcpy(&vb3, b + i + 24, sizeof vb3);
        acc0 += va0 * vb0;
        acc1 += va1 * vb1;
        acc2 += va2 * vb2;
        acc3 += va3 * vb3;
    }
    for (; i + 8 <= n; i += 8) {
        Vec va, vb;
        std::memcpy(&va, a + i, sizeof va);
        std::memcpy(&vb, b + i, sizeof vb);
        acc0 += va * vb;
    }
    const Vec acc = (acc0 + acc1) + (acc2 + acc3);
    T lanes[8];
    std::memcpy(lanes, &acc, sizeof lanes);
    for (int l = 0; l < 8 && i < n; ++i, ++l) lanes[l] += a[i] * b[i];
#else
    T lanes[8] = {};
    std::int64_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (int l = 0; l < 8; ++l) lanes[l] += a[i + l] * b[i + l];
    for (int l = 0; l < 8 && i < n; ++i, ++l) lanes[l] += a[i] * b[i];
#endif
    const T s01 = lanes[0] + lanes[1], s23 = lanes[2] + lanes[3];
    const T s45 = lanes[4] + lanes[5], s67 = lanes[6] + lanes[7];
    return (s01 + s23) + (s45 + s67);
}

// Unfolds one batch item into a [IC*K*K] x [OH*OW] matrix with explicit zeros
// where taps fall into the padding. Kernel taps are indexed (ic, kh, kw) in
// row-major order, matching the weight layout.
template <class T>
void im2col(const T* x, std::int64_t IC, std::int64_t H, std::int64_t W, const ConvSpec& spec,
            std::int64_t OH, std::int64_t OW, T* col) {
    const std::int64_t K = spec.kernel, S = spec.stride, R = spec.rate, P = spec.padding;
    const std::int64_t plane = OH * OW;
    parallel_for(IC * K * K, 8, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t k = lo; k < hi; ++k) {
            const std::int64_t ic = k / (K * K), kh = (k / K) % K, kw = k % K;
            T* row = col + k * plane;
            const T* xplane = x + ic * H * W;
            const std::int64_t off = R * kw - P;
            std::int64_t olo, ohi;
            ow_bounds(off, S, W, OW, olo, ohi);
            for (std::int64_t oh = 0; oh < OH; ++oh) {
                T* dst = row + oh * OW;
                const std::int64_t ih = oh * S - P + R * kh;
                if (ih < 0 || ih >= H) {
                    std::fill(dst, dst + OW, T(0));
                    continue;
                }
                const T* src = xplane + ih * W + off;
                std::fill(dst, dst + olo, T(0));
                if (S == 1) {
                    for (std::int64_t ow = olo; ow < ohi; ++ow) dst[ow] = src[ow];
                } else {
                    for (std::int64_t ow = olo; ow < ohi; ++ow) dst[ow] = src[ow * S];
                }
                std::fill(dst + ohi, dst + OW, T(0));
            }
        }
    });
}

// Adjoint of im2col: accumulates the column matrix back into the (padded-out)
// input gradient of one batch item. Parallel over input channels; every tap
// of channel ic scatters only into plane ic.
template <class T>
void col2im_add(const T* col, std::int64_t IC, std::int64_t H, std::int64_t W, const ConvSpec& spec,
                std::int64_t OH, std::int64_t OW, T* gx) {
    const std::int64_t K = spec.kernel, S = spec.stride, R = spec.rate, P = spec.padding;
    const std::int64_t plane = OH * OW;
    parallel_for(IC, 1, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t ic = lo; ic < hi; ++ic) {
            T* gxplane = gx + ic * H * W;
            for (std::int64_t kh = 0; kh < K; ++kh) {
                for (std::int64_t kw = 0; kw < K; ++kw) {
                    const T* row = col + ((ic * K + kh) * K + kw) * plane;
                    const std::int64_t off = R * kw - P;
                    std::int64_t olo, ohi;
                    ow_bounds(off, S, W, OW, olo, ohi);
                    for (std::int64_t oh = 0; oh < OH; ++oh) {
                        const std::int64_t ih = oh * S - P + R * kh;
                        if (ih < 0 || ih >= H) continue;
                        const T* src = row + oh * OW;
                        T* dst = gxplane + ih * W + off;
                        if (S == 1) {
                            for (std::int64_t ow = olo; ow < ohi; ++ow) dst[ow] += src[ow];
                        } else {
                            for (std::int64_t ow = olo; ow < ohi; ++ow) dst[ow * S] += src[ow];
                        }
                    }
                }
            }
        }
    });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and reduction ops
// ---------------------------------------------------------------------------

template <class T>
TensorPtr<T> add(Graph<T>& g, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (!(a->shape == b->shape))
        throw std::invalid_argument("add: shape mismatch " + a->shape.str() + " vs " + b->shape.str());
    auto y = make_tensor<T>(a->shape, any_requires_grad<T>({a, b}));
    const std::int64_t n = y->numel();
    const T* pa = a->data.data();
    const T* pb = b->data.data();
    T* py = y->data.data();
    parallel_for(n, kElementwiseGrain, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) py[i] = pa[i] + pb[i];
    });
    g.record("add", {a, b}, y, [a, b, y] {
        const std::int64_t n = y->numel();
        const T* gy = y->grad.data();
        if (a->requires_grad) {
            T* ga = a->grad.data();
            for (std::int64_t i = 0; i < n; ++i) ga[i] += gy[i];
        }
        if (b->requires_grad) {
            T* gb = b->grad.data();
            for (std::int64_t i = 0; i < n; ++i) gb[i] += gy[i];
        }
    });
    return y;
}

template <class T>
TensorPtr<T> mul(Graph<T>& g, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (!(a->shape == b->shape))
        throw std::invalid_argument("mul: shape mismatch " + a->shape.str() + " vs " + b->shape.str());
    auto y = make_tensor<T>(a->shape, any_requires_grad<T>({a, b}));
    const std::int64_t n = y->numel();
    const T* pa = a->data.data();
    const T* pb = b->data.data();
    T* py = y->data.data();
    parallel_for(n, kElementwiseGrain, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) py[i] = pa[i] * pb[i];
    });
    g.record("mul", {a, b}, y, [a, b, y] {
        const std::int64_t n = y->numel();
        const T* gy = y->grad.data();
        if (a->requires_grad) {
            T* ga = a->grad.data();
            const T* pb = b->data.data();
            for (std::int64_t i = 0; i < n; ++i) ga[i] += gy[i] * pb[i];
        }
        if (b->requires_grad) {
            T* gb = b->grad.data();
            const T* pa = a->data.data();
            for (std::int64_t i = 0; i < n; ++i) gb[i] += gy[i] * pa[i];
        }
    });
    return y;
}

template <class T>
TensorPtr<T> relu(Graph<T>& g, const TensorPtr<T>& x) {
    auto y = make_tensor<T>(x->shape, x->requires_grad);
    const std::int64_t n = y->numel();
    const T* px = x->data.data();
    T* py = y->data.data();
    parallel_for(n, kElementwiseGrain, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) py[i] = px[i] > T(0) ? px[i] : T(0);
    });
    g.record("relu", {x}, y, [x, y] {
        if (!x->requires_grad) return;
        const std::int64_t n = y->numel();
        const T* gy = y->grad.data();
        const T* px = x->data.data();
        T* gx = x->grad.data();
        for (std::int64_t i = 0; i < n; ++i)
            if (px[i] > T(0)) gx[i] += gy[i];
    });
    return y;
}

// Row-major sequential accumulation; the fixed order keeps runs reproducible.
template <class T>
TensorPtr<T> sum_all(Graph<T>& g, const TensorPtr<T>& x) {
    auto y = make_tensor<T>(Shape(1, 1, 1, 1), x->requires_grad);
    T acc = T(0);
    for (T v : x->data) acc += v;
    y->data[0] = acc;
    g.record("sum_all", {x}, y, [x, y] {
        if (!x->requires_grad) return;
        const T gy = y->grad[0];
        for (T& gv : x->grad) gv += gy;
    });
    return y;
}

// ---------------------------------------------------------------------------
// convolution (Eq.-style cross-correlation: indices add, no kernel flip)
// ---------------------------------------------------------------------------

template <class T>
TensorPtr<T> conv2d(Graph<T>& g, const TensorPtr<T>& x, const TensorPtr<T>& w,
                    const TensorPtr<T>& bias, const ConvSpec& spec) {
    spec.validate();
    const Shape ws(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel);
    if (!(w->shape == ws))
        throw std::invalid_argument("conv2d: weight shape " + w->shape.str() + " does not match spec " + ws.str());
    if (x->shape.c() != spec.in_channels)
        throw std::invalid_argument("conv2d: input has " + std::to_string(x->shape.c()) +
                                    " channels, spec expects " + std::to_string(spec.in_channels));
    if (spec.has_bias) {
        if (!bias || !(bias->shape == Shape(1, spec.out_channels, 1, 1)))
            throw std::invalid_argument("conv2d: bias missing or misshapen");
    } else if (bias) {
        throw std::invalid_argument("conv2d: unexpected bias tensor");
    }

    const std::int64_t N = x->shape.n(), IC = spec.in_channels, H = x->shape.h(), W = x->shape.w();
    const std::int64_t OC = spec.out_channels, K = spec.kernel, S = spec.stride, R = spec.rate, P = spec.padding;
    const std::int64_t OH = spec.out_extent(H), OW = spec.out_extent(W);
    if (OH < 1 || OW < 1)
        throw std::invalid_argument("conv2d: output extent < 1 for input " + x->shape.str());

    auto y = make_tensor<T>(Shape(N, OC, OH, OW),
                            any_requires_grad<T>({x, w, bias ? bias : TensorPtr<T>()}));

    const T* px = x->data.data();
    const T* pw = w->data.data();
    const T* pb = bias ? bias->data.data() : nullptr;
    T* py = y->data.data();
    const std::int64_t plane = OH * OW;
    const std::int64_t taps = IC * K * K;
    const bool pointwise = K == 1 && S == 1 && P == 0;

    // y(oc, p) = sum_k w(oc, k) * col(k, p); taps accumulate in ascending
    // (ic, kh, kw) order, with exact zeros where a tap falls into the padding
    if (pointwise) {
        parallel_for(N * OC, 1, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t item = lo; item < hi; ++item) {
                const std::int64_t n = item / OC, oc = item % OC;
                T* out = py + item * plane;
                std::fill(out, out + plane, pb ? pb[oc] : T(0));
                for (std::int64_t ic = 0; ic < IC; ++ic) {
                    const T wv = pw[oc * IC + ic];
                    const T* src = px + (n * IC + ic) * plane;
                    for (std::int64_t p = 0; p < plane; ++p) out[p] += wv * src[p];
                }
            }
        });
    } else {
        std::vector<T> col(static_cast<std::size_t>(taps * plane));
        for (std::int64_t n = 0; n < N; ++n) {
            detail::im2col(px + n * IC * H * W, IC, H, W, spec, OH, OW, col.data());
            parallel_for(OC, 1, [&](std::int64_t lo, std::int64_t hi) {
                for (std::int64_t oc = lo; oc < hi; ++oc) {
                    T* out = py + (n * OC + oc) * plane;
                    std::fill(out, out + plane, pb ? pb[oc] : T(0));
                    const T* wrow = pw + oc * taps;
                    for (std::int64_t k = 0; k < taps; ++k) {
                        const T wv = wrow[k];
                        const T* src = col.data() + k * plane;
                        for (std::int64_t p = 0; p < plane; ++p) out[p] += wv * src[p];
                    }
                }
            });
        }
    }

    std::vector<TensorPtr<T>> inputs{x, w};
    if (bias) inputs.push_back(bias);
    g.record("conv2d", std::move(inputs), y, [x, w, bias, y, spec] {
        const std::int64_t N = x->shape.n(), IC = spec.in_channels, H = x->shape.h(), W = x->shape.w();
        const std::int64_t OC = spec.out_channels, K = spec.kernel, S = spec.stride, R = spec.rate,
                           P = spec.padding;
        const std::int64_t OH = y->shape.h(), OW = y->shape.w();
        const std::int64_t plane = OH * OW;
        const std::int64_t taps = IC * K * K;
        const bool pointwise = K == 1 && S == 1 && P == 0;
        const T* gy = y->grad.data();
        const T* px = x->data.data();
        const T* pw = w->data.data();

        if (pointwise) {
            if (x->requires_grad) {
                T* gx = x->grad.data();
                parallel_for(N * IC, 1, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t item = lo; item < hi; ++item) {
                        const std::int64_t n = item / IC, ic = item % IC;
                        T* dst = gx + item * plane;
                        for (std::int64_t oc = 0; oc < OC; ++oc) {
                            const T wv = pw[oc * IC + ic];
                            const T* src = gy + (n * OC + oc) * plane;
                            for (std::int64_t p = 0; p < plane; ++p) dst[p] += wv * src[p];
                        }
                    }
                });
            }
            if (w->requires_grad) {
                T* gw = w->grad.data();
                parallel_for(OC, 1, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t oc = lo; oc < hi; ++oc)
                        for (std::int64_t ic = 0; ic < IC; ++ic) {
                            T acc = T(0);
                            for (std::int64_t n = 0; n < N; ++n)
                                acc += detail::lane_dot(gy + (n * OC + oc) * plane,
                                                        px + (n * IC + ic) * plane, plane);
                            gw[oc * IC + ic] += acc;
                        }
                });
            }
        } else {
            std::vector<T> col(static_cast<std::size_t>(taps * plane));
            std::vector<T> dcol(x->requires_grad ? static_cast<std::size_t>(taps * plane) : 0);
            for (std::int64_t n = 0; n < N; ++n) {
                if (w->requires_grad) {
                    detail::im2col(px + n * IC * H * W, IC, H, W, spec, OH, OW, col.data());
                    T* gw = w->grad.data();
                    parallel_for(OC, 1, [&](std::int64_t lo, std::int64_t hi) {
                        for (std::int64_t oc = lo; oc < hi; ++oc) {
                            const T* gyplane = gy + (n * OC + oc) * plane;
                            for (std::int64_t k = 0; k < taps; ++k)
                                gw[oc * taps + k] +=
                                    detail::lane_dot(gyplane, col.data() + k * plane, plane);
                        }
                    });
                }
                if (x->requires_grad) {
                    parallel_for(taps, 4, [&](std::int64_t lo, std::int64_t hi) {
                        for (std::int64_t k = lo; k < hi; ++k) {
                            T* dst = dcol.data() + k * plane;
                            std::fill(dst, dst + plane, T(0));
                            for (std::int64_t oc = 0; oc < OC; ++oc) {
                                const T wv = pw[oc * taps + k];
                                const T* src = gy + (n * OC + oc) * plane;
                                for (std::int64_t p = 0; p < plane; ++p) dst[p] += wv * src[p];
                            }
                        }
                    });
                    detail::col2im_add(dcol.data(), IC, H, W, spec, OH, OW,
                                       x->grad.data() + n * IC * H * W);
                }
            }
        }

        if (bias && bias->requires_grad) {
            T* gb = bias->grad.data();
            parallel_for(OC, 1, [&](std::int64_t lo, std::int64_t hi) {
                for (std::int64_t oc = lo; oc < hi; ++oc) {
                    T acc = T(0);
                    for (std::int64_t n = 0; n < N; ++n) {
                        const T* gyplane = gy + (n * OC + oc) * plane;
                        for (std::int64_t i = 0; i < plane; ++i) acc += gyplane[i];
                    }
                    gb[oc] += acc;
                }
            });
        }
    });
    return y;
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

// Training mode normalizes with biased batch statistics (divide by N*H*W) and
// blends them into the running buffers; inference depends only on the running
// buffers. Statistics accumulate in double, per channel, in row-major order.
template <class T>
TensorPtr<T> batch_norm(Graph<T>& g, const TensorPtr<T>& x, const TensorPtr<T>& gamma,
                        const TensorPtr<T>& beta, const TensorPtr<T>& running_mean,
                        const TensorPtr<T>& running_var, double epsilon, double momentum,
                        bool training) {
    const std::int64_t N = x->shape.n(), C = x->shape.c(), H = x->shape.h(), W = x->shape.w();
    const Shape param_shape(1, C, 1, 1);
    for (const auto& t : {gamma, beta, running_mean, running_var})
        if (!(t->shape == param_shape))
            throw std::invalid_argument("batch_norm: per-channel parameter shape " + t->shape.str() +
                                        " does not match " + param_shape.str());
    const std::int64_t m = N * H * W;
    if (training && m < 2)
        throw std::invalid_argument("batch_norm: training mode requires N*H*W >= 2");

    auto y = make_tensor<T>(x->shape, any_requires_grad<T>({x, gamma, beta}));
    const std::int64_t plane = H * W;
    const T* px = x->data.data();
    T* py = y->data.data();
    const T* pg = gamma->data.data();
    const T* pbeta = beta->data.data();

    std::vector<T> mean(static_cast<std::size_t>(C)), invstd(static_cast<std::size_t>(C));
    if (training) {
        parallel_for(C, 1, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t c = lo; c < hi; ++c) {
                double sum = 0.0;
                for (std::int64_t n = 0; n < N; ++n) {
                    const T* row = px + (n * C + c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) sum += static_cast<double>(row[i]);
                }
                const double mu = sum / static_cast<double>(m);
                double sq = 0.0;
                for (std::int64_t n = 0; n < N; ++n) {
                    const T* row = px + (n * C + c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        const double d = static_cast<double>(row[i]) - mu;
                        sq += d * d;
                    }
                }
                const double var = sq / static_cast<double>(m);
                mean[c] = static_cast<T>(mu);
                invstd[c] = static_cast<T>(1.0 / std::sqrt(var + epsilon));
                running_mean->data[c] =
                    static_cast<T>(momentum * static_cast<double>(running_mean->data[c]) + (1.0 - momentum) * mu);
                running_var->data[c] =
                    static_cast<T>(momentum * static_cast<double>(running_var->data[c]) + (1.0 - momentum) * var);
            }
        });
    } else {
        for (std::int64_t c = 0; c < C; ++c) {
            mean[c] = running_mean->data[c];
            invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var->data[c]) + epsilon));
        }
    }

    parallel_for(N * C, 1, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t item = lo; item < hi; ++item) {
            const std::int64_t c = item % C;
            const T scale = pg[c] * invstd[c];
            const T shift = pbeta[c] - scale * mean[c];
            const T* row = px + item * plane;
            T* out = py + item * plane;
            for (std::int64_t i = 0; i < plane; ++i) out[i] = scale * row[i] + shift;
        }
    });

    g.record("batch_norm", {x, gamma, beta, running_mean, running_var}, y,
             [x, gamma, beta, y, mean, invstd, training] {
                 const std::int64_t N = x->shape.n(), C = x->shape.c(), plane = x->shape.h() * x->shape.w();
                 const std::int64_t m = N * plane;
                 const T* gy = y->grad.data();
                 const T* px = x->data.data();
                 const T* pg = gamma->data.data();
                 parallel_for(C, 1, [&](std::int64_t lo, std::int64_t hi) {
                     for (std::int64_t c = lo; c < hi; ++c) {
                         double sum_dy = 0.0, sum_dy_xhat = 0.0;
                         for (std::int64_t n = 0; n < N; ++n) {
                             const T* gyr = gy + (n * C + c) * plane;
                             const T* xr = px + (n * C + c) * plane;
                             for (std::int64_t i = 0; i < plane; ++i) {
                                 const double xhat = (static_cast<double>(xr[i]) - mean[c]) * invstd[c];
                                 sum_dy += gyr[i];
                                 sum_dy_xhat += static_cast<double>(gyr[i]) * xhat;
                             }
                         }
                         if (gamma->requires_grad) gamma->grad[c] += static_cast<T>(sum_dy_xhat);
                         if (beta->requires_grad) beta->grad[c] += static_cast<T>(sum_dy);
                         if (!x->requires_grad) continue;
                         const double gs = static_cast<double>(pg[c]) * invstd[c];
                         for (std::int64_t n = 0; n < N; ++n) {
                             const T* gyr = gy + (n * C + c) * plane;
                             const T* xr = px + (n * C + c) * plane;
                             T* gxr = x->grad.data() + (n * C + c) * plane;
                             if (training) {
                                 for (std::int64_t i = 0; i < plane; ++i) {
                                     const double xhat = (static_cast<double>(xr[i]) - mean[c]) * invstd[c];
                                     gxr[i] += static_cast<T>(
                                         gs * (gyr[i] - sum_dy / m - xhat * sum_dy_xhat / m));
                                 }
                             } else {
                                 for (std::int64_t i = 0; i < plane; ++i)
                                     gxr[i] += static_cast<T>(gs * gyr[i]);
                             }
                         }
                     }
                 });
             });
    return y;
}

// ---------------------------------------------------------------------------
// bilinear resize (half-pixel centers, edge clamped)
// ---------------------------------------------------------------------------

namespace detail {

struct AxisMap {
    std::vector<std::int64_t> i0, i1;
    std::vector<double> frac;
};

inline AxisMap make_axis_map(std::int64_t in, std::int64_t out) {
    AxisMap map;
    map.i0.resize(static_cast<std::size_t>(out));
    map.i1.resize(static_cast<std::size_t>(out));
    map.frac.resize(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::int64_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        src = std::min(std::max(src, 0.0), static_cast<double>(in - 1));
        const std::int64_t i0 = static_cast<std::int64_t>(std::floor(src));
        map.i0[o] = i0;
        map.i1[o] = std::min(i0 + 1, in - 1);
        map.frac[o] = src - static_cast<double>(i0);
    }
    return map;
}

// out-index contributions per input index, for the adjoint gather
inline std::vector<std::vector<std::pair<std::int64_t, double>>> invert_axis_map(const AxisMap& map,
                                                                                 std::int64_t in) {
    std::vector<std::vector<std::pair<std::int64_t, double>>> inv(static_cast<std::size_t>(in));
    for (std::int64_t o = 0; o < static_cast<std::int64_t>(map.i0.size()); ++o) {
        inv[map.i0[o]].emplace_back(o, 1.0 - map.frac[o]);
        inv[map.i1[o]].emplace_back(o, map.frac[o]);
    }
    return inv;
}

}  // namespace detail

template <class T>
TensorPtr<T> bilinear_resize(Graph<T>& g, const TensorPtr<T>& x, std::int64_t out_h, std::int64_t out_w) {
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("bilinear_resize: output extents must be >= 1");
    const std::int64_t N = x->shape.n(), C = x->shape.c(), H = x->shape.h(), W = x->shape.w();
    auto y = make_tensor<T>(Shape(N, C, out_h, out_w), x->requires_grad);

    const detail::AxisMap ym = detail::make_axis_map(H, out_h);
    const detail::AxisMap xm = detail::make_axis_map(W, out_w);
    const T* px = x->data.data();
    T* py = y->data.data();

    parallel_for(N * C, 1, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t item = lo; item < hi; ++item) {
            const T* plane = px + item * H * W;
            T* out = py + item * out_h * out_w;
            for (std::int64_t oy = 0; oy < out_h; ++oy) {
                const std::int64_t y0 = ym.i0[oy], y1 = ym.i1[oy];
                const double fy = ym.frac[oy];
                const T* row0 = plane + y0 * W;
                const T* row1 = plane + y1 * W;
                for (std::int64_t ox = 0; ox < out_w; ++ox) {
                    const std::int64_t x0 = xm.i0[ox], x1 = xm.i1[ox];
                    const double fx = xm.frac[ox];
                    const double top = (1.0 - fx) * row0[x0] + fx * row0[x1];
                    const double bot = (1.0 - fx) * row1[x0] + fx * row1[x1];
                    out[oy * out_w + ox] = static_cast<T>((1.0 - fy) * top + fy * bot);
                }
            }
        }
    });

    g.record("bilinear_resize", {x}, y, [x, y, ym, xm] {
        if (!x->requires_grad) return;
        const std::int64_t N = x->shape.n(), C = x->shape.c(), H = x->shape.h(), W = x->shape.w();
        const std::int64_t out_h = y->shape.h(), out_w = y->shape.w();
        const auto inv_y = detail::invert_axis_map(ym, H);
        const auto inv_x = detail::invert_axis_map(xm, W);
        const T* gy = y->grad.data();
        T* gx = x->grad.data();
        parallel_for(N * C, 1, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t item = lo; item < hi; ++item) {
                const T* gout = gy + item * out_h * out_w;
                T* gin = gx + item * H * W;
                for (std::int64_t iy = 0; iy < H; ++iy) {
                    for (std::int64_t ix = 0; ix < W; ++ix) {
                        double acc = 0.0;
                        for (const auto& [oy, wy] : inv_y[iy]) {
                            if (wy == 0.0) continue;
                            for (const auto& [ox, wx] : inv_x[ix])
                                acc += wy * wx * static_cast<double>(gout[oy * out_w + ox]);
                        }
                        gin[iy * W + ix] += static_cast<T>(acc);
                    }
                }
            }
        });
    });
    return y;
}

// ---------------------------------------------------------------------------
// channel concatenation
// ---------------------------------------------------------------------------

template <class T>
TensorPtr<T> concat_channels(Graph<T>& g, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->shape.n() != b->shape.n() || a->shape.h() != b->shape.h() || a->shape.w() != b->shape.w())
        throw std::invalid_argument("concat_channels: batch/spatial mismatch " + a->shape.str() + " vs " +
                                    b->shape.str());
    const std::int64_t N = a->shape.n(), Ca = a->shape.c(), Cb = b->shape.c();
    const std::int64_t plane = a->shape.h() * a->shape.w();
    auto y = make_tensor<T>(Shape(N, Ca + Cb, a->shape.h(), a->shape.w()), any_requires_grad<T>({a, b}));
    for (std::int64_t n = 0; n < N; ++n) {
        std::memcpy(y->data.data() + n * (Ca + Cb) * plane, a->data.data() + n * Ca * plane,
                    sizeof(T) * static_cast<std::size_t>(Ca * plane));
        std::memcpy(y->data.data() + (n * (Ca + Cb) + Ca) * plane, b->data.data() + n * Cb * plane,
                    sizeof(T) * static_cast<std::size_t>(Cb * plane));
    }
    g.record("concat_channels", {a, b}, y, [a, b, y] {
        const std::int64_t N = a->shape.n(), Ca = a->shape.c(), Cb = b->shape.c();
        const std::int64_t plane = a->shape.h() * a->shape.w();
        const T* gy = y->grad.data();
        for (std::int64_t n = 0; n < N; ++n) {
            if (a->requires_grad) {
                T* ga = a->grad.data() + n * Ca * plane;
                const T* src = gy + n * (Ca + Cb) * plane;
                for (std::int64_t i = 0; i < Ca * plane; ++i) ga[i] += src[i];
            }
            if (b->requires_grad) {
                T* gb = b->grad.data() + n * Cb * plane;
                const T* src = gy + (n * (Ca + Cb) + Ca) * plane;
                for (std::int64_t i = 0; i < Cb * plane; ++i) gb[i] += src[i];
            }
        }
    });
    return y;
}

// ---------------------------------------------------------------------------
// softmax + pixel-wise cross entropy (two classes)
// ---------------------------------------------------------------------------

template <class T>
struct SoftmaxCrossEntropy {
    TensorPtr<T> loss;   // scalar, mean over all N*H*W pixels
    TensorPtr<T> probs;  // (N,2,H,W), detached from the tape
};

template <class T>
SoftmaxCrossEntropy<T> softmax_cross_entropy(Graph<T>& g, const TensorPtr<T>& logits,
                                             const TensorPtr<T>& target) {
    const std::int64_t N = logits->shape.n(), C = logits->shape.c(), H = logits->shape.h(),
                       W = logits->shape.w();
    if (C != 2) throw std::invalid_argument("softmax_cross_entropy: logits must have 2 channels");
    if (!(target->shape == Shape(N, 1, H, W)))
        throw std::invalid_argument("softmax_cross_entropy: target shape " + target->shape.str() +
                                    " does not match logits " + logits->shape.str());

    const std::int64_t plane = H * W;
    auto probs = make_tensor<T>(logits->shape, false);
    auto loss = make_tensor<T>(Shape(1, 1, 1, 1), logits->requires_grad);

    const T* pl = logits->data.data();
    const T* pt = target->data.data();
    T* pp = probs->data.data();
    double total = 0.0;
    for (std::int64_t n = 0; n < N; ++n) {
        const T* l0 = pl + (n * 2 + 0) * plane;
        const T* l1 = pl + (n * 2 + 1) * plane;
        T* p0 = pp + (n * 2 + 0) * plane;
        T* p1 = pp + (n * 2 + 1) * plane;
        const T* t = pt + n * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
            if (!(t[i] == T(0) || t[i] == T(1)))
                throw std::invalid_argument("softmax_cross_entropy: target value outside {0,1}");
            const double a = l0[i], b = l1[i];
            const double mx = std::max(a, b);
            const double e0 = std::exp(a - mx), e1 = std::exp(b - mx);
            const double lse = mx + std::log(e0 + e1);
            p0[i] = static_cast<T>(e0 / (e0 + e1));
            p1[i] = static_cast<T>(e1 / (e0 + e1));
            total += lse - (t[i] == T(1) ? b : a);
        }
    }
    const std::int64_t count = N * plane;
    loss->data[0] = static_cast<T>(total / static_cast<double>(count));

    g.record("softmax_cross_entropy", {logits, target}, loss, [logits, target, probs, loss] {
        if (!logits->requires_grad) return;
        const std::int64_t N = logits->shape.n(), plane = logits->shape.h() * logits->shape.w();
        const T scale = loss->grad[0] / static_cast<T>(N * plane);
        const T* pp = probs->data.data();
        const T* pt = target->data.data();
        T* gl = logits->grad.data();
        for (std::int64_t n = 0; n < N; ++n) {
            const T* p0 = pp + (n * 2 + 0) * plane;
            const T* p1 = pp + (n * 2 + 1) * plane;
            T* g0 = gl + (n * 2 + 0) * plane;
            T* g1 = gl + (n * 2 + 1) * plane;
            const T* t = pt + n * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
                const T one_hot1 = t[i];  // values are exactly 0 or 1
                g0[i] += scale * (p0[i] - (T(1) - one_hot1));
                g1[i] += scale * (p1[i] - one_hot1);
            }
        }
    });
    return {loss, probs};
}

// Inference-time per-pixel softmax over the two class channels; no recording.
template <class T>
TensorPtr<T> softmax2_probs(const TensorPtr<T>& logits) {
    const std::int64_t N = logits->shape.n(), C = logits->shape.c();
    if (C != 2) throw std::invalid_argument("softmax2_probs: logits must have 2 channels");
    const std::int64_t plane = logits->shape.h() * logits->shape.w();
    auto probs = make_tensor<T>(logits->shape, false);
    const T* pl = logits->data.data();
    T* pp = probs->data.data();
    for (std::int64_t n = 0; n < N; ++n) {
        const T* l0 = pl + (n * 2 + 0) * plane;
        const T* l1 = pl + (n * 2 + 1) * plane;
        T* p0 = pp + (n * 2 + 0) * plane;
        T* p1 = pp + (n * 2 + 1) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
            const double mx = std::max<double>(l0[i], l1[i]);
            const double e0 = std::exp(l0[i] - mx), e1 = std::exp(l1[i] - mx);
            p0[i] = static_cast<T>(e0 / (e0 + e1));
            p1[i] = static_cast<T>(e1 / (e0 + e1));
        }
    }
    return probs;
}

}  // namespace atroseg
