#pragma once

// Volumetric graph ops on channel-major (C, D, H, W) tensors: conv3d via
// im2col + GEMM, instance norm, nearest upsampling, reflect padding, crops.

#include "cvox/autodiff.hpp"

namespace cvox::ad {

namespace detail {

inline int64_t conv_out_dim(int64_t in, int64_t k, int64_t stride, int64_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// col is (Ci*k^3) x (Do*Ho*Wo), row-major
template <class T>
void im2col3d(const T* x, int64_t Ci, int64_t D, int64_t H, int64_t W, int64_t k, int64_t stride,
              int64_t pad, int64_t Do, int64_t Ho, int64_t Wo, T* col) {
    const int64_t N = Do * Ho * Wo;
    int64_t row = 0;
    for (int64_t ci = 0; ci < Ci; ++ci) {
        const T* xc = x + ci * D * H * W;
        for (int64_t kz = 0; kz < k; ++kz)
            for (int64_t ky = 0; ky < k; ++ky)
                for (int64_t kx = 0; kx < k; ++kx, ++row) {
                    T* dst = col + row * N;
                    for (int64_t od = 0; od < Do; ++od) {
                        const int64_t iz = od * stride + kz - pad;
                        const bool zok = iz >= 0 && iz < D;
                        for (int64_t oh = 0; oh < Ho; ++oh) {
                            const int64_t iy = oh * stride + ky - pad;
                            const bool yok = iy >= 0 && iy < H;
                            T* d = dst + (od * Ho + oh) * Wo;
                            if (!zok || !yok) {
                                std::fill_n(d, Wo, T(0));
                                continue;
                            }
                            const T* src = xc + (iz * H + iy) * W;
                            for (int64_t ow = 0; ow < Wo; ++ow) {
                                const int64_t ix = ow * stride + kx - pad;
                                d[ow] = (ix >= 0 && ix < W) ? src[ix] : T(0);
                            }
                        }
                    }
                }
    }
}

// forward conv on raw tensors (shared by the op and its backward-data pass)
template <class T>
Tensor<T> conv3d_raw(const Tensor<T>& x, const Tensor<T>& w, const T* bias, int64_t stride,
                     int64_t pad) {
    const int64_t Ci = x.shape()[0], D = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const int64_t Co = w.shape()[0], k = w.shape()[2];
    const int64_t Do = conv_out_dim(D, k, stride, pad);
    const int64_t Ho = conv_out_dim(H, k, stride, pad);
    const int64_t Wo = conv_out_dim(W, k, stride, pad);
    if (Do < 1 || Ho < 1 || Wo < 1) throw Error::contract("conv3d: output would be empty");
    const int64_t K = Ci * k * k * k, N = Do * Ho * Wo;

    Tensor<T> col(Shape{K, N});
    im2col3d(x.data(), Ci, D, H, W, k, stride, pad, Do, Ho, Wo, col.data());

    Tensor<T> out(Shape{Co, Do, Ho, Wo});
    CMapRM<T> Wm(w.data(), Co, K), Cm(col.data(), K, N);
    MapRM<T> Om(out.data(), Co, N);
    Om.noalias() = Wm * Cm;
    if (bias)
        for (int64_t co = 0; co < Co; ++co) {
            T* o = out.data() + co * N;
            for (int64_t i = 0; i < N; ++i) o[i] += bias[co];
        }
    return out;
}

// zero-stuffs a (C, d, h, w) tensor by `stride` and flips/transposes the
// kernel so that backward-data reduces to a stride-1 forward conv
template <class T>
Tensor<T> conv3d_backward_data(const Tensor<T>& gy, const Tensor<T>& w, const Shape& x_shape,
                               int64_t stride, int64_t pad) {
    const int64_t Co = w.shape()[0], Ci = w.shape()[1], k = w.shape()[2];
    const int64_t D = x_shape[1], H = x_shape[2], W = x_shape[3];
    const int64_t Do = gy.shape()[1], Ho = gy.shape()[2], Wo = gy.shape()[3];

    // transposed + flipped kernel: wt[ci][co][kz][ky][kx] = w[co][ci][k-1-kz][k-1-ky][k-1-kx]
    Tensor<T> wt(Shape{Ci, Co, k, k, k});
    for (int64_t co = 0; co < Co; ++co)
        for (int64_t ci = 0; ci < Ci; ++ci)
            for (int64_t kz = 0; kz < k; ++kz)
                for (int64_t ky = 0; ky < k; ++ky)
                    for (int64_t kx = 0; kx < k; ++kx)
                        wt[(((ci * Co + co) * k + kz) * k + ky) * k + kx] =
                            w[(((co * Ci + ci) * k + (k - 1 - kz)) * k + (k - 1 - ky)) * k +
                              (k - 1 - kx)];

    Tensor<T> gys;  // zero-stuffed upstream gradient
    if (stride == 1) {
        gys = gy;
    } else {
        const int64_t Ds = (Do - 1) * stride + 1, Hs = (Ho - 1) * stride + 1,
                      Ws = (Wo - 1) * stride + 1;
        gys = Tensor<T>(Shape{Co, Ds, Hs, Ws});
        for (int64_t co = 0; co < Co; ++co)
            for (int64_t z = 0; z < Do; ++z)
                for (int64_t y = 0; y < Ho; ++y)
                    for (int64_t x_ = 0; x_ < Wo; ++x_)
                        gys[((co * Ds + z * stride) * Hs + y * stride) * Ws + x_ * stride] =
                            gy[((co * Do + z) * Ho + y) * Wo + x_];
    }

    // full correlation with pad k-1-pad reproduces the transposed conv; the
    // stuffed tensor may undershoot the input extent, so pad the high side
    const int64_t bpad = k - 1 - pad;
    const int64_t needD = D + 2 * pad - k + 1, needH = H + 2 * pad - k + 1, needW = W + 2 * pad - k + 1;
    if (gys.shape()[1] < needD || gys.shape()[2] < needH || gys.shape()[3] < needW) {
        Tensor<T> padded(Shape{Co, needD, needH, needW});
        const int64_t ds = gys.shape()[1], hs = gys.shape()[2], ws = gys.shape()[3];
        for (int64_t co = 0; co < Co; ++co)
            for (int64_t z = 0; z < ds; ++z)
                for (int64_t y = 0; y < hs; ++y)
                    std::copy_n(gys.data() + ((co * ds + z) * hs + y) * ws, ws,
                                padded.data() + ((co * needD + z) * needH + y) * needW);
        gys = std::move(padded);
    }
    Tensor<T> gx = conv3d_raw<T>(gys, wt, nullptr, 1, bpad);
    if (!same_shape(gx.shape(), x_shape)) throw Error::numeric("conv3d backward-data shape bug");
    return gx;
}

}  // namespace detail

// 3D convolution, isotropic kernel k, zero padding. x (Ci,D,H,W), w (Co,Ci,k,k,k), b (Co).
template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int64_t stride, int64_t pad) {
    if (x.shape().size() != 4 || w.shape().size() != 5)
        throw Error::contract("conv3d: expected (C,D,H,W) input and (Co,Ci,k,k,k) weight");
    if (x.shape()[0] != w.shape()[1])
        throw Error::config("conv3d: channel mismatch, input " + shape_str(x.shape()) +
                            " weight " + shape_str(w.shape()));
    Tensor<T> out = detail::conv3d_raw(x.value(), w.value(), b.defined() ? b.value().data() : nullptr,
                                       stride, pad);
    std::vector<Var<T>> parents{x, w};
    if (b.defined()) parents.push_back(b);
    const Shape x_shape = x.shape();
    return detail::make_op<T>(std::move(out), std::move(parents), [stride, pad, x_shape](Node<T>& nd) {
        const Tensor<T>& xv = nd.parents[0]->val;
        const Tensor<T>& wv = nd.parents[1]->val;
        const int64_t Co = wv.shape()[0], Ci = wv.shape()[1], k = wv.shape()[2];
        const int64_t K = Ci * k * k * k;
        const int64_t N = nd.val.size() / Co;

        if (nd.parents[0]->requires_grad)
            detail::accum(*nd.parents[0],
                          detail::conv3d_backward_data(nd.grad, wv, x_shape, stride, pad));

        if (nd.parents[1]->requires_grad) {
            // dW = dY * col(X)^T, recomputing the im2col buffer
            Tensor<T> col(Shape{K, N});
            detail::im2col3d(xv.data(), Ci, xv.shape()[1], xv.shape()[2], xv.shape()[3], k, stride,
                             pad, nd.val.shape()[1], nd.val.shape()[2], nd.val.shape()[3],
                             col.data());
            Tensor<T> gw(Shape{Co, Ci, k, k, k});
            detail::CMapRM<T> G(nd.grad.data(), Co, N), Cm(col.data(), K, N);
            detail::MapRM<T> GW(gw.data(), Co, K);
            GW.noalias() = G * Cm.transpose();
            detail::accum(*nd.parents[1], gw);
        }

        if (nd.parents.size() > 2 && nd.parents[2]->requires_grad) {
            Tensor<T> gb(Shape{Co});
            for (int64_t co = 0; co < Co; ++co) {
                double acc = 0.0;
                const T* g = nd.grad.data() + co * N;
                for (int64_t i = 0; i < N; ++i) acc += static_cast<double>(g[i]);
                gb[co] = static_cast<T>(acc);
            }
            detail::accum(*nd.parents[2], gb);
        }
    });
}

// Instance norm over the spatial extent of each channel, with affine params.
template <class T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
    const int64_t C = x.shape()[0];
    const int64_t S = x.value().size() / C;
    if (gamma.value().size() != C || beta.value().size() != C)
        throw Error::contract("instance_norm: affine param size mismatch");

    Tensor<T> out(x.shape());
    std::vector<T> mu(C), istd(C);
    for (int64_t c = 0; c < C; ++c) {
        const T* xc = x.value().data() + c * S;
        double m = 0.0;
        for (int64_t i = 0; i < S; ++i) m += xc[i];
        m /= S;
        double v = 0.0;
        for (int64_t i = 0; i < S; ++i) {
            const double d = xc[i] - m;
            v += d * d;
        }
        v /= S;
        mu[c] = static_cast<T>(m);
        istd[c] = static_cast<T>(1.0 / std::sqrt(v + static_cast<double>(eps)));
        T* oc = out.data() + c * S;
        const T g = gamma.value()[c], bta = beta.value()[c];
        for (int64_t i = 0; i < S; ++i) oc[i] = (xc[i] - mu[c]) * istd[c] * g + bta;
    }

    return detail::make_op<T>(
        std::move(out), {x, gamma, beta},
        [C, S, mu = std::move(mu), istd = std::move(istd)](Node<T>& nd) {
            const Tensor<T>& xv = nd.parents[0]->val;
            const Tensor<T>& gv = nd.parents[1]->val;
            Tensor<T> gx(xv.shape());
            Tensor<T> ggamma(Shape{C}), gbeta(Shape{C});
            for (int64_t c = 0; c < C; ++c) {
                const T* xc = xv.data() + c * S;
                const T* gy = nd.grad.data() + c * S;
                double sum_gy = 0.0, sum_gy_xhat = 0.0;
                for (int64_t i = 0; i < S; ++i) {
                    const double xhat = (xc[i] - mu[c]) * istd[c];
                    sum_gy += gy[i];
                    sum_gy_xhat += static_cast<double>(gy[i]) * xhat;
                }
                ggamma[c] = static_cast<T>(sum_gy_xhat);
                gbeta[c] = static_cast<T>(sum_gy);
                if (nd.parents[0]->requires_grad) {
                    const double mean_gy = sum_gy / S;
                    const double mean_gy_xhat = sum_gy_xhat / S;
                    T* gxc = gx.data() + c * S;
                    const double g = gv[c];
                    for (int64_t i = 0; i < S; ++i) {
                        const double xhat = (xc[i] - mu[c]) * istd[c];
                        gxc[i] = static_cast<T>(g * istd[c] *
                                                (gy[i] - mean_gy - xhat * mean_gy_xhat));
                    }
                }
            }
            if (nd.parents[0]->requires_grad) detail::accum(*nd.parents[0], gx);
            detail::accum(*nd.parents[1], ggamma);
            detail::accum(*nd.parents[2], gbeta);
        });
}

template <class T>
Var<T> upsample_nearest(const Var<T>& x, int64_t f) {
    const int64_t C = x.shape()[0], D = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    Tensor<T> out(Shape{C, D * f, H * f, W * f});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t z = 0; z < D * f; ++z)
            for (int64_t y = 0; y < H * f; ++y) {
                const T* src = x.value().data() + ((c * D + z / f) * H + y / f) * W;
                T* dst = out.data() + ((c * D * f + z) * H * f + y) * W * f;
                for (int64_t xw = 0; xw < W * f; ++xw) dst[xw] = src[xw / f];
            }
    return detail::make_op<T>(std::move(out), {x}, [C, D, H, W, f](Node<T>& nd) {
        if (!nd.parents[0]->requires_grad) return;
        Tensor<T> g(Shape{C, D, H, W});
        for (int64_t c = 0; c < C; ++c)
            for (int64_t z = 0; z < D * f; ++z)
                for (int64_t y = 0; y < H * f; ++y) {
                    const T* src = nd.grad.data() + ((c * D * f + z) * H * f + y) * W * f;
                    T* dst = g.data() + ((c * D + z / f) * H + y / f) * W;
                    for (int64_t xw = 0; xw < W * f; ++xw) dst[xw / f] += src[xw];
                }
        detail::accum(*nd.parents[0], g);
    });
}

// Reflect padding on the high side of each spatial axis (no edge repeat).
// Requires pad < dim along each padded axis.
template <class T>
Var<T> pad_reflect_hi(const Var<T>& x, int64_t pd, int64_t ph, int64_t pw) {
    const int64_t C = x.shape()[0], D = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    if (pd >= D || ph >= H || pw >= W) throw Error::contract("pad_reflect_hi: pad >= dim");
    const int64_t Dn = D + pd, Hn = H + ph, Wn = W + pw;
    auto refl = [](int64_t i, int64_t n) { return i < n ? i : 2 * n - 2 - i; };
    Tensor<T> out(Shape{C, Dn, Hn, Wn});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t z = 0; z < Dn; ++z)
            for (int64_t y = 0; y < Hn; ++y) {
                const T* src = x.value().data() + ((c * D + refl(z, D)) * H + refl(y, H)) * W;
                T* dst = out.data() + ((c * Dn + z) * Hn + y) * Wn;
                for (int64_t xw = 0; xw < Wn; ++xw) dst[xw] = src[refl(xw, W)];
            }
    return detail::make_op<T>(std::move(out), {x}, [C, D, H, W, Dn, Hn, Wn](Node<T>& nd) {
        if (!nd.parents[0]->requires_grad) return;
        auto refl = [](int64_t i, int64_t n) { return i < n ? i : 2 * n - 2 - i; };
        Tensor<T> g(Shape{C, D, H, W});
        for (int64_t c = 0; c < C; ++c)
            for (int64_t z = 0; z < Dn; ++z)
                for (int64_t y = 0; y < Hn; ++y) {
                    const T* src = nd.grad.data() + ((c * Dn + z) * Hn + y) * Wn;
                    T* dst = g.data() + ((c * D + refl(z, D)) * H + refl(y, H)) * W;
                    for (int64_t xw = 0; xw < Wn; ++xw) dst[refl(xw, W)] += src[xw];
                }
        detail::accum(*nd.parents[0], g);
    });
}

// Crop starting at the low corner.
template <class T>
Var<T> crop_spatial(const Var<T>& x, int64_t dd, int64_t hh, int64_t ww) {
    const int64_t C = x.shape()[0], D = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    if (dd > D || hh > H || ww > W) throw Error::contract("crop_spatial: crop exceeds extent");
    Tensor<T> out(Shape{C, dd, hh, ww});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t z = 0; z < dd; ++z)
            for (int64_t y = 0; y < hh; ++y)
                std::copy_n(x.value().data() + ((c * D + z) * H + y) * W, ww,
                            out.data() + ((c * dd + z) * hh + y) * ww);
    return detail::make_op<T>(std::move(out), {x}, [C, D, H, W, dd, hh, ww](Node<T>& nd) {
        if (!nd.parents[0]->requires_grad) return;
        Tensor<T> g(Shape{C, D, H, W});
        for (int64_t c = 0; c < C; ++c)
            for (int64_t z = 0; z < dd; ++z)
                for (int64_t y = 0; y < hh; ++y) {
                    const T* src = nd.grad.data() + ((c * dd + z) * hh + y) * ww;
                    T* dst = g.data() + ((c * D + z) * H + y) * W;
                    for (int64_t xw = 0; xw < ww; ++xw) dst[xw] += src[xw];
                }
        detail::accum(*nd.parents[0], g);
    });
}

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    if (a.shape().size() != b.shape().size()) throw Error::contract("concat_channels: rank mismatch");
    for (size_t i = 1; i < a.shape().size(); ++i)
        if (a.shape()[i] != b.shape()[i]) throw Error::contract("concat_channels: spatial mismatch");
    const int64_t Ca = a.shape()[0], Cb = b.shape()[0];
    const int64_t S = a.value().size() / Ca;
    Shape out_shape = a.shape();
    out_shape[0] = Ca + Cb;
    Tensor<T> out(out_shape);
    std::copy_n(a.value().data(), Ca * S, out.data());
    std::copy_n(b.value().data(), Cb * S, out.data() + Ca * S);
    return detail::make_op<T>(std::move(out), {a, b}, [Ca, Cb, S](Node<T>& nd) {
        if (nd.parents[0]->requires_grad) {
            Tensor<T> g(nd.parents[0]->val.shape());
            std::copy_n(nd.grad.data(), Ca * S, g.data());
            detail::accum(*nd.parents[0], g);
        }
        if (nd.parents[1]->requires_grad) {
            Tensor<T> g(nd.parents[1]->val.shape());
            std::copy_n(nd.grad.data() + Ca * S, Cb * S, g.data());
            detail::accum(*nd.parents[1], g);
        }
    });
}

template <class T>
Var<T> slice_channels(const Var<T>& x, int64_t from, int64_t count) {
    const int64_t C = x.shape()[0];
    const int64_t S = x.value().size() / C;
    if (from < 0 || from + count > C) throw Error::contract("slice_channels: out of range");
    Shape out_shape = x.shape();
    out_shape[0] = count;
    Tensor<T> out(out_shape);
    std::copy_n(x.value().data() + from * S, count * S, out.data());
    return detail::make_op<T>(std::move(out), {x}, [C, S, from, count](Node<T>& nd) {
        if (!nd.parents[0]->requires_grad) return;
        Tensor<T> g(nd.parents[0]->val.shape());
        std::copy_n(nd.grad.data(), count * S, g.data() + from * S);
        detail::accum(*nd.parents[0], g);
    });
}

}  // namespace cvox::ad
