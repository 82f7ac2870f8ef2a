#ifndef CCL_NN_CONV_HPP
#define CCL_NN_CONV_HPP

#include <stdexcept>

#include "ccl/nn/autograd.hpp"

namespace ccl::nn {

/// Geometry of a strided 2D convolution over [C,H,W] feature maps stored
/// channel-major in flat rows.
struct ConvGeom {
    int in_ch, in_h, in_w;
    int out_ch, kernel, stride, pad;
    int out_h, out_w;
};

inline ConvGeom conv_geom(int in_ch, int in_h, int in_w, int out_ch, int kernel, int stride, int pad) {
    ConvGeom g{in_ch, in_h, in_w, out_ch, kernel, stride, pad, 0, 0};
    g.out_h = (in_h + 2 * pad - kernel) / stride + 1;
    g.out_w = (in_w + 2 * pad - kernel) / stride + 1;
    if (g.out_h <= 0 || g.out_w <= 0) throw std::invalid_argument("conv_geom: kernel larger than padded input");
    return g;
}

namespace detail {

/// [N, C*H*W] -> [N*out_h*out_w, C*k*k]
template <class T>
Mat<T> im2col(const Mat<T>& x, const ConvGeom& g) {
    const Eigen::Index n_rows = x.rows() * g.out_h * g.out_w;
    Mat<T> col = Mat<T>::Zero(n_rows, static_cast<Eigen::Index>(g.in_ch) * g.kernel * g.kernel);
    const int hw = g.in_h * g.in_w;
    for (Eigen::Index n = 0; n < x.rows(); ++n) {
        const T* xp = x.row(n).data();
        for (int oh = 0; oh < g.out_h; ++oh) {
            for (int ow = 0; ow < g.out_w; ++ow) {
                T* crow = col.row(n * g.out_h * g.out_w + oh * g.out_w + ow).data();
                const int h0 = oh * g.stride - g.pad;
                const int w0 = ow * g.stride - g.pad;
                for (int c = 0; c < g.in_ch; ++c) {
                    for (int kh = 0; kh < g.kernel; ++kh) {
                        const int h = h0 + kh;
                        if (h < 0 || h >= g.in_h) continue;
                        for (int kw = 0; kw < g.kernel; ++kw) {
                            const int w = w0 + kw;
                            if (w < 0 || w >= g.in_w) continue;
                            crow[(c * g.kernel + kh) * g.kernel + kw] = xp[c * hw + h * g.in_w + w];
                        }
                    }
                }
            }
        }
    }
    return col;
}

/// Adjoint of im2col: scatter-adds [N*out_h*out_w, C*k*k] back into [N, C*H*W].
template <class T>
void col2im_add(const Mat<T>& col, const ConvGeom& g, Mat<T>& x) {
    const int hw = g.in_h * g.in_w;
    for (Eigen::Index n = 0; n < x.rows(); ++n) {
        T* xp = x.row(n).data();
        for (int oh = 0; oh < g.out_h; ++oh) {
            for (int ow = 0; ow < g.out_w; ++ow) {
                const T* crow = col.row(n * g.out_h * g.out_w + oh * g.out_w + ow).data();
                const int h0 = oh * g.stride - g.pad;
                const int w0 = ow * g.stride - g.pad;
                for (int c = 0; c < g.in_ch; ++c) {
                    for (int kh = 0; kh < g.kernel; ++kh) {
                        const int h = h0 + kh;
                        if (h < 0 || h >= g.in_h) continue;
                        for (int kw = 0; kw < g.kernel; ++kw) {
                            const int w = w0 + kw;
                            if (w < 0 || w >= g.in_w) continue;
                            xp[c * hw + h * g.in_w + w] += crow[(c * g.kernel + kh) * g.kernel + kw];
                        }
                    }
                }
            }
        }
    }
}

/// [N*out_h*out_w, Co] -> [N, Co*out_h*out_w]
template <class T>
Mat<T> rows_to_planes(const Mat<T>& rows, Eigen::Index batch, int ch, int oh, int ow) {
    Mat<T> out(batch, static_cast<Eigen::Index>(ch) * oh * ow);
    const int ohw = oh * ow;
    for (Eigen::Index n = 0; n < batch; ++n)
        for (int q = 0; q < ohw; ++q)
            for (int c = 0; c < ch; ++c) out(n, c * ohw + q) = rows(n * ohw + q, c);
    return out;
}

/// [N, Co*out_h*out_w] -> [N*out_h*out_w, Co]
template <class T>
Mat<T> planes_to_rows(const Mat<T>& planes, int ch, int oh, int ow) {
    const int ohw = oh * ow;
    Mat<T> out(planes.rows() * ohw, ch);
    for (Eigen::Index n = 0; n < planes.rows(); ++n)
        for (int q = 0; q < ohw; ++q)
            for (int c = 0; c < ch; ++c) out(n * ohw + q, c) = planes(n, c * ohw + q);
    return out;
}

}  // namespace detail

/// weight layout: [C*k*k, Co]; bias [1, Co].
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvGeom& g) {
    if (x->value.cols() != static_cast<Eigen::Index>(g.in_ch) * g.in_h * g.in_w)
        throw std::invalid_argument("conv2d: input width mismatch");
    if (weight->value.rows() != static_cast<Eigen::Index>(g.in_ch) * g.kernel * g.kernel ||
        weight->value.cols() != g.out_ch)
        throw std::invalid_argument("conv2d: weight shape mismatch");
    Mat<T> col = detail::im2col(x->value, g);
    Mat<T> rows = col * weight->value;
    rows.rowwise() += bias->value.row(0);
    Mat<T> out = detail::rows_to_planes(rows, x->value.rows(), g.out_ch, g.out_h, g.out_w);
    auto col_holder = constant<T>(std::move(col));
    return detail::make_op<T>(std::move(out), {x, weight, bias, col_holder}, [x, weight, bias, g](Node<T>& n) {
        const Mat<T>& col = n.parents[3]->value;
        Mat<T> grows = detail::planes_to_rows(n.grad, g.out_ch, g.out_h, g.out_w);
        if (bias->requires_grad) {
            bias->ensure_grad();
            bias->grad.row(0) += grows.colwise().sum();
        }
        if (weight->requires_grad) {
            weight->ensure_grad();
            weight->grad.noalias() += col.transpose() * grows;
        }
        if (x->requires_grad) {
            x->ensure_grad();
            Mat<T> gcol = grows * weight->value.transpose();
            detail::col2im_add(gcol, g, x->grad);
        }
    });
}

/// Transposed convolution, the adjoint map of conv2d with geometry `g`,
/// where `g` describes the *downsampling* direction: input is g's output
/// side ([Co-like]) and output is g's input side. weight layout matches
/// conv2d: [out_ch*k*k, in_ch] where out_ch is the upsampled channel count.
struct ConvTGeom {
    int in_ch, in_h, in_w;
    int out_ch, kernel, stride, pad;
    int out_h, out_w;
};

inline ConvTGeom convt_geom(int in_ch, int in_h, int in_w, int out_ch, int kernel, int stride, int pad) {
    ConvTGeom g{in_ch, in_h, in_w, out_ch, kernel, stride, pad, 0, 0};
    g.out_h = (in_h - 1) * stride - 2 * pad + kernel;
    g.out_w = (in_w - 1) * stride - 2 * pad + kernel;
    if (g.out_h <= 0 || g.out_w <= 0) throw std::invalid_argument("convt_geom: degenerate output");
    return g;
}

template <class T>
Var<T> conv2d_transpose(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvTGeom& tg) {
    // The adjoint conv maps [out_ch, out_h, out_w] -> [in_ch, in_h, in_w].
    const ConvGeom g = conv_geom(tg.out_ch, tg.out_h, tg.out_w, tg.in_ch, tg.kernel, tg.stride, tg.pad);
    if (g.out_h != tg.in_h || g.out_w != tg.in_w)
        throw std::invalid_argument("conv2d_transpose: inconsistent geometry");
    if (x->value.cols() != static_cast<Eigen::Index>(tg.in_ch) * tg.in_h * tg.in_w)
        throw std::invalid_argument("conv2d_transpose: input width mismatch");
    if (weight->value.rows() != static_cast<Eigen::Index>(tg.out_ch) * tg.kernel * tg.kernel ||
        weight->value.cols() != tg.in_ch)
        throw std::invalid_argument("conv2d_transpose: weight shape mismatch");

    Mat<T> xr = detail::planes_to_rows(x->value, tg.in_ch, tg.in_h, tg.in_w);
    Mat<T> colmat = xr * weight->value.transpose();
    Mat<T> out = Mat<T>::Zero(x->value.rows(), static_cast<Eigen::Index>(tg.out_ch) * tg.out_h * tg.out_w);
    detail::col2im_add(colmat, g, out);
    const int ohw = tg.out_h * tg.out_w;
    for (Eigen::Index n = 0; n < out.rows(); ++n)
        for (int c = 0; c < tg.out_ch; ++c)
            out.row(n).segment(static_cast<Eigen::Index>(c) * ohw, ohw).array() += bias->value(0, c);

    auto xr_holder = constant<T>(std::move(xr));
    return detail::make_op<T>(std::move(out), {x, weight, bias, xr_holder}, [x, weight, bias, tg, g](Node<T>& n) {
        const Mat<T>& xr = n.parents[3]->value;
        if (bias->requires_grad) {
            bias->ensure_grad();
            const int ohw = tg.out_h * tg.out_w;
            for (Eigen::Index nn = 0; nn < n.grad.rows(); ++nn)
                for (int c = 0; c < tg.out_ch; ++c)
                    bias->grad(0, c) += n.grad.row(nn).segment(static_cast<Eigen::Index>(c) * ohw, ohw).sum();
        }
        Mat<T> gcol = detail::im2col(n.grad, g);
        if (weight->requires_grad) {
            weight->ensure_grad();
            weight->grad.noalias() += gcol.transpose() * xr;
        }
        if (x->requires_grad) {
            x->ensure_grad();
            Mat<T> gxr = gcol * weight->value;
            const int ihw = tg.in_h * tg.in_w;
            for (Eigen::Index nn = 0; nn < x->grad.rows(); ++nn)
                for (int q = 0; q < ihw; ++q)
                    for (int c = 0; c < tg.in_ch; ++c) x->grad(nn, c * ihw + q) += gxr(nn * ihw + q, c);
        }
    });
}

template <class T>
Var<T> global_avg_pool(const Var<T>& x, int channels, int h, int w) {
    if (x->value.cols() != static_cast<Eigen::Index>(channels) * h * w)
        throw std::invalid_argument("global_avg_pool: width mismatch");
    const int hw = h * w;
    Mat<T> out(x->value.rows(), channels);
    for (Eigen::Index n = 0; n < x->value.rows(); ++n)
        for (int c = 0; c < channels; ++c)
            out(n, c) = x->value.row(n).segment(static_cast<Eigen::Index>(c) * hw, hw).mean();
    return detail::make_op<T>(std::move(out), {x}, [x, channels, hw](Node<T>& n) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const T inv = T(1) / static_cast<T>(hw);
        for (Eigen::Index nn = 0; nn < n.grad.rows(); ++nn)
            for (int c = 0; c < channels; ++c)
                x->grad.row(nn).segment(static_cast<Eigen::Index>(c) * hw, hw).array() += n.grad(nn, c) * inv;
    });
}

/// Group normalization over [C,H,W] planes with per-channel affine.
template <class T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int channels, int h, int w, int groups,
                  T eps = T(1e-5)) {
    if (channels % groups != 0) throw std::invalid_argument("group_norm: channels % groups != 0");
    if (gamma->value.cols() != channels || beta->value.cols() != channels)
        throw std::invalid_argument("group_norm: affine shape mismatch");
    const int hw = h * w;
    const int gch = channels / groups;
    const Eigen::Index gsize = static_cast<Eigen::Index>(gch) * hw;

    Mat<T> xhat(x->value.rows(), x->value.cols());
    Mat<T> inv_std(x->value.rows(), groups);
    for (Eigen::Index n = 0; n < x->value.rows(); ++n) {
        for (int g = 0; g < groups; ++g) {
            auto seg = x->value.row(n).segment(static_cast<Eigen::Index>(g) * gsize, gsize);
            const T m = seg.mean();
            const T var = (seg.array() - m).square().mean();
            const T is = T(1) / std::sqrt(var + eps);
            inv_std(n, g) = is;
            xhat.row(n).segment(static_cast<Eigen::Index>(g) * gsize, gsize) = (seg.array() - m) * is;
        }
    }
    Mat<T> out(x->value.rows(), x->value.cols());
    for (Eigen::Index n = 0; n < out.rows(); ++n)
        for (int c = 0; c < channels; ++c)
            out.row(n).segment(static_cast<Eigen::Index>(c) * hw, hw) =
                xhat.row(n).segment(static_cast<Eigen::Index>(c) * hw, hw) * gamma->value(0, c) +
                Mat<T>::Constant(1, hw, beta->value(0, c));

    auto xhat_holder = constant<T>(std::move(xhat));
    auto istd_holder = constant<T>(std::move(inv_std));
    return detail::make_op<T>(
        std::move(out), {x, gamma, beta, xhat_holder, istd_holder},
        [x, gamma, beta, channels, hw, groups, gch, gsize](Node<T>& n) {
            const Mat<T>& xhat = n.parents[3]->value;
            const Mat<T>& inv_std = n.parents[4]->value;
            if (gamma->requires_grad) {
                gamma->ensure_grad();
                for (Eigen::Index nn = 0; nn < n.grad.rows(); ++nn)
                    for (int c = 0; c < channels; ++c)
                        gamma->grad(0, c) += n.grad.row(nn)
                                                 .segment(static_cast<Eigen::Index>(c) * hw, hw)
                                                 .dot(xhat.row(nn).segment(static_cast<Eigen::Index>(c) * hw, hw));
            }
            if (beta->requires_grad) {
                beta->ensure_grad();
                for (Eigen::Index nn = 0; nn < n.grad.rows(); ++nn)
                    for (int c = 0; c < channels; ++c)
                        beta->grad(0, c) += n.grad.row(nn).segment(static_cast<Eigen::Index>(c) * hw, hw).sum();
            }
            if (!x->requires_grad) return;
            x->ensure_grad();
            Eigen::Matrix<T, 1, Eigen::Dynamic> ghat(gsize);
            for (Eigen::Index nn = 0; nn < n.grad.rows(); ++nn) {
                for (int g = 0; g < groups; ++g) {
                    for (int j = 0; j < gch; ++j) {
                        const int c = g * gch + j;
                        ghat.segment(static_cast<Eigen::Index>(j) * hw, hw) =
                            n.grad.row(nn).segment(static_cast<Eigen::Index>(c) * hw, hw) * gamma->value(0, c);
                    }
                    auto xh = xhat.row(nn).segment(static_cast<Eigen::Index>(g) * gsize, gsize);
                    const T mean_g = ghat.mean();
                    const T mean_gx = ghat.dot(xh) / static_cast<T>(gsize);
                    x->grad.row(nn).segment(static_cast<Eigen::Index>(g) * gsize, gsize).array() +=
                        ((ghat.array() - mean_g) - xh.array() * mean_gx) * inv_std(nn, g);
                }
            }
        });
}

}  // namespace ccl::nn

#endif  // CCL_NN_CONV_HPP
