#include <cmath>
#include <vector>

#include "op_utils.hpp"
#include "pmtl/ops.hpp"

namespace pmtl {

using detail::CMatMap;
using detail::CVecMap;
using detail::MatMap;
using detail::OpBuilder;
using detail::parent_grad;
using detail::parent_value;
using detail::VecMap;

namespace {

// x[b] -> columns [C*kh*kw, OH*OW], zero-padded borders.
void im2col(const Scalar* x, int C, int H, int W, int kh, int kw, int stride, int pad, int OH,
            int OW, Scalar* col) {
    for (int c = 0; c < C; ++c) {
        const Scalar* plane = x + static_cast<std::int64_t>(c) * H * W;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                Scalar* row = col + (static_cast<std::int64_t>(c) * kh * kw + ky * kw + kx) *
                                        (static_cast<std::int64_t>(OH) * OW);
                for (int oy = 0; oy < OH; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) {
                        for (int ox = 0; ox < OW; ++ox) row[oy * OW + ox] = 0;
                        continue;
                    }
                    for (int ox = 0; ox < OW; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        row[oy * OW + ox] = (ix < 0 || ix >= W) ? Scalar(0) : plane[iy * W + ix];
                    }
                }
            }
        }
    }
}

// Transpose of im2col: scatters column gradients back to the input plane.
void col2im(const Scalar* col, int C, int H, int W, int kh, int kw, int stride, int pad, int OH,
            int OW, Scalar* gx) {
    for (int c = 0; c < C; ++c) {
        Scalar* plane = gx + static_cast<std::int64_t>(c) * H * W;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const Scalar* row = col + (static_cast<std::int64_t>(c) * kh * kw + ky * kw + kx) *
                                              (static_cast<std::int64_t>(OH) * OW);
                for (int oy = 0; oy < OH; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (int ox = 0; ox < OW; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) plane[iy * W + ix] += row[oy * OW + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    check(x.ndim() == 4, "conv2d: input must be [B,C,H,W], got " + shape_str(x.shape()));
    check(w.ndim() == 4, "conv2d: weight must be [O,C,kh,kw], got " + shape_str(w.shape()));
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    check(w.dim(1) == C, "conv2d: channel mismatch, input C=" + std::to_string(C) +
                             " weight C=" + std::to_string(w.dim(1)));
    check(b.ndim() == 1 && b.dim(0) == O, "conv2d: bias must be [O]");
    check(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
    const int OH = (H + 2 * pad - kh) / stride + 1;
    const int OW = (W + 2 * pad - kw) / stride + 1;
    check(OH >= 1 && OW >= 1, "conv2d: kernel larger than padded input");

    const int CKK = C * kh * kw;
    const std::int64_t ohw = static_cast<std::int64_t>(OH) * OW;
    OpBuilder ob({B, O, OH, OW}, {&x, &w, &b});
    std::vector<Scalar> col(static_cast<std::size_t>(CKK) * ohw);
    CMatMap Wm(w.data(), O, CKK);
    CVecMap Bv(b.data(), O);
    for (int bi = 0; bi < B; ++bi) {
        im2col(x.data() + static_cast<std::int64_t>(bi) * C * H * W, C, H, W, kh, kw, stride, pad,
               OH, OW, col.data());
        CMatMap Cm(col.data(), CKK, ohw);
        MatMap Om(ob.data() + static_cast<std::int64_t>(bi) * O * ohw, O, ohw);
        Om.noalias() = Wm * Cm;
        Om.colwise() += Bv;
    }
    return ob.done([B, C, H, W, O, kh, kw, stride, pad, OH, OW, CKK, ohw](detail::Node& self) {
        const Scalar* gout = self.grad.data();
        const std::vector<Scalar>& xv = parent_value(self, 0);
        CMatMap Wm(parent_value(self, 1).data(), O, CKK);
        Scalar* gx = parent_grad(self, 0);
        Scalar* gw = parent_grad(self, 1);
        Scalar* gb = parent_grad(self, 2);
        std::vector<Scalar> col(static_cast<std::size_t>(CKK) * ohw);
        std::vector<Scalar> dcol(gx ? static_cast<std::size_t>(CKK) * ohw : 0);
        for (int bi = 0; bi < B; ++bi) {
            CMatMap G(gout + static_cast<std::int64_t>(bi) * O * ohw, O, ohw);
            if (gw) {
                im2col(xv.data() + static_cast<std::int64_t>(bi) * C * H * W, C, H, W, kh, kw,
                       stride, pad, OH, OW, col.data());
                CMatMap Cm(col.data(), CKK, ohw);
                MatMap GW(gw, O, CKK);
                GW.noalias() += G * Cm.transpose();
            }
            if (gb) {
                VecMap GB(gb, O);
                GB.noalias() += G.rowwise().sum();
            }
            if (gx) {
                MatMap Dc(dcol.data(), CKK, ohw);
                Dc.noalias() = Wm.transpose() * G;
                col2im(dcol.data(), C, H, W, kh, kw, stride, pad, OH, OW,
                       gx + static_cast<std::int64_t>(bi) * C * H * W);
            }
        }
    });
}

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& run_mean,
                   Tensor& run_var, bool training, Scalar momentum, Scalar eps) {
    check(x.ndim() == 4, "batchnorm2d: input must be [B,C,H,W]");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(gamma.ndim() == 1 && gamma.dim(0) == C && beta.ndim() == 1 && beta.dim(0) == C,
          "batchnorm2d: gamma/beta must be [C]");
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    const std::int64_t n_per_c = static_cast<std::int64_t>(B) * hw;

    std::vector<Scalar> mean(C), invstd(C);
    if (training) {
        for (int c = 0; c < C; ++c) {
            Scalar m = 0;
            for (int bi = 0; bi < B; ++bi) {
                const Scalar* plane = x.data() + (static_cast<std::int64_t>(bi) * C + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) m += plane[i];
            }
            m /= static_cast<Scalar>(n_per_c);
            Scalar v = 0;
            for (int bi = 0; bi < B; ++bi) {
                const Scalar* plane = x.data() + (static_cast<std::int64_t>(bi) * C + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    const Scalar d = plane[i] - m;
                    v += d * d;
                }
            }
            v /= static_cast<Scalar>(n_per_c);
            mean[c] = m;
            invstd[c] = Scalar(1) / std::sqrt(v + eps);
            run_mean.data()[c] = (1 - momentum) * run_mean.data()[c] + momentum * m;
            run_var.data()[c] = (1 - momentum) * run_var.data()[c] + momentum * v;
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean[c] = run_mean.data()[c];
            invstd[c] = Scalar(1) / std::sqrt(run_var.data()[c] + eps);
        }
    }

    OpBuilder ob(x.shape(), {&x, &gamma, &beta});
    Scalar* po = ob.data();
    // Normalized activations are needed in backward; keep them.
    std::vector<Scalar> xhat(static_cast<std::size_t>(x.numel()));
    for (int bi = 0; bi < B; ++bi) {
        for (int c = 0; c < C; ++c) {
            const std::int64_t off = (static_cast<std::int64_t>(bi) * C + c) * hw;
            const Scalar* in = x.data() + off;
            const Scalar g = gamma.data()[c], bt = beta.data()[c];
            const Scalar m = mean[c], is = invstd[c];
            for (std::int64_t i = 0; i < hw; ++i) {
                const Scalar xh = (in[i] - m) * is;
                xhat[static_cast<std::size_t>(off + i)] = xh;
                po[off + i] = g * xh + bt;
            }
        }
    }
    return ob.done(
        [B, C, hw, n_per_c, training, invstd = std::move(invstd),
         xhat = std::move(xhat)](detail::Node& self) {
            const Scalar* g = self.grad.data();
            const std::vector<Scalar>& gam = parent_value(self, 1);
            Scalar* gx = parent_grad(self, 0);
            Scalar* gg = parent_grad(self, 1);
            Scalar* gb = parent_grad(self, 2);
            for (int c = 0; c < C; ++c) {
                Scalar sum_dy = 0, sum_dy_xh = 0;
                for (int bi = 0; bi < B; ++bi) {
                    const std::int64_t off = (static_cast<std::int64_t>(bi) * C + c) * hw;
                    for (std::int64_t i = 0; i < hw; ++i) {
                        sum_dy += g[off + i];
                        sum_dy_xh += g[off + i] * xhat[static_cast<std::size_t>(off + i)];
                    }
                }
                if (gg) gg[c] += sum_dy_xh;
                if (gb) gb[c] += sum_dy;
                if (!gx) continue;
                const Scalar k = gam[static_cast<std::size_t>(c)] * invstd[static_cast<std::size_t>(c)];
                if (training) {
                    const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n_per_c);
                    for (int bi = 0; bi < B; ++bi) {
                        const std::int64_t off = (static_cast<std::int64_t>(bi) * C + c) * hw;
                        for (std::int64_t i = 0; i < hw; ++i) {
                            const Scalar xh = xhat[static_cast<std::size_t>(off + i)];
                            gx[off + i] +=
                                k * (g[off + i] - inv_n * (sum_dy + xh * sum_dy_xh));
                        }
                    }
                } else {
                    for (int bi = 0; bi < B; ++bi) {
                        const std::int64_t off = (static_cast<std::int64_t>(bi) * C + c) * hw;
                        for (std::int64_t i = 0; i < hw; ++i) gx[off + i] += k * g[off + i];
                    }
                }
            }
        });
}

Tensor layernorm_last(const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps) {
    const int D = x.shape().back();
    check(gamma.ndim() == 1 && gamma.dim(0) == D && beta.ndim() == 1 && beta.dim(0) == D,
          "layernorm_last: gamma/beta must be [D]");
    const std::int64_t rows = x.numel() / D;
    OpBuilder ob(x.shape(), {&x, &gamma, &beta});
    std::vector<Scalar> xhat(static_cast<std::size_t>(x.numel()));
    std::vector<Scalar> invstd(static_cast<std::size_t>(rows));
    const Scalar* px = x.data();
    Scalar* po = ob.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const Scalar* in = px + r * D;
        Scalar m = 0;
        for (int j = 0; j < D; ++j) m += in[j];
        m /= D;
        Scalar v = 0;
        for (int j = 0; j < D; ++j) {
            const Scalar d = in[j] - m;
            v += d * d;
        }
        v /= D;
        const Scalar is = Scalar(1) / std::sqrt(v + eps);
        invstd[static_cast<std::size_t>(r)] = is;
        Scalar* out = po + r * D;
        for (int j = 0; j < D; ++j) {
            const Scalar xh = (in[j] - m) * is;
            xhat[static_cast<std::size_t>(r * D + j)] = xh;
            out[j] = gamma.data()[j] * xh + beta.data()[j];
        }
    }
    return ob.done([rows, D, xhat = std::move(xhat), invstd = std::move(invstd)](
                       detail::Node& self) {
        const Scalar* g = self.grad.data();
        const std::vector<Scalar>& gam = parent_value(self, 1);
        Scalar* gx = parent_grad(self, 0);
        Scalar* gg = parent_grad(self, 1);
        Scalar* gb = parent_grad(self, 2);
        for (std::int64_t r = 0; r < rows; ++r) {
            const Scalar* gr = g + r * D;
            const Scalar* xh = xhat.data() + r * D;
            Scalar sum_dyg = 0, sum_dyg_xh = 0;
            for (int j = 0; j < D; ++j) {
                const Scalar dyg = gr[j] * gam[static_cast<std::size_t>(j)];
                sum_dyg += dyg;
                sum_dyg_xh += dyg * xh[j];
                if (gg) gg[j] += gr[j] * xh[j];
                if (gb) gb[j] += gr[j];
            }
            if (!gx) continue;
            const Scalar is = invstd[static_cast<std::size_t>(r)];
            const Scalar inv_d = Scalar(1) / D;
            Scalar* gxr = gx + r * D;
            for (int j = 0; j < D; ++j) {
                const Scalar dyg = gr[j] * gam[static_cast<std::size_t>(j)];
                gxr[j] += is * (dyg - inv_d * (sum_dyg + xh[j] * sum_dyg_xh));
            }
        }
    });
}

Tensor bilinear_upsample(const Tensor& x, int out_h, int out_w) {
    check(x.ndim() == 4, "bilinear_upsample: input must be [B,C,h,w]");
    const int B = x.dim(0), C = x.dim(1), h = x.dim(2), w = x.dim(3);
    check(out_h >= 1 && out_w >= 1, "bilinear_upsample: bad target size");

    // Half-pixel-center source coordinates, clamped at borders.
    struct Taps {
        int lo, hi;
        Scalar frac;
    };
    auto make_taps = [](int in, int out) {
        std::vector<Taps> taps(static_cast<std::size_t>(out));
        const Scalar scale = static_cast<Scalar>(in) / out;
        for (int o = 0; o < out; ++o) {
            Scalar src = (o + Scalar(0.5)) * scale - Scalar(0.5);
            if (src < 0) src = 0;
            if (src > in - 1) src = static_cast<Scalar>(in - 1);
            const int lo = static_cast<int>(std::floor(src));
            const int hi = lo + 1 < in ? lo + 1 : lo;
            taps[static_cast<std::size_t>(o)] = {lo, hi, src - lo};
        }
        return taps;
    };
    const auto ty = make_taps(h, out_h);
    const auto tx = make_taps(w, out_w);

    OpBuilder ob({B, C, out_h, out_w}, {&x});
    const Scalar* px = x.data();
    Scalar* po = ob.data();
    for (int bc = 0; bc < B * C; ++bc) {
        const Scalar* in = px + static_cast<std::int64_t>(bc) * h * w;
        Scalar* out = po + static_cast<std::int64_t>(bc) * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy) {
            const Taps& yy = ty[static_cast<std::size_t>(oy)];
            for (int ox = 0; ox < out_w; ++ox) {
                const Taps& xx = tx[static_cast<std::size_t>(ox)];
                const Scalar v00 = in[yy.lo * w + xx.lo];
                const Scalar v01 = in[yy.lo * w + xx.hi];
                const Scalar v10 = in[yy.hi * w + xx.lo];
                const Scalar v11 = in[yy.hi * w + xx.hi];
                out[oy * out_w + ox] = (1 - yy.frac) * ((1 - xx.frac) * v00 + xx.frac * v01) +
                                       yy.frac * ((1 - xx.frac) * v10 + xx.frac * v11);
            }
        }
    }
    return ob.done([B, C, h, w, out_h, out_w, ty, tx](detail::Node& self) {
        const Scalar* g = self.grad.data();
        if (Scalar* gx = parent_grad(self, 0)) {
            for (int bc = 0; bc < B * C; ++bc) {
                Scalar* gin = gx + static_cast<std::int64_t>(bc) * h * w;
                const Scalar* gout = g + static_cast<std::int64_t>(bc) * out_h * out_w;
                for (int oy = 0; oy < out_h; ++oy) {
                    const Taps& yy = ty[static_cast<std::size_t>(oy)];
                    for (int ox = 0; ox < out_w; ++ox) {
                        const Taps& xx = tx[static_cast<std::size_t>(ox)];
                        const Scalar go = gout[oy * out_w + ox];
                        gin[yy.lo * w + xx.lo] += (1 - yy.frac) * (1 - xx.frac) * go;
                        gin[yy.lo * w + xx.hi] += (1 - yy.frac) * xx.frac * go;
                        gin[yy.hi * w + xx.lo] += yy.frac * (1 - xx.frac) * go;
                        gin[yy.hi * w + xx.hi] += yy.frac * xx.frac * go;
                    }
                }
            }
        }
    });
}

Tensor nearest_upsample2x(const Tensor& x) {
    check(x.ndim() == 4, "nearest_upsample2x: input must be [B,C,h,w]");
    const int B = x.dim(0), C = x.dim(1), h = x.dim(2), w = x.dim(3);
    OpBuilder ob({B, C, 2 * h, 2 * w}, {&x});
    const Scalar* px = x.data();
    Scalar* po = ob.data();
    for (int bc = 0; bc < B * C; ++bc) {
        const Scalar* in = px + static_cast<std::int64_t>(bc) * h * w;
        Scalar* out = po + static_cast<std::int64_t>(bc) * 4 * h * w;
        for (int oy = 0; oy < 2 * h; ++oy) {
            for (int ox = 0; ox < 2 * w; ++ox) {
                out[oy * 2 * w + ox] = in[(oy / 2) * w + ox / 2];
            }
        }
    }
    return ob.done([B, C, h, w](detail::Node& self) {
        const Scalar* g = self.grad.data();
        if (Scalar* gx = parent_grad(self, 0)) {
            for (int bc = 0; bc < B * C; ++bc) {
                Scalar* gin = gx + static_cast<std::int64_t>(bc) * h * w;
                const Scalar* gout = g + static_cast<std::int64_t>(bc) * 4 * h * w;
                for (int oy = 0; oy < 2 * h; ++oy) {
                    for (int ox = 0; ox < 2 * w; ++ox) {
                        gin[(oy / 2) * w + ox / 2] += gout[oy * 2 * w + ox];
                    }
                }
            }
        }
    });
}

}  // namespace pmtl
