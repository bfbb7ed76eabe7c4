#include <cmath>
#include <vector>

#include "op_utils.hpp"
#include "pmtl/ops.hpp"

namespace pmtl {

using detail::CMatMap;
using detail::CVecMap;
using detail::EMat;
using detail::EVec;
using detail::MatMap;
using detail::OpBuilder;
using detail::parent_grad;
using detail::parent_value;

namespace {

int count_set(const std::vector<std::uint8_t>& mask) {
    int n = 0;
    for (auto m : mask) n += m != 0;
    return n;
}

}  // namespace

Tensor smooth_l1_loss(const Tensor& pred, const Tensor& target) {
    check(pred.shape() == target.shape(), "smooth_l1_loss: shape mismatch " +
                                              shape_str(pred.shape()) + " vs " +
                                              shape_str(target.shape()));
    const std::int64_t n = pred.numel();
    check(n > 0, "smooth_l1_loss: empty input");
    OpBuilder ob({1}, {&pred, &target});
    const Scalar* pp = pred.data();
    const Scalar* pt = target.data();
    Scalar acc = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const Scalar r = pp[i] - pt[i];
        const Scalar a = std::abs(r);
        acc += a < 1 ? Scalar(0.5) * r * r : a - Scalar(0.5);
    }
    ob.data()[0] = acc / static_cast<Scalar>(n);
    return ob.done([n](detail::Node& self) {
        const Scalar g = self.grad[0] / static_cast<Scalar>(n);
        const Scalar* pp = parent_value(self, 0).data();
        const Scalar* pt = parent_value(self, 1).data();
        Scalar* gp = parent_grad(self, 0);
        Scalar* gt = parent_grad(self, 1);
        for (std::int64_t i = 0; i < n; ++i) {
            const Scalar r = pp[i] - pt[i];
            const Scalar d = std::abs(r) < 1 ? r : (r > 0 ? Scalar(1) : Scalar(-1));
            if (gp) gp[i] += g * d;
            if (gt) gt[i] -= g * d;
        }
    });
}

Tensor cross_entropy_masked(const Tensor& logits, const IntTensor& labels,
                            const std::vector<std::uint8_t>& sample_mask) {
    check(logits.ndim() == 4, "cross_entropy_masked: logits must be [B,C,H,W]");
    const int B = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
    check(labels.shape == Shape({B, H, W}), "cross_entropy_masked: label shape mismatch");
    check(static_cast<int>(sample_mask.size()) == B, "cross_entropy_masked: mask length != B");
    const int labeled = count_set(sample_mask);
    check(labeled > 0, "cross_entropy_masked: no labeled sample in batch");
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    const std::int64_t count = static_cast<std::int64_t>(labeled) * hw;

    OpBuilder ob({1}, {&logits});
    const Scalar* pl = logits.data();
    Scalar acc = 0;
    for (int b = 0; b < B; ++b) {
        if (!sample_mask[static_cast<std::size_t>(b)]) continue;
        for (std::int64_t p = 0; p < hw; ++p) {
            const std::int32_t y = labels.data[static_cast<std::size_t>(b * hw + p)];
            check(y >= 0 && y < C, "cross_entropy_masked: label " + std::to_string(y) +
                                       " out of range for " + std::to_string(C) + " classes");
            const std::int64_t base = static_cast<std::int64_t>(b) * C * hw + p;
            Scalar m = pl[base];
            for (int c = 1; c < C; ++c) m = std::max(m, pl[base + static_cast<std::int64_t>(c) * hw]);
            Scalar z = 0;
            for (int c = 0; c < C; ++c) z += std::exp(pl[base + static_cast<std::int64_t>(c) * hw] - m);
            acc += m + std::log(z) - pl[base + static_cast<std::int64_t>(y) * hw];
        }
    }
    ob.data()[0] = acc / static_cast<Scalar>(count);
    return ob.done([B, C, hw, count, mask = sample_mask, lab = labels.data](detail::Node& self) {
        const Scalar g = self.grad[0] / static_cast<Scalar>(count);
        const Scalar* pl = parent_value(self, 0).data();
        if (Scalar* gl = parent_grad(self, 0)) {
            for (int b = 0; b < B; ++b) {
                if (!mask[static_cast<std::size_t>(b)]) continue;
                for (std::int64_t p = 0; p < hw; ++p) {
                    const std::int32_t y = lab[static_cast<std::size_t>(b * hw + p)];
                    const std::int64_t base = static_cast<std::int64_t>(b) * C * hw + p;
                    Scalar m = pl[base];
                    for (int c = 1; c < C; ++c) {
                        m = std::max(m, pl[base + static_cast<std::int64_t>(c) * hw]);
                    }
                    Scalar z = 0;
                    for (int c = 0; c < C; ++c) {
                        z += std::exp(pl[base + static_cast<std::int64_t>(c) * hw] - m);
                    }
                    const Scalar inv_z = Scalar(1) / z;
                    for (int c = 0; c < C; ++c) {
                        const std::int64_t xi = base + static_cast<std::int64_t>(c) * hw;
                        const Scalar soft = std::exp(pl[xi] - m) * inv_z;
                        gl[xi] += g * (soft - (c == y ? Scalar(1) : Scalar(0)));
                    }
                }
            }
        }
    });
}

Tensor l1_loss_masked(const Tensor& pred, const Tensor& target,
                      const std::vector<std::uint8_t>& sample_mask) {
    check(pred.shape() == target.shape(), "l1_loss_masked: shape mismatch");
    check(pred.ndim() >= 1, "l1_loss_masked: scalar input");
    const int B = pred.dim(0);
    check(static_cast<int>(sample_mask.size()) == B, "l1_loss_masked: mask length != B");
    const int labeled = count_set(sample_mask);
    check(labeled > 0, "l1_loss_masked: no labeled sample in batch");
    const std::int64_t per_sample = pred.numel() / B;
    const std::int64_t count = labeled * per_sample;

    OpBuilder ob({1}, {&pred, &target});
    const Scalar* pp = pred.data();
    const Scalar* pt = target.data();
    Scalar acc = 0;
    for (int b = 0; b < B; ++b) {
        if (!sample_mask[static_cast<std::size_t>(b)]) continue;
        const std::int64_t off = b * per_sample;
        for (std::int64_t i = 0; i < per_sample; ++i) acc += std::abs(pp[off + i] - pt[off + i]);
    }
    ob.data()[0] = acc / static_cast<Scalar>(count);
    return ob.done([B, per_sample, count, mask = sample_mask](detail::Node& self) {
        const Scalar g = self.grad[0] / static_cast<Scalar>(count);
        const Scalar* pp = parent_value(self, 0).data();
        const Scalar* pt = parent_value(self, 1).data();
        Scalar* gp = parent_grad(self, 0);
        Scalar* gt = parent_grad(self, 1);
        for (int b = 0; b < B; ++b) {
            if (!mask[static_cast<std::size_t>(b)]) continue;
            const std::int64_t off = b * per_sample;
            for (std::int64_t i = 0; i < per_sample; ++i) {
                const Scalar r = pp[off + i] - pt[off + i];
                const Scalar s = r > 0 ? Scalar(1) : (r < 0 ? Scalar(-1) : Scalar(0));
                if (gp) gp[off + i] += g * s;
                if (gt) gt[off + i] -= g * s;
            }
        }
    });
}

Tensor masked_nll_sum(const Tensor& probs, int cls,
                      const std::vector<std::uint8_t>& sample_mask) {
    check(probs.ndim() == 3, "masked_nll_sum: probs must be [B,P,T]");
    const int B = probs.dim(0), P = probs.dim(1), T = probs.dim(2);
    check(cls >= 0 && cls < T, "masked_nll_sum: class out of range");
    check(static_cast<int>(sample_mask.size()) == B, "masked_nll_sum: mask length != B");

    OpBuilder ob({1}, {&probs});
    const Scalar* pp = probs.data();
    Scalar acc = 0;
    for (int b = 0; b < B; ++b) {
        if (!sample_mask[static_cast<std::size_t>(b)]) continue;
        for (int p = 0; p < P; ++p) {
            acc -= std::log(pp[(static_cast<std::int64_t>(b) * P + p) * T + cls]);
        }
    }
    ob.data()[0] = acc;
    return ob.done([B, P, T, cls, mask = sample_mask](detail::Node& self) {
        const Scalar g = self.grad[0];
        const Scalar* pp = parent_value(self, 0).data();
        if (Scalar* gp = parent_grad(self, 0)) {
            for (int b = 0; b < B; ++b) {
                if (!mask[static_cast<std::size_t>(b)]) continue;
                for (int p = 0; p < P; ++p) {
                    const std::int64_t i = (static_cast<std::int64_t>(b) * P + p) * T + cls;
                    gp[i] -= g / pp[i];
                }
            }
        }
    });
}

Tensor tc_loss(const std::vector<Tensor>& task_tokens, Scalar alpha, bool literal_sign) {
    const int T = static_cast<int>(task_tokens.size());
    check(T >= 2, "tc_loss: need at least two tasks");
    const int B = task_tokens[0].dim(0);
    check(B >= 1, "tc_loss: empty batch");
    const std::int64_t D = task_tokens[0].numel() / B;  // hw*d, flattened per sample
    for (const Tensor& t : task_tokens) {
        check(t.ndim() == 3, "tc_loss: tokens must be [B,P,d]");
        check(t.dim(0) == B && t.numel() / B == D, "tc_loss: token shape mismatch across tasks");
    }
    constexpr Scalar kNormFloor = 1e-8;

    // Batch-mean anchors per task, on fully flattened per-sample vectors.
    EMat anchors(T, D);
    for (int t = 0; t < T; ++t) {
        CMatMap X(task_tokens[t].data(), B, D);
        anchors.row(t) = X.colwise().mean();
    }
    std::vector<Scalar> anchor_norm(static_cast<std::size_t>(T));
    std::vector<std::uint8_t> anchor_floored(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
        const Scalar nm = anchors.row(t).norm();
        anchor_floored[static_cast<std::size_t>(t)] = nm < kNormFloor;
        anchor_norm[static_cast<std::size_t>(t)] = std::max(nm, kNormFloor);
    }
    // cosines[t](tau, i) = cos(anchor_t, sample i of task tau)
    std::vector<EMat> cosines(static_cast<std::size_t>(T));
    std::vector<Scalar> sample_norm(static_cast<std::size_t>(T) * B);
    std::vector<std::uint8_t> sample_floored(static_cast<std::size_t>(T) * B);
    for (int tau = 0; tau < T; ++tau) {
        CMatMap X(task_tokens[static_cast<std::size_t>(tau)].data(), B, D);
        for (int i = 0; i < B; ++i) {
            const Scalar nm = X.row(i).norm();
            sample_floored[static_cast<std::size_t>(tau * B + i)] = nm < kNormFloor;
            sample_norm[static_cast<std::size_t>(tau * B + i)] = std::max(nm, kNormFloor);
        }
    }
    for (int t = 0; t < T; ++t) {
        cosines[static_cast<std::size_t>(t)].resize(T, B);
        for (int tau = 0; tau < T; ++tau) {
            CMatMap X(task_tokens[static_cast<std::size_t>(tau)].data(), B, D);
            EVec dots = X * anchors.row(t).transpose();
            for (int i = 0; i < B; ++i) {
                cosines[static_cast<std::size_t>(t)](tau, i) =
                    dots(i) / (anchor_norm[static_cast<std::size_t>(t)] *
                               sample_norm[static_cast<std::size_t>(tau * B + i)]);
            }
        }
    }

    const std::int64_t n_triples = static_cast<std::int64_t>(T) * B * (T - 1);
    Scalar acc = 0;
    for (int t = 0; t < T; ++t) {
        for (int i = 0; i < B; ++i) {
            const Scalar pos = cosines[static_cast<std::size_t>(t)](t, i);
            for (int tau = 0; tau < T; ++tau) {
                if (tau == t) continue;
                const Scalar neg = cosines[static_cast<std::size_t>(t)](tau, i);
                const Scalar hinge = literal_sign ? pos - neg + alpha : neg - pos + alpha;
                if (hinge > 0) acc += hinge;
            }
        }
    }

    Tensor out({1});
    out.data()[0] = acc / static_cast<Scalar>(n_triples);
    bool track = false;
    for (const Tensor& t : task_tokens) track = track || t.requires_grad();
    if (!track) return out;
    out.set_requires_grad(true);
    for (const Tensor& t : task_tokens) out.node()->parents.push_back(t.node());

    out.node()->backward_fn = [T, B, D, alpha, literal_sign, n_triples,
                               anchors = std::move(anchors), anchor_norm = std::move(anchor_norm),
                               anchor_floored = std::move(anchor_floored),
                               cosines = std::move(cosines), sample_norm = std::move(sample_norm),
                               sample_floored = std::move(sample_floored)](detail::Node& self) {
        const Scalar g = self.grad[0] / static_cast<Scalar>(n_triples);
        // d(loss)/d(cosine) for each (anchor t, sample tau,i) pair.
        std::vector<EMat> dcos(static_cast<std::size_t>(T));
        for (int t = 0; t < T; ++t) dcos[static_cast<std::size_t>(t)] = EMat::Zero(T, B);
        for (int t = 0; t < T; ++t) {
            for (int i = 0; i < B; ++i) {
                const Scalar pos = cosines[static_cast<std::size_t>(t)](t, i);
                for (int tau = 0; tau < T; ++tau) {
                    if (tau == t) continue;
                    const Scalar neg = cosines[static_cast<std::size_t>(t)](tau, i);
                    const Scalar hinge = literal_sign ? pos - neg + alpha : neg - pos + alpha;
                    if (hinge <= 0) continue;
                    const Scalar sign = literal_sign ? Scalar(1) : Scalar(-1);
                    dcos[static_cast<std::size_t>(t)](t, i) += sign * g;
                    dcos[static_cast<std::size_t>(t)](tau, i) -= sign * g;
                }
            }
        }
        // Push cosine gradients into anchors and samples, then anchors into
        // their task's samples through the batch mean.
        EMat danchor = EMat::Zero(T, D);
        for (int t = 0; t < T; ++t) {
            const Scalar nu = anchor_norm[static_cast<std::size_t>(t)];
            for (int tau = 0; tau < T; ++tau) {
                Scalar* gtau = self.parents[static_cast<std::size_t>(tau)]->requires_grad
                                   ? self.parents[static_cast<std::size_t>(tau)]->grad_data()
                                   : nullptr;
                CMatMap X(self.parents[static_cast<std::size_t>(tau)]->value.data(), B, D);
                for (int i = 0; i < B; ++i) {
                    const Scalar dc = dcos[static_cast<std::size_t>(t)](tau, i);
                    if (dc == 0) continue;
                    const Scalar ny = sample_norm[static_cast<std::size_t>(tau * B + i)];
                    const Scalar c = cosines[static_cast<std::size_t>(t)](tau, i);
                    // d c / d anchor
                    danchor.row(t) += dc * (X.row(i) / (nu * ny));
                    if (!anchor_floored[static_cast<std::size_t>(t)]) {
                        danchor.row(t) -= dc * (c / (nu * nu)) * anchors.row(t);
                    }
                    // d c / d sample
                    if (gtau) {
                        detail::MatMap GY(gtau, B, D);
                        GY.row(i) += dc * (anchors.row(t) / (nu * ny));
                        if (!sample_floored[static_cast<std::size_t>(tau * B + i)]) {
                            GY.row(i) -= dc * (c / (ny * ny)) * X.row(i);
                        }
                    }
                }
            }
        }
        const Scalar inv_b = Scalar(1) / static_cast<Scalar>(B);
        for (int t = 0; t < T; ++t) {
            auto& parent = self.parents[static_cast<std::size_t>(t)];
            if (!parent->requires_grad) continue;
            detail::MatMap GX(parent->grad_data(), B, D);
            for (int i = 0; i < B; ++i) GX.row(i) += inv_b * danchor.row(t);
        }
    };
    return out;
}

}  // namespace pmtl
