#pragma once

#include <cstdint>
#include <vector>

#include "pmtl/tensor.hpp"

namespace pmtl {

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Scalar s);
Tensor relu(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);

// [B,C,h,w] -> [B,h*w,C] token view and its inverse.
Tensor to_tokens(const Tensor& x);
Tensor from_tokens(const Tensor& x, int h, int w);

Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// Weighted sum of scalar loss terms: sum_i coeffs[i] * terms[i].
Tensor weighted_sum(const std::vector<Tensor>& terms, const std::vector<Scalar>& coeffs);

// x: [..., K] treated as a stack of rows, w: [K, N] -> [..., N].
Tensor matmul(const Tensor& x, const Tensor& w);
// matmul plus a broadcast bias [N].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Softmax over the last dimension.
Tensor softmax_last(const Tensor& x);

// ---------------------------------------------------------------------------
// Convolution / normalization / resampling
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);

// Training mode normalizes with batch statistics and updates the running
// buffers in place; eval mode uses the running buffers.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& run_mean,
                   Tensor& run_var, bool training, Scalar momentum = 0.1, Scalar eps = 1e-5);

Tensor layernorm_last(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      Scalar eps = 1e-5);

Tensor bilinear_upsample(const Tensor& x, int out_h, int out_w);
Tensor nearest_upsample2x(const Tensor& x);

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

// Captured post-softmax attention weights, for diagnostics dumps.
struct AttnCapture {
    Shape shape;  // [B, heads, P, S]
    std::vector<Scalar> weights;
};

// Scaled dot-product attention over already-projected q/k/v: q [B,P,D],
// k/v [B,S,D]; per-head scale 1/sqrt(D/heads).
Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads,
                           AttnCapture* capture = nullptr);

// ---------------------------------------------------------------------------
// Vector quantization
// ---------------------------------------------------------------------------

// Nearest-slot replacement per spatial element, Euclidean metric, ties to the
// lowest slot index. Backward is a straight-through copy into x; the codebook
// receives no gradient from this op.
Tensor quantize_st(const Tensor& x, const Tensor& codebook, IntTensor& indices_out);

// ||sg[x] - z_sel||^2 + beta * ||x - sg[z_sel]||^2, mean over elements.
// The first term trains the codebook, the second commits the encoder.
Tensor vq_aux_loss(const Tensor& x, const Tensor& codebook, const IntTensor& indices,
                   Scalar beta);

// ---------------------------------------------------------------------------
// Prototype similarity
// ---------------------------------------------------------------------------

// Cosine similarity of every token against every slot: x [B,P,D], slots [T,D]
// -> [B,P,T]. Norms are floored at `eps`.
Tensor cosine_to_slots(const Tensor& x, const Tensor& slots, Scalar eps = 1e-8);

// Sum over masked samples (all positions) of -log probs[b,p,cls].
// Caller divides by the contributing count.
Tensor masked_nll_sum(const Tensor& probs, int cls, const std::vector<std::uint8_t>& sample_mask);

// Margin loss over per-task token sets (each [B,P,d]). Aggregates each task's
// tokens to a batch-mean anchor, compares anchor-to-sample cosines across
// tasks, and hinges at `alpha`; mean over T*B*(T-1) triples. `literal_sign`
// swaps the positive/negative roles in the hinge.
Tensor tc_loss(const std::vector<Tensor>& task_tokens, Scalar alpha, bool literal_sign);

// ---------------------------------------------------------------------------
// Supervised / reconstruction losses
// ---------------------------------------------------------------------------

// Elementwise smooth-L1 (quadratic inside |r|<1, linear outside), mean-reduced.
Tensor smooth_l1_loss(const Tensor& pred, const Tensor& target);

// Mean pixel cross-entropy over samples with mask[b] != 0. Requires at least
// one masked sample.
Tensor cross_entropy_masked(const Tensor& logits, const IntTensor& labels,
                            const std::vector<std::uint8_t>& sample_mask);

// Mean absolute error over masked samples.
Tensor l1_loss_masked(const Tensor& pred, const Tensor& target,
                      const std::vector<std::uint8_t>& sample_mask);

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

bool all_finite(const Tensor& t);

}  // namespace pmtl
