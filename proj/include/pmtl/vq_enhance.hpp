#pragma once

#include "pmtl/nn.hpp"

namespace pmtl {

// K learnable slots of dimension c, trained through the auxiliary
// dictionary/commitment loss (the hard argmin passes no gradient).
struct Codebook {
    Tensor slots;  // [K, c]

    Codebook() = default;
    Codebook(int n_slots, int dim, Rng& rng);

    int size() const { return slots.dim(0); }
    void visit(const std::string& prefix, const ParamVisitor& v);
};

struct QuantizeResult {
    Tensor quantized;  // [B,c,h,w], straight-through in backward
    IntTensor indices; // [B,h,w]
};

// Nearest-slot quantization of every spatial element.
QuantizeResult quantize(const Tensor& encoded, const Codebook& codebook);

// Element-wise sum of encoded and quantized features.
Tensor integrate(const Tensor& encoded, const Tensor& quantized);

// Dictionary + commitment terms for the codebook path.
Tensor quantization_aux_loss(const Tensor& encoded, const Codebook& codebook,
                             const IntTensor& indices, Scalar beta = 0.25);

// Slots that never appear in `indices`; a diagnostic, not a training signal.
int count_dead_slots(const Codebook& codebook, const IntTensor& indices);

// Convolutional reconstruction decoder: integrated features back to an
// image-resolution RGB field (values unclamped).
struct ReconDecoder {
    Conv2dLayer c1, c2, c3;

    ReconDecoder() = default;
    ReconDecoder(int in_ch, Rng& rng);

    Tensor forward(const Tensor& fi) const;
    void visit(const std::string& prefix, const ParamVisitor& v);
};

// Smooth-L1 reconstruction objective, mean over batch/channels/pixels.
Tensor tae_loss(const Tensor& reconstruction, const Tensor& image);

}  // namespace pmtl
