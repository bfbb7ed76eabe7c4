#include "pmtl/vq_enhance.hpp"

#include <vector>

namespace pmtl {

Codebook::Codebook(int n_slots, int dim, Rng& rng) : slots(Shape{n_slots, dim}, true) {
    check(n_slots >= 1, "codebook needs at least one slot");
    for (Scalar& v : slots.vec()) v = rng.normal(0.0, 0.2);
}

void Codebook::visit(const std::string& prefix, const ParamVisitor& v) {
    v(prefix + ".slots", slots, ParamKind::Param);
}

QuantizeResult quantize(const Tensor& encoded, const Codebook& codebook) {
    QuantizeResult r;
    r.quantized = quantize_st(encoded, codebook.slots, r.indices);
    return r;
}

Tensor integrate(const Tensor& encoded, const Tensor& quantized) {
    check(encoded.shape() == quantized.shape(),
          "integrate: shape mismatch " + shape_str(encoded.shape()) + " vs " +
              shape_str(quantized.shape()));
    return add(encoded, quantized);
}

Tensor quantization_aux_loss(const Tensor& encoded, const Codebook& codebook,
                             const IntTensor& indices, Scalar beta) {
    return vq_aux_loss(encoded, codebook.slots, indices, beta);
}

int count_dead_slots(const Codebook& codebook, const IntTensor& indices) {
    std::vector<std::uint8_t> used(static_cast<std::size_t>(codebook.size()), 0);
    for (std::int32_t k : indices.data) used[static_cast<std::size_t>(k)] = 1;
    int dead = 0;
    for (std::uint8_t u : used) dead += u == 0;
    return dead;
}

ReconDecoder::ReconDecoder(int in_ch, Rng& rng) {
    const int mid = std::max(4, in_ch / 2);
    c1 = Conv2dLayer(in_ch, mid, 3, 1, 1, rng);
    c2 = Conv2dLayer(mid, mid, 3, 1, 1, rng);
    c3 = Conv2dLayer(mid, 3, 3, 1, 1, rng);
}

Tensor ReconDecoder::forward(const Tensor& fi) const {
    Tensor x = relu(c1.forward(fi));
    x = nearest_upsample2x(x);
    x = relu(c2.forward(x));
    x = nearest_upsample2x(x);
    return c3.forward(x);
}

void ReconDecoder::visit(const std::string& prefix, const ParamVisitor& v) {
    c1.visit(prefix + ".c1", v);
    c2.visit(prefix + ".c2", v);
    c3.visit(prefix + ".c3", v);
}

Tensor tae_loss(const Tensor& reconstruction, const Tensor& image) {
    return smooth_l1_loss(reconstruction, image);
}

}  // namespace pmtl
