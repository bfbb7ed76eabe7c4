#include "pmtl/task_prototype.hpp"

namespace pmtl {

PrototypeBank::PrototypeBank(int n_tasks, int dim, Rng& rng) : slots(Shape{n_tasks, dim}, true) {
    check(n_tasks >= 1 && dim >= 1, "prototype bank needs positive T and d");
    for (Scalar& v : slots.vec()) v = rng.normal(0.0, 0.02);
}

void PrototypeBank::visit(const std::string& prefix, const ParamVisitor& v) {
    v(prefix + ".slots", slots, ParamKind::Param);
}

TokenProjector::TokenProjector(int in_ch, int dim, Rng& rng)
    : conv(in_ch, dim, 1, 1, 0, rng) {}

Tensor TokenProjector::forward(const Tensor& task_feature) const {
    return to_tokens(conv.forward(task_feature));
}

void TokenProjector::visit(const std::string& prefix, const ParamVisitor& v) {
    conv.visit(prefix + ".conv", v);
}

Tensor task_similarity(const Tensor& tokens, const PrototypeBank& bank) {
    return cosine_to_slots(tokens, bank.slots, 1e-8);
}

Tensor task_affinity(const Tensor& similarity, Scalar temperature) {
    check(temperature > 0, "task_affinity: temperature must be positive");
    if (temperature == 1.0) return softmax_last(similarity);
    return softmax_last(scale(similarity, Scalar(1) / temperature));
}

TkeLoss tke_loss(const Tensor& affinity, int target_task,
                 const std::vector<std::uint8_t>& label_mask) {
    check(affinity.ndim() == 3, "tke_loss: affinity must be [B,hw,T]");
    check(target_task >= 0 && target_task < affinity.dim(2),
          "tke_loss: target task out of range");
    check(static_cast<int>(label_mask.size()) == affinity.dim(0),
          "tke_loss: mask length != batch size");
    TkeLoss out;
    std::int64_t labeled = 0;
    for (std::uint8_t m : label_mask) labeled += m != 0;
    if (labeled == 0) {
        out.value = Tensor::zeros({1});
        out.skipped = true;
        return out;
    }
    out.contributing_pairs = labeled;
    const Scalar inv_count = Scalar(1) / static_cast<Scalar>(labeled * affinity.dim(1));
    out.value = scale(masked_nll_sum(affinity, target_task, label_mask), inv_count);
    return out;
}

Tensor akg_loss(const Tensor& tke, const Tensor& tc) {
    return add(tke, tc);
}

}  // namespace pmtl
