#pragma once

#include <vector>

#include "pmtl/nn.hpp"

namespace pmtl {

// T learnable slots, one per task, each embedding that task's
// characteristics. When frozen, optimizer steps leave the slots untouched.
struct PrototypeBank {
    Tensor slots;  // [T, d]

    PrototypeBank() = default;
    PrototypeBank(int n_tasks, int dim, Rng& rng);

    int tasks() const { return slots.dim(0); }
    int dim() const { return slots.dim(1); }

    bool frozen() const { return slots.frozen(); }
    void set_frozen(bool b) { slots.set_frozen(b); }

    void visit(const std::string& prefix, const ParamVisitor& v);
};

// Shared 1x1 conv projecting task features [B,c,h,w] into prototype space,
// flattened to tokens [B,hw,d].
struct TokenProjector {
    Conv2dLayer conv;

    TokenProjector() = default;
    TokenProjector(int in_ch, int dim, Rng& rng);

    Tensor forward(const Tensor& task_feature) const;
    void visit(const std::string& prefix, const ParamVisitor& v);
};

// Cosine similarity of each token against each prototype slot: [B,hw,T].
Tensor task_similarity(const Tensor& tokens, const PrototypeBank& bank);

// Softmax over the task axis of similarity/temperature: rows are
// distributions over tasks.
Tensor task_affinity(const Tensor& similarity, Scalar temperature = 1.0);

struct TkeLoss {
    Tensor value;         // scalar
    bool skipped = false; // no labeled (sample,task) pair contributed
    std::int64_t contributing_pairs = 0;
};

// Cross-entropy pushing labeled samples' affinity toward the target task's
// slot: mean of -log A[b,p,t] over labeled samples and all positions.
TkeLoss tke_loss(const Tensor& affinity, int target_task,
                 const std::vector<std::uint8_t>& label_mask);

// Sum of the TKE and TC scalars.
Tensor akg_loss(const Tensor& tke, const Tensor& tc);

}  // namespace pmtl
