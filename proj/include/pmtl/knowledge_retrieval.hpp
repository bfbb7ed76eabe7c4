#pragma once

#include <vector>

#include "pmtl/task_prototype.hpp"

namespace pmtl {

// Affinity-weighted mixture of prototype slots: every token row becomes a
// convex combination of the slots.
Tensor affinity_feature(const Tensor& affinity, const PrototypeBank& bank);

// One knowledge-retrieval block: pre-norm residual self-attention over the
// token stream, cross-attention with the task-affinity feature as key/value
// source, and a position-wise feed-forward.
struct RetrievalBlockParams {
    LayerNormLayer ln_self, ln_cross, ln_ffn;
    LinearLayer self_q, self_k, self_v, self_o;
    LinearLayer cross_q, cross_k, cross_v, cross_o;
    LinearLayer ffn_in, ffn_out;
    int n_heads = 1;

    RetrievalBlockParams() = default;
    RetrievalBlockParams(int dim, int n_heads_, Rng& rng);

    void visit(const std::string& prefix, const ParamVisitor& v);
};

struct BlockAttnCapture {
    AttnCapture self_attn;
    AttnCapture cross_attn;
};

Tensor retrieval_block(const Tensor& tokens, const Tensor& affinity_feat,
                       RetrievalBlockParams& params, BlockAttnCapture* capture = nullptr);

// Stack of retrieval blocks sharing one task-affinity feature per forward.
struct KnowledgeRetriever {
    std::vector<RetrievalBlockParams> blocks;

    KnowledgeRetriever() = default;
    KnowledgeRetriever(int depth, int dim, int n_heads, Rng& rng);

    int depth() const { return static_cast<int>(blocks.size()); }

    Tensor forward(const Tensor& tokens, const Tensor& affinity_feat,
                   std::vector<BlockAttnCapture>* captures = nullptr);
    void visit(const std::string& prefix, const ParamVisitor& v);
};

// Full retrieval pass for one task stream: project features to tokens,
// compute the affinity against the prototype once, build the task-affinity
// feature, run the block stack, and fold tokens back to a spatial map
// [B,d,h,w].
Tensor retrieve(const Tensor& task_feature, const TokenProjector& projector, PrototypeBank& bank,
                KnowledgeRetriever& retriever, Scalar temperature = 1.0);

}  // namespace pmtl
