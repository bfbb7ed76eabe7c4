#include "pmtl/knowledge_retrieval.hpp"

namespace pmtl {

Tensor affinity_feature(const Tensor& affinity, const PrototypeBank& bank) {
    check(affinity.ndim() == 3, "affinity_feature: affinity must be [B,hw,T]");
    check(affinity.dim(2) == bank.tasks(),
          "affinity_feature: T mismatch, affinity has " + std::to_string(affinity.dim(2)) +
              " tasks, bank has " + std::to_string(bank.tasks()));
    return matmul(affinity, bank.slots);
}

RetrievalBlockParams::RetrievalBlockParams(int dim, int n_heads_, Rng& rng)
    : ln_self(dim),
      ln_cross(dim),
      ln_ffn(dim),
      self_q(dim, dim, rng),
      self_k(dim, dim, rng),
      self_v(dim, dim, rng),
      self_o(dim, dim, rng),
      cross_q(dim, dim, rng),
      cross_k(dim, dim, rng),
      cross_v(dim, dim, rng),
      cross_o(dim, dim, rng),
      ffn_in(dim, 4 * dim, rng),
      ffn_out(4 * dim, dim, rng),
      n_heads(n_heads_) {
    check(n_heads_ >= 1 && dim % n_heads_ == 0,
          "retrieval block: dim " + std::to_string(dim) + " not divisible by heads " +
              std::to_string(n_heads_));
}

void RetrievalBlockParams::visit(const std::string& prefix, const ParamVisitor& v) {
    ln_self.visit(prefix + ".ln_self", v);
    self_q.visit(prefix + ".self_q", v);
    self_k.visit(prefix + ".self_k", v);
    self_v.visit(prefix + ".self_v", v);
    self_o.visit(prefix + ".self_o", v);
    ln_cross.visit(prefix + ".ln_cross", v);
    cross_q.visit(prefix + ".cross_q", v);
    cross_k.visit(prefix + ".cross_k", v);
    cross_v.visit(prefix + ".cross_v", v);
    cross_o.visit(prefix + ".cross_o", v);
    ln_ffn.visit(prefix + ".ln_ffn", v);
    ffn_in.visit(prefix + ".ffn_in", v);
    ffn_out.visit(prefix + ".ffn_out", v);
}

Tensor retrieval_block(const Tensor& tokens, const Tensor& affinity_feat,
                       RetrievalBlockParams& params, BlockAttnCapture* capture) {
    check(tokens.ndim() == 3 && affinity_feat.ndim() == 3,
          "retrieval_block: tokens and affinity feature must be [B,P,d]");
    check(tokens.shape() == affinity_feat.shape(),
          "retrieval_block: shape mismatch " + shape_str(tokens.shape()) + " vs " +
              shape_str(affinity_feat.shape()));

    // Self-attention sublayer.
    Tensor x = params.ln_self.forward(tokens);
    Tensor sa = multihead_attention(params.self_q.forward(x), params.self_k.forward(x),
                                    params.self_v.forward(x), params.n_heads,
                                    capture ? &capture->self_attn : nullptr);
    Tensor u = add(tokens, params.self_o.forward(sa));

    // Cross-attention: query from the token stream, key/value projected from
    // the task-affinity feature.
    Tensor q = params.cross_q.forward(params.ln_cross.forward(u));
    Tensor key = params.cross_k.forward(affinity_feat);
    Tensor val = params.cross_v.forward(affinity_feat);
    Tensor ca = multihead_attention(q, key, val, params.n_heads,
                                    capture ? &capture->cross_attn : nullptr);
    u = add(u, params.cross_o.forward(ca));

    // Feed-forward sublayer.
    Tensor f = params.ffn_out.forward(relu(params.ffn_in.forward(params.ln_ffn.forward(u))));
    return add(u, f);
}

KnowledgeRetriever::KnowledgeRetriever(int depth, int dim, int n_heads, Rng& rng) {
    check(depth >= 1, "retriever depth must be at least 1");
    blocks.reserve(static_cast<std::size_t>(depth));
    for (int i = 0; i < depth; ++i) blocks.emplace_back(dim, n_heads, rng);
}

Tensor KnowledgeRetriever::forward(const Tensor& tokens, const Tensor& affinity_feat,
                                   std::vector<BlockAttnCapture>* captures) {
    if (captures != nullptr) captures->resize(blocks.size());
    Tensor x = tokens;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        x = retrieval_block(x, affinity_feat, blocks[i],
                            captures ? &(*captures)[i] : nullptr);
    }
    return x;
}

void KnowledgeRetriever::visit(const std::string& prefix, const ParamVisitor& v) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        blocks[i].visit(prefix + ".block" + std::to_string(i), v);
    }
}

Tensor retrieve(const Tensor& task_feature, const TokenProjector& projector, PrototypeBank& bank,
                KnowledgeRetriever& retriever, Scalar temperature) {
    const int h = task_feature.dim(2), w = task_feature.dim(3);
    Tensor tokens = projector.forward(task_feature);
    // The affinity is computed once from the pre-retrieval tokens and shared
    // by every block of this forward pass.
    Tensor affinity = task_affinity(task_similarity(tokens, bank), temperature);
    Tensor fta = affinity_feature(affinity, bank);
    Tensor refined = retriever.forward(tokens, fta);
    return from_tokens(refined, h, w);
}

}  // namespace pmtl
