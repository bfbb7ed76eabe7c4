#include "pmtl/tensor.hpp"

#include <cstdlib>
#include <string>
#include <unordered_set>

#include "pmtl/common.hpp"

namespace pmtl {

int max_threads() {
    const char* env = std::getenv("PROTO_MTL_THREADS");
    if (env == nullptr) return 1;
    const int n = std::atoi(env);
    return n < 1 ? 1 : n;
}

void Tensor::backward() {
    check(defined() && numel() == 1, "backward: root must be a defined scalar");
    check(node_->requires_grad, "backward: root does not require grad");

    // Reverse post-order DFS over tracked parents gives a topological order
    // with every consumer ahead of its producers.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    struct Frame {
        detail::Node* n;
        std::size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({node_.get(), 0});
    visited.insert(node_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            detail::Node* p = f.n->parents[f.next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    node_->grad.assign(1, Scalar(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

}  // namespace pmtl
