#pragma once

#include <vector>

#include "pmtl/nn.hpp"
#include "pmtl/synthdata.hpp"

namespace pmtl {

// Shared backbone: three conv blocks (3x3 conv -> batchnorm -> ReLU) with
// strides 2,2,1 for an overall downsample factor of 4.
struct Encoder {
    Conv2dLayer c1, c2, c3;
    BatchNorm2dLayer n1, n2, n3;

    Encoder() = default;
    Encoder(int in_ch, int out_ch, Rng& rng);

    static constexpr int downsample_factor = 4;

    Tensor forward(const Tensor& image, bool training);
    void visit(const std::string& prefix, const ParamVisitor& v);
};

// Per-task decoder: two 3x3 conv + ReLU layers at decoder resolution.
struct TaskDecoder {
    Conv2dLayer c1, c2;

    TaskDecoder() = default;
    TaskDecoder(int ch, Rng& rng);

    Tensor forward(const Tensor& fi) const;
    void visit(const std::string& prefix, const ParamVisitor& v);
};

// Per-task head: 1x1 conv to the task's output channels, then bilinear
// upsampling to label resolution.
struct TaskHead {
    Conv2dLayer proj;
    int out_h = 0, out_w = 0;

    TaskHead() = default;
    TaskHead(int in_ch, int out_ch, int out_h_, int out_w_, Rng& rng);

    Tensor forward(const Tensor& ftr) const;
    void visit(const std::string& prefix, const ParamVisitor& v);
};

// Output channels a task's head must produce (class logits or regression
// channels).
int head_channels(const TaskDescriptor& task);

}  // namespace pmtl
