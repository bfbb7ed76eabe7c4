#include "pmtl/network.hpp"

namespace pmtl {

Encoder::Encoder(int in_ch, int out_ch, Rng& rng) {
    check(out_ch >= 2 && out_ch % 2 == 0, "encoder channels must be even, got " +
                                              std::to_string(out_ch));
    const int mid = out_ch / 2;
    c1 = Conv2dLayer(in_ch, mid, 3, 2, 1, rng);
    c2 = Conv2dLayer(mid, out_ch, 3, 2, 1, rng);
    c3 = Conv2dLayer(out_ch, out_ch, 3, 1, 1, rng);
    n1 = BatchNorm2dLayer(mid);
    n2 = BatchNorm2dLayer(out_ch);
    n3 = BatchNorm2dLayer(out_ch);
}

Tensor Encoder::forward(const Tensor& image, bool training) {
    check(image.ndim() == 4 && image.dim(1) == c1.w.dim(1),
          "encode: expected [B," + std::to_string(c1.w.dim(1)) + ",H,W], got " +
              shape_str(image.shape()));
    check(image.dim(2) % downsample_factor == 0 && image.dim(3) % downsample_factor == 0,
          "encode: H,W must be divisible by " + std::to_string(downsample_factor));
    Tensor x = relu(n1.forward(c1.forward(image), training));
    x = relu(n2.forward(c2.forward(x), training));
    return relu(n3.forward(c3.forward(x), training));
}

void Encoder::visit(const std::string& prefix, const ParamVisitor& v) {
    c1.visit(prefix + ".c1", v);
    n1.visit(prefix + ".n1", v);
    c2.visit(prefix + ".c2", v);
    n2.visit(prefix + ".n2", v);
    c3.visit(prefix + ".c3", v);
    n3.visit(prefix + ".n3", v);
}

TaskDecoder::TaskDecoder(int ch, Rng& rng)
    : c1(ch, ch, 3, 1, 1, rng), c2(ch, ch, 3, 1, 1, rng) {}

Tensor TaskDecoder::forward(const Tensor& fi) const {
    return relu(c2.forward(relu(c1.forward(fi))));
}

void TaskDecoder::visit(const std::string& prefix, const ParamVisitor& v) {
    c1.visit(prefix + ".c1", v);
    c2.visit(prefix + ".c2", v);
}

TaskHead::TaskHead(int in_ch, int out_ch, int out_h_, int out_w_, Rng& rng)
    : proj(in_ch, out_ch, 1, 1, 0, rng), out_h(out_h_), out_w(out_w_) {}

Tensor TaskHead::forward(const Tensor& ftr) const {
    return bilinear_upsample(proj.forward(ftr), out_h, out_w);
}

void TaskHead::visit(const std::string& prefix, const ParamVisitor& v) {
    proj.visit(prefix + ".proj", v);
}

int head_channels(const TaskDescriptor& task) {
    return task.kind == TaskKind::Categorical ? task.class_count : task.channels;
}

}  // namespace pmtl
