#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "pmtl/gradcheck.hpp"
#include "pmtl/ops.hpp"
#include "pmtl/rng.hpp"

using namespace pmtl;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, Scalar scl = 1.0, bool requires_grad = true) {
    Tensor t(std::move(shape), requires_grad);
    for (Scalar& v : t.vec()) v = rng.normal(0, scl);
    return t;
}

}  // namespace

TEST_CASE("matmul matches a scalar triple loop") {
    Rng rng(1);
    Tensor x = random_tensor({2, 3, 4}, rng);
    Tensor w = random_tensor({4, 5}, rng);
    Tensor y = matmul(x, w);
    REQUIRE(y.shape() == Shape({2, 3, 5}));
    for (int b = 0; b < 2; ++b) {
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 5; ++j) {
                Scalar acc = 0;
                for (int k = 0; k < 4; ++k) acc += x.at({b, i, k}) * w.at({k, j});
                CHECK(y.at({b, i, j}) == doctest::Approx(acc).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("conv2d matches a scalar reference") {
    Rng rng(2);
    Tensor x = random_tensor({1, 2, 5, 5}, rng);
    Tensor w = random_tensor({3, 2, 3, 3}, rng);
    Tensor b = random_tensor({3}, rng);
    Tensor y = conv2d(x, w, b, 2, 1);
    REQUIRE(y.shape() == Shape({1, 3, 3, 3}));
    for (int o = 0; o < 3; ++o) {
        for (int oy = 0; oy < 3; ++oy) {
            for (int ox = 0; ox < 3; ++ox) {
                Scalar acc = b.at({o});
                for (int c = 0; c < 2; ++c) {
                    for (int ky = 0; ky < 3; ++ky) {
                        for (int kx = 0; kx < 3; ++kx) {
                            const int iy = oy * 2 - 1 + ky;
                            const int ix = ox * 2 - 1 + kx;
                            if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
                            acc += x.at({0, c, iy, ix}) * w.at({o, c, ky, kx});
                        }
                    }
                }
                CHECK(y.at({0, o, oy, ox}) == doctest::Approx(acc).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("softmax rows sum to one and match direct evaluation") {
    Rng rng(3);
    Tensor x = random_tensor({7, 5}, rng, 2.0);
    Tensor y = softmax_last(x);
    for (int r = 0; r < 7; ++r) {
        Scalar sum = 0;
        for (int j = 0; j < 5; ++j) sum += y.at({r, j});
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
    // spec example: softmax of (1,0) = (0.73106, 0.26894)
    Tensor s = Tensor::from_vector({1.0, 0.0}, {1, 2});
    Tensor a = softmax_last(s);
    CHECK(a.at({0, 0}) == doctest::Approx(0.73106).epsilon(1e-4));
    CHECK(a.at({0, 1}) == doctest::Approx(0.26894).epsilon(1e-4));
}

TEST_CASE("bilinear upsample preserves constant fields") {
    Tensor x = Tensor::full({1, 2, 4, 4}, 0.37);
    Tensor y = bilinear_upsample(x, 16, 16);
    for (Scalar v : y.vec()) CHECK(v == doctest::Approx(0.37).epsilon(1e-12));
}

TEST_CASE("to_tokens/from_tokens round trip") {
    Rng rng(4);
    Tensor x = random_tensor({2, 3, 4, 5}, rng);
    Tensor tok = to_tokens(x);
    REQUIRE(tok.shape() == Shape({2, 20, 3}));
    CHECK(tok.at({1, 7, 2}) == x.at({1, 2, 1, 2}));  // p=7 -> (y=1,x=2)
    Tensor back = from_tokens(tok, 4, 5);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(back.data()[i] == x.data()[i]);
}

TEST_CASE("multihead attention rows are convex and single-token case is identity value") {
    Rng rng(5);
    const int B = 2, P = 1, S = 4, D = 6;
    Tensor q = random_tensor({B, P, D}, rng);
    Tensor k = random_tensor({B, S, D}, rng);
    Tensor v = random_tensor({B, S, D}, rng);
    AttnCapture cap;
    multihead_attention(q, k, v, 2, &cap);
    REQUIRE(cap.shape == Shape({B, 2, P, S}));
    for (int b = 0; b < B; ++b) {
        for (int h = 0; h < 2; ++h) {
            Scalar sum = 0;
            for (int s = 0; s < S; ++s) {
                sum += cap.weights[static_cast<std::size_t>(((b * 2 + h) * P) * S + s)];
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
        }
    }
    // hw = 1: softmax over a single key is 1, output equals the value row.
    Tensor q1 = random_tensor({1, 1, D}, rng);
    Tensor k1 = random_tensor({1, 1, D}, rng);
    Tensor v1 = random_tensor({1, 1, D}, rng);
    Tensor o1 = multihead_attention(q1, k1, v1, 3);
    for (int j = 0; j < D; ++j) CHECK(o1.at({0, 0, j}) == doctest::Approx(v1.at({0, 0, j})));
}

TEST_CASE("gradients: elementwise and structural ops") {
    Rng rng(6);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({3, 4}, rng);

    auto mean_of = [](Tensor t) { return mean_all(t); };

    auto rep = check_gradients("add", [&] { return mean_of(relu(add(a, b))); }, {a, b});
    CHECK(rep.max_rel_err < 1e-6);
    rep = check_gradients("mul+sub", [&] { return mean_of(mul(sub(a, b), a)); }, {a, b});
    CHECK(rep.max_rel_err < 1e-6);
    rep = check_gradients("reshape+sum", [&] { return sum_all(reshape(mul(a, a), {4, 3})); },
                          {a});
    CHECK(rep.max_rel_err < 1e-6);
    rep = check_gradients("softmax", [&] { return mean_all(softmax_last(scale(a, 3.0))); }, {a});
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("gradients: matmul / linear") {
    Rng rng(7);
    Tensor x = random_tensor({2, 5, 3}, rng);
    Tensor w = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4}, rng);
    auto rep = check_gradients(
        "linear", [&] { return mean_all(relu(linear(x, w, b))); }, {x, w, b});
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("gradients: conv2d") {
    Rng rng(8);
    Tensor x = random_tensor({2, 3, 6, 6}, rng);
    Tensor w = random_tensor({4, 3, 3, 3}, rng, 0.5);
    Tensor b = random_tensor({4}, rng);
    auto rep = check_gradients(
        "conv2d", [&] { return mean_all(relu(conv2d(x, w, b, 2, 1))); }, {x, w, b});
    CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("gradients: batchnorm (train) and layernorm") {
    Rng rng(9);
    Tensor x = random_tensor({3, 2, 4, 4}, rng);
    Tensor gamma = random_tensor({2}, rng, 0.5);
    Tensor beta = random_tensor({2}, rng, 0.5);
    Tensor rm = Tensor::zeros({2});
    Tensor rv = Tensor::full({2}, 1.0);
    auto rep = check_gradients(
        "batchnorm",
        [&] { return mean_all(mul(batchnorm2d(x, gamma, beta, rm, rv, true), x)); },
        {x, gamma, beta});
    CHECK(rep.max_rel_err < 1e-4);

    Tensor t = random_tensor({4, 6}, rng);
    Tensor g2 = random_tensor({6}, rng, 0.5);
    Tensor b2 = random_tensor({6}, rng, 0.5);
    rep = check_gradients(
        "layernorm", [&] { return mean_all(mul(layernorm_last(t, g2, b2), t)); }, {t, g2, b2});
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("gradients: batchnorm eval mode") {
    Rng rng(19);
    Tensor x = random_tensor({2, 3, 3, 3}, rng);
    Tensor gamma = random_tensor({3}, rng, 0.5);
    Tensor beta = random_tensor({3}, rng, 0.5);
    Tensor rm = random_tensor({3}, rng, 0.3, false);
    Tensor rv = Tensor::full({3}, 0.8);
    auto rep = check_gradients(
        "batchnorm-eval",
        [&] { return mean_all(batchnorm2d(x, gamma, beta, rm, rv, false)); },
        {x, gamma, beta});
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("gradients: upsampling") {
    Rng rng(10);
    Tensor x = random_tensor({2, 2, 3, 3}, rng);
    auto rep = check_gradients(
        "bilinear", [&] { return mean_all(mul(bilinear_upsample(x, 7, 5), bilinear_upsample(x, 7, 5))); },
        {x});
    CHECK(rep.max_rel_err < 1e-5);
    rep = check_gradients(
        "nearest2x", [&] { return mean_all(mul(nearest_upsample2x(x), nearest_upsample2x(x))); },
        {x});
    CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("gradients: multihead attention") {
    Rng rng(11);
    const int B = 2, P = 3, S = 4, D = 6;
    Tensor q = random_tensor({B, P, D}, rng, 0.7);
    Tensor k = random_tensor({B, S, D}, rng, 0.7);
    Tensor v = random_tensor({B, S, D}, rng, 0.7);
    auto rep = check_gradients(
        "mha", [&] { return mean_all(mul(multihead_attention(q, k, v, 2),
                                         multihead_attention(q, k, v, 2))); },
        {q, k, v});
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("backward accumulates through shared nodes") {
    Tensor x = Tensor::from_vector({2.0}, {1});
    x.set_requires_grad(true);
    Tensor y = mul(x, x);  // x^2, dx = 2x = 4
    Tensor z = add(y, y);  // 2x^2, dx = 4x = 8
    z.backward();
    CHECK(x.grad()[0] == doctest::Approx(8.0));
}

TEST_CASE("weighted_sum combines scalar terms") {
    Tensor a = Tensor::from_vector({1.0}, {1});
    Tensor b = Tensor::from_vector({0.2}, {1});
    Tensor c = Tensor::from_vector({0.5}, {1});
    a.set_requires_grad(true);
    Tensor total = weighted_sum({a, b, c}, {1.0, 1.0, 1.0});
    CHECK(total.item() == doctest::Approx(1.7));
    total.backward();
    CHECK(a.grad()[0] == doctest::Approx(1.0));
}

TEST_CASE("rng serialization round trips") {
    Rng rng(42);
    for (int i = 0; i < 7; ++i) rng.normal();
    const std::string state = rng.serialize();
    Rng restored(0);
    restored.deserialize(state);
    for (int i = 0; i < 20; ++i) {
        CHECK(rng.normal() == restored.normal());
        CHECK(rng.uniform() == restored.uniform());
        CHECK(rng.uniform_int(1000) == restored.uniform_int(1000));
    }
}
