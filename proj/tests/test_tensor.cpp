#include <cmath>

#include <doctest.h>

#include "awmark/rng.hpp"
#include "awmark/tensor.hpp"

using namespace awmark;

namespace {

Tensor random_tensor(std::vector<int> shape, SeededRng& rng, double lo = -1.0, double hi = 1.0,
                     bool requires_grad = true) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_SUITE_BEGIN("tensor");

TEST_CASE("forward op examples") {
    Tape t(false);

    SUBCASE("relu") {
        Tensor y = relu(t, Tensor::from_data({3}, {-1.0, 0.0, 2.0}));
        CHECK(y.data()[0] == 0.0);
        CHECK(y.data()[1] == 0.0);
        CHECK(y.data()[2] == 2.0);
    }
    SUBCASE("conv2d with 1x1 scalar kernel") {
        Tensor img = Tensor::full({1, 3, 3}, 1.0);
        Tensor w = Tensor::from_data({1, 1, 1, 1}, {2.0});
        Tensor y = conv2d(t, img, w, Tensor::zeros({1}), 1, 0);
        CHECK(y.shape() == std::vector<int>{1, 3, 3});
        for (int i = 0; i < 9; ++i) CHECK(y.data()[i] == 2.0);
    }
    SUBCASE("mean") {
        CHECK(mean(t, Tensor::from_data({4}, {1.0, 2.0, 3.0, 6.0})).item() == 3.0);
    }
    SUBCASE("conv2d 3x3 padded against hand-rolled sum") {
        SeededRng rng(7);
        Tensor x = random_tensor({2, 5, 6}, rng, 0.0, 1.0, false);
        Tensor w = random_tensor({3, 2, 3, 3}, rng, -1.0, 1.0, false);
        Tensor b = random_tensor({3}, rng, -0.5, 0.5, false);
        Tensor y = conv2d(t, x, w, b, 1, 1);
        REQUIRE(y.shape() == std::vector<int>{3, 5, 6});
        for (int oc = 0; oc < 3; ++oc)
            for (int oy = 0; oy < 5; ++oy)
                for (int ox = 0; ox < 6; ++ox) {
                    double acc = b.data()[oc];
                    for (int ic = 0; ic < 2; ++ic)
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx) {
                                const int sy = oy + ky - 1, sx = ox + kx - 1;
                                if (sy < 0 || sy >= 5 || sx < 0 || sx >= 6) continue;
                                acc += w.data()[((oc * 2 + ic) * 3 + ky) * 3 + kx] *
                                       x.data()[(ic * 5 + sy) * 6 + sx];
                            }
                    CHECK(y.data()[(oc * 5 + oy) * 6 + ox] == doctest::Approx(acc).epsilon(1e-12));
                }
    }
    SUBCASE("conv2d stride 2 shape") {
        Tensor x = Tensor::full({3, 8, 8}, 0.5);
        SeededRng rng(3);
        Tensor w = random_tensor({4, 3, 3, 3}, rng, -1, 1, false);
        Tensor y = conv2d(t, x, w, Tensor::zeros({4}), 2, 1);
        CHECK(y.shape() == std::vector<int>{4, 4, 4});
    }
    SUBCASE("shape errors name the op and both shapes") {
        Tensor x = Tensor::zeros({2, 4, 4});
        Tensor w = Tensor::zeros({1, 3, 3, 3});
        CHECK_THROWS_WITH_AS(conv2d(t, x, w, Tensor::zeros({1}), 1, 1),
                             doctest::Contains("conv2d"), std::invalid_argument);
        CHECK_THROWS_AS(add(t, Tensor::zeros({2}), Tensor::zeros({3})), std::invalid_argument);
        CHECK_THROWS_AS(mse_loss(t, Tensor::zeros({2}), Tensor::zeros({3})),
                        std::invalid_argument);
    }
}

TEST_CASE("cosine similarity examples and scale invariance") {
    Tape t(false);
    CHECK(cosine_similarity(t, Tensor::from_data({2}, {1, 0}), Tensor::from_data({2}, {1, 0}))
              .item() == doctest::Approx(1.0));
    CHECK(cosine_similarity(t, Tensor::from_data({2}, {1, 0}), Tensor::from_data({2}, {0, 1}))
              .item() == doctest::Approx(0.0));
    CHECK(cosine_similarity(t, Tensor::from_data({2}, {1, 0}), Tensor::from_data({2}, {-2, 0}))
              .item() == doctest::Approx(-1.0));
    CHECK_THROWS_AS(
        cosine_similarity(t, Tensor::from_data({2}, {0, 0}), Tensor::from_data({2}, {1, 0})),
        std::invalid_argument);

    SeededRng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor a = random_tensor({8}, rng, -1, 1, false);
        Tensor b = random_tensor({8}, rng, -1, 1, false);
        const double s = cosine_similarity(t, a, b).item();
        CHECK(s >= -1.0 - 1e-12);
        CHECK(s <= 1.0 + 1e-12);
        const double alpha = rng.uniform(0.01, 50.0), beta = rng.uniform(0.01, 50.0);
        Tensor a2 = scalar_mul(t, a, alpha), b2 = scalar_mul(t, b, beta);
        CHECK(cosine_similarity(t, a2, b2).item() == doctest::Approx(s).epsilon(1e-12));
    }
}

TEST_CASE("loss op examples") {
    Tape t(false);
    SUBCASE("mse") {
        CHECK(mse_loss(t, Tensor::from_data({2}, {1, 1}), Tensor::from_data({2}, {1, 1})).item() ==
              0.0);
        CHECK(mse_loss(t, Tensor::from_data({2}, {0, 0}), Tensor::from_data({2}, {1, 1})).item() ==
              1.0);
        CHECK(mse_loss(t, Tensor::from_data({2}, {0, 2}), Tensor::from_data({2}, {0, 0})).item() ==
              2.0);
    }
    SUBCASE("bce") {
        CHECK(bce_with_logits(t, Tensor::from_data({1}, {0.0}), Tensor::from_data({1}, {1.0}))
                  .item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
        CHECK(bce_with_logits(t, Tensor::from_data({1}, {20.0}), Tensor::from_data({1}, {1.0}))
                  .item() < 1e-8);
        CHECK(bce_with_logits(t, Tensor::from_data({2}, {0.0, 0.0}),
                              Tensor::from_data({2}, {0.0, 1.0}))
                  .item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
        CHECK_THROWS_AS(bce_with_logits(t, Tensor::from_data({1}, {0.0}),
                                        Tensor::from_data({1}, {0.5})),
                        std::invalid_argument);
    }
}

TEST_CASE("backward basics") {
    SUBCASE("mean gradient") {
        Tape t;
        Tensor x = Tensor::full({4}, 2.0, true);
        Tensor loss = mean(t, x);
        t.backward(loss);
        for (int i = 0; i < 4; ++i) CHECK(x.grad()[i] == 0.25);
    }
    SUBCASE("mse gradient") {
        Tape t;
        Tensor x = Tensor::from_data({1}, {3.0}, true);
        Tensor loss = mse_loss(t, x, Tensor::from_data({1}, {0.0}));
        t.backward(loss);
        CHECK(x.grad()[0] == 6.0);
    }
    SUBCASE("non-scalar loss rejected") {
        Tape t;
        Tensor x = Tensor::full({3}, 1.0, true);
        Tensor y = relu(t, x);
        CHECK_THROWS_AS(t.backward(y), std::invalid_argument);
    }
    SUBCASE("leaf off the path reads zero gradient") {
        Tape t;
        Tensor x = Tensor::full({2}, 1.0, true);
        Tensor unused = Tensor::full({2}, 5.0, true);
        t.backward(mean(t, x));
        CHECK(unused.grad()[0] == 0.0);
        CHECK(unused.grad()[1] == 0.0);
    }
}

TEST_CASE("clamp properties") {
    Tape t(false);
    SeededRng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const double v = rng.uniform(-3.0, 3.0);
        Tensor y = clamp(t, Tensor::from_data({1}, {v}), 0.0, 1.0);
        CHECK(y.data()[0] >= 0.0);
        CHECK(y.data()[0] <= 1.0);
    }
    // gradient zero outside and at boundary, identity strictly inside
    for (double v : {-0.5, 0.0, 0.25, 1.0, 1.5}) {
        Tape tg;
        Tensor x = Tensor::from_data({1}, {v}, true);
        tg.backward(sum(tg, clamp(tg, x, 0.0, 1.0)));
        const double expected = (v > 0.0 && v < 1.0) ? 1.0 : 0.0;
        CHECK(x.grad()[0] == expected);
    }
}

TEST_CASE("forward determinism") {
    SeededRng rng(17);
    Tensor x = random_tensor({3, 9, 9}, rng, 0.0, 1.0, false);
    Tensor w = random_tensor({4, 3, 3, 3}, rng, -1, 1, false);
    Tensor b = random_tensor({4}, rng, -1, 1, false);
    Tape t(false);
    Tensor y1 = conv2d(t, x, w, b, 1, 1);
    Tensor y2 = conv2d(t, x, w, b, 1, 1);
    for (std::int64_t i = 0; i < y1.size(); ++i) CHECK(y1.data()[i] == y2.data()[i]);
    Tensor m1 = mean(t, tanh(t, y1));
    Tensor m2 = mean(t, tanh(t, y2));
    CHECK(m1.item() == m2.item());
}

// The finite-difference oracle itself: every op composite must match central
// differences at random smooth points.
TEST_CASE("gradients match finite differences") {
    const double tol = 1e-4;

    SUBCASE("elementwise chain") {
        SeededRng rng(23);
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<Tensor> leaves = {random_tensor({6}, rng, -2, 2),
                                          random_tensor({6}, rng, -2, 2)};
            auto rep = grad_check(
                [](Tape& t, const std::vector<Tensor>& in) {
                    Tensor a = tanh(t, in[0]);
                    Tensor b = sigmoid(t, in[1]);
                    Tensor c = mul(t, a, b);
                    Tensor d = add(t, c, scalar_mul(t, sub(t, in[0], in[1]), 0.3));
                    return mean(t, d);
                },
                leaves);
            if (rep.unreliable) continue;
            CHECK(rep.max_rel_err < tol);
        }
    }
    SUBCASE("relu kink is flagged and skipped") {
        auto rep = grad_check(
            [](Tape& t, const std::vector<Tensor>& in) { return sum(t, relu(t, in[0])); },
            {Tensor::from_data({3}, {0.5, 0.0, -0.5}, true)});
        CHECK(rep.unreliable);
    }
    SUBCASE("conv linear pool norm composite") {
        SeededRng rng(29);
        for (int trial = 0; trial < 5; ++trial) {
            std::vector<Tensor> leaves = {
                random_tensor({2, 6, 6}, rng, 0.1, 0.9),  // input
                random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5),
                random_tensor({3}, rng, -0.2, 0.2),
                random_tensor({4, 3}, rng, -0.7, 0.7),
                random_tensor({4}, rng, -0.2, 0.2),
            };
            auto rep = grad_check(
                [](Tape& t, const std::vector<Tensor>& in) {
                    Tensor h = relu(t, conv2d(t, in[0], in[1], in[2], 1, 1));
                    Tensor pooled = global_avg_pool(t, h);
                    Tensor z = linear(t, pooled, in[3], in[4]);
                    return l2_norm(t, z);
                },
                leaves);
            if (rep.unreliable) continue;
            CHECK(rep.max_rel_err < tol);
        }
    }
    SUBCASE("strided conv") {
        SeededRng rng(31);
        std::vector<Tensor> leaves = {random_tensor({2, 8, 8}, rng, 0.1, 0.9),
                                      random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5),
                                      random_tensor({3}, rng, -0.2, 0.2)};
        auto rep = grad_check(
            [](Tape& t, const std::vector<Tensor>& in) {
                return mean(t, relu(t, conv2d(t, in[0], in[1], in[2], 2, 1)));
            },
            leaves);
        REQUIRE(!rep.unreliable);
        CHECK(rep.max_rel_err < tol);
    }
    SUBCASE("cosine similarity") {
        SeededRng rng(37);
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<Tensor> leaves = {random_tensor({8}, rng, 0.3, 1.0),
                                          random_tensor({8}, rng, 0.3, 1.0)};
            auto rep = grad_check(
                [](Tape& t, const std::vector<Tensor>& in) {
                    return cosine_similarity(t, in[0], in[1]);
                },
                leaves);
            if (rep.unreliable) continue;
            CHECK(rep.max_rel_err < tol);
        }
    }
    SUBCASE("concat broadcast clamp bce") {
        SeededRng rng(41);
        std::vector<Tensor> leaves = {random_tensor({2, 4, 4}, rng, 0.2, 0.8),
                                      random_tensor({3}, rng, 0.2, 0.8)};
        auto rep = grad_check(
            [](Tape& t, const std::vector<Tensor>& in) {
                Tensor planes = broadcast_channels(t, in[1], 4, 4);
                Tensor x = concat(t, {in[0], planes}, 0);
                Tensor y = clamp(t, x, 0.0, 1.0);
                return mse_loss(t, y, Tensor::full({5, 4, 4}, 0.4));
            },
            leaves);
        REQUIRE(!rep.unreliable);
        CHECK(rep.max_rel_err < tol);
    }
    SUBCASE("cosine rows and softmax cross entropy") {
        SeededRng rng(43);
        std::vector<Tensor> leaves = {random_tensor({5, 6}, rng, 0.2, 1.0),
                                      random_tensor({6}, rng, 0.2, 1.0)};
        auto rep = grad_check(
            [](Tape& t, const std::vector<Tensor>& in) {
                Tensor logits = scalar_mul(t, cosine_rows(t, in[0], in[1]), 16.0);
                return softmax_cross_entropy(t, logits, 2);
            },
            leaves);
        REQUIRE(!rep.unreliable);
        CHECK(rep.max_rel_err < tol);
    }
}

TEST_CASE("gradient accumulates across fan-out") {
    Tape t;
    Tensor x = Tensor::from_data({2}, {0.3, -0.4}, true);
    Tensor y = add(t, x, x);  // dy/dx = 2
    t.backward(sum(t, y));
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 2.0);
}

TEST_SUITE_END();
