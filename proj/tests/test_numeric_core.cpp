// Copyright (c) 2026 tinymoe contributors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <sstream>

#include "tinymoe/rng.hpp"
#include "tinymoe/tape.hpp"
#include "tinymoe/tensor.hpp"

#include "oracle_helpers.hpp"

using namespace tinymoe;
using test_oracles::fd_gradient;
using test_oracles::max_rel_err;
using test_oracles::rel_err;

namespace {

// Generic gradient check: loss = dot(op(inputs), fixed random weights).
// AD gradient of every input vs central finite differences (64-bit, 1e-4).
double op_grad_max_err(std::vector<Tensor<double>> inputs,
                       const std::function<TensorId(Tape<double>&, const std::vector<TensorId>&)>& op,
                       uint64_t seed = 7) {
    RngStream wrng(seed, "fd-weights");
    std::vector<double> weights;

    auto eval = [&](bool want_grads, std::vector<std::vector<double>>* grads) {
        Tape<double> tape;
        std::vector<TensorId> ids;
        ids.reserve(inputs.size());
        for (auto& in : inputs) ids.push_back(tape.leaf(in, true));
        TensorId out = op(tape, ids);
        const auto& ov = tape.value(out);
        if (weights.empty()) {
            weights.resize(size_t(ov.size()));
            for (auto& w : weights) w = wrng.next_normal();
        }
        TensorId w = tape.constant(Tensor<double>(ov.shape, weights));
        TensorId loss = tape.sum(tape.mul(out, w));
        const double lv = tape.value(loss).data[0];
        if (want_grads) {
            tape.backward(loss);
            grads->clear();
            for (auto id : ids) grads->push_back(tape.grad(id));
        }
        return lv;
    };

    std::vector<std::vector<double>> ad;
    eval(true, &ad);

    double worst = 0;
    for (size_t i = 0; i < inputs.size(); ++i) {
        auto fd = fd_gradient(inputs[i].data, [&] { return eval(false, nullptr); });
        worst = std::max(worst, max_rel_err(ad[i], fd));
    }
    return worst;
}

Tensor<double> randn(Shape s, RngStream& rng, double scale = 1.0) {
    Tensor<double> t(std::move(s));
    for (auto& v : t.data) v = rng.next_normal() * scale;
    return t;
}

} // namespace

TEST_CASE("matmul identity and small products") {
    Tape<float> tape;
    auto a = tape.constant(Tensor<float>({2, 2}, {1, 0, 0, 1}));
    auto b = tape.constant(Tensor<float>({2, 2}, {3, 4, 5, 6}));
    auto c = tape.matmul(a, b);
    CHECK(tape.value(c).data == std::vector<float>{3, 4, 5, 6});

    auto x = tape.constant(Tensor<float>({1, 2}, {1, 2}));
    auto y = tape.constant(Tensor<float>({2, 1}, {3, 4}));
    auto z = tape.matmul(x, y);
    CHECK(tape.value(z).data[0] == Catch::Approx(11.0f));
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tape<float> tape;
    auto a = tape.constant(Tensor<float>::zeros({2, 3}));
    auto b = tape.constant(Tensor<float>::zeros({4, 5}));
    try {
        tape.matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,5]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient vs finite differences") {
    RngStream rng(11, "matmul");
    auto a = randn({4, 5}, rng);
    auto b = randn({5, 3}, rng);
    double err = op_grad_max_err({a, b}, [](Tape<double>& t, const std::vector<TensorId>& in) {
        return t.matmul(in[0], in[1]);
    });
    CHECK(err < 1e-6);
}

TEST_CASE("softmax values") {
    Tape<float> tape;
    auto u = tape.softmax(tape.constant(Tensor<float>({4}, {0, 0, 0, 0})));
    for (float v : tape.value(u).data) CHECK(v == Catch::Approx(0.25f));

    auto s = tape.softmax(tape.constant(Tensor<float>({4}, {2.0f, 1.0f, 0.5f, 0.0f})));
    const auto& sv = tape.value(s).data;
    CHECK(sv[0] == Catch::Approx(0.5793).margin(1e-4));
    CHECK(sv[1] == Catch::Approx(0.2131).margin(1e-4));
    CHECK(sv[2] == Catch::Approx(0.1293).margin(1e-4));
    CHECK(sv[3] == Catch::Approx(0.0784).margin(1e-4));

    auto big = tape.softmax(tape.constant(Tensor<float>({2}, {1000.0f, 0.0f})));
    CHECK(tape.value(big).data[0] == Catch::Approx(1.0f));
    CHECK(tape.value(big).data[1] == Catch::Approx(0.0f).margin(1e-30));
    CHECK(tape.value(big).finite());
}

TEST_CASE("softmax rows sum to one and stay positive") {
    RngStream rng(3, "softmax-prop");
    for (int iter = 0; iter < 50; ++iter) {
        Tape<double> tape;
        auto x = tape.constant(randn({8, 16}, rng, 5.0));
        auto y = tape.softmax(x);
        const auto& yv = tape.value(y);
        for (int64_t r = 0; r < 8; ++r) {
            double s = 0;
            for (int64_t i = 0; i < 16; ++i) {
                double v = yv.data[size_t(r * 16 + i)];
                CHECK(v > 0);
                s += v;
            }
            CHECK(std::abs(s - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("topk basics and tie rule") {
    Tensor<float> x({3}, {0.1f, 0.9f, 0.5f});
    auto [idx, vals] = topk(x, 1);
    CHECK(idx == std::vector<int32_t>{1});
    CHECK(vals[0] == Catch::Approx(0.9f));

    Tensor<float> ties({4}, {0, 0, 0, 0});
    auto [ti, tv] = topk(ties, 2);
    CHECK(ti == std::vector<int32_t>{0, 1});

    CHECK_THROWS_AS(topk(x, 0), ParamError);
    CHECK_THROWS_AS(topk(x, 4), ParamError);
}

TEST_CASE("topk equals full-sort oracle") {
    RngStream rng(17, "topk");
    for (int iter = 0; iter < 1000; ++iter) {
        const int64_t n = 4 + int64_t(rng.next_u64() % 61);
        const int64_t k = 1 + int64_t(rng.next_u64() % uint64_t(n));
        Tensor<double> x({n});
        for (auto& v : x.data) v = rng.next_normal();
        // Seed duplicates to exercise tie handling.
        if (iter % 3 == 0 && n >= 4) {
            x.data[1] = x.data[0];
            x.data[3] = x.data[2];
        }
        auto [idx, vals] = topk(x, k);

        // Oracle: stable sort of (value desc, index asc) pairs.
        std::vector<int32_t> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int32_t a, int32_t b) {
            if (x.data[size_t(a)] != x.data[size_t(b)]) return x.data[size_t(a)] > x.data[size_t(b)];
            return a < b;
        });
        order.resize(size_t(k));
        CHECK(idx == order);
    }
}

TEST_CASE("silu and swiglu values") {
    Tape<double> tape;
    auto g = tape.constant(Tensor<double>({3}, {0.0, 1.0, -2.0}));
    auto u = tape.constant(Tensor<double>({3}, {1.0, 2.0, 3.0}));
    auto y = tape.swiglu(g, u);
    const auto& yv = tape.value(y).data;
    auto silu = [](double x) { return x / (1.0 + std::exp(-x)); };
    CHECK(yv[0] == Catch::Approx(silu(0.0) * 1.0));
    CHECK(yv[1] == Catch::Approx(silu(1.0) * 2.0));
    CHECK(yv[2] == Catch::Approx(silu(-2.0) * 3.0));
}

TEST_CASE("rmsnorm closed form on a constant vector") {
    const double c = 0.7, eps = 1e-5;
    Tape<double> tape;
    auto x = tape.constant(Tensor<double>::full({6}, c));
    auto w = tape.constant(Tensor<double>::full({6}, 1.0));
    auto y = tape.rmsnorm(x, w, eps);
    const double expect = c / std::sqrt(c * c + eps);
    for (double v : tape.value(y).data) CHECK(v == Catch::Approx(expect).epsilon(1e-12));

    CHECK_THROWS_AS(tape.rmsnorm(x, w, 0.0), ParamError);
}

TEST_CASE("rope rotates pairs; position zero is identity") {
    Tape<double> tape;
    auto x = tape.constant(Tensor<double>({2, 4}, {1, 2, 3, 4, 1, 2, 3, 4}));
    auto y = tape.rope(x, {0, 3}, 10000.0);
    const auto& yv = tape.value(y).data;
    for (int i = 0; i < 4; ++i) CHECK(yv[size_t(i)] == Catch::Approx(double(i + 1)));
    // Rotation preserves pair norms.
    CHECK(yv[4] * yv[4] + yv[5] * yv[5] == Catch::Approx(1 * 1 + 2 * 2));
    CHECK(yv[6] * yv[6] + yv[7] * yv[7] == Catch::Approx(3 * 3 + 4 * 4));
    // Second row actually rotated.
    CHECK(std::abs(yv[4] - 1.0) > 1e-3);
}

TEST_CASE("cross entropy of uniform logits is ln V") {
    const int64_t v = 59;
    Tape<double> tape;
    auto logits = tape.constant(Tensor<double>::zeros({3, v}));
    auto ce = tape.cross_entropy(logits, {0, 17, 58});
    CHECK(tape.value(ce).data[0] == Catch::Approx(std::log(double(v))).epsilon(1e-12));

    CHECK_THROWS_AS(tape.cross_entropy(logits, {0, 1, int32_t(v)}), ParamError);
    CHECK_THROWS_AS(tape.cross_entropy(logits, {0, 1, -1}), ParamError);
}

TEST_CASE("truncated normal: bounds, spread, determinism") {
    const double std_dev = 0.02, cutoff = 0.06;
    RngStream rng(123, "init");
    const int n = 1000000;
    double sum = 0, sumsq = 0;
    for (int i = 0; i < n; ++i) {
        double v = rng.next_trunc_normal(std_dev, cutoff);
        REQUIRE(std::abs(v) <= cutoff);
        sum += v;
        sumsq += v * v;
    }
    const double mean = sum / n;
    const double sd = std::sqrt(sumsq / n - mean * mean);
    // Analytic std of a 3-sigma truncated normal:
    // sigma * sqrt(1 - 2c*phi(c) / (2*Phi(c)-1)), c = 3.
    const double c = cutoff / std_dev;
    const double phi = std::exp(-c * c / 2) / std::sqrt(2 * std::numbers::pi);
    const double z = std::erf(c / std::sqrt(2.0));
    const double expect = std_dev * std::sqrt(1 - 2 * c * phi / z);
    CHECK(sd == Catch::Approx(expect).epsilon(0.02));
    CHECK(std::abs(mean) < 1e-4);

    RngStream r1(9, "a"), r2(9, "a");
    for (int i = 0; i < 100; ++i)
        CHECK(r1.next_trunc_normal(std_dev, cutoff) == r2.next_trunc_normal(std_dev, cutoff));
    CHECK_THROWS_AS(rng.next_trunc_normal(std_dev, 0.0), ParamError);
}

TEST_CASE("rng streams split independently and restore") {
    RngStream root(42, "root");
    auto a = root.split("a");
    auto b = root.split("b");
    CHECK(a.next_u64() != b.next_u64());
    auto a2 = RngStream(42, "root").split("a");
    a2.next_u64();
    auto saved = RngStream::restore(a.key(), a.counter());
    CHECK(saved.next_u64() == a2.next_u64());

    auto i0 = root.split("w", 0);
    auto i1 = root.split("w", 1);
    CHECK(i0.next_u64() != i1.next_u64());
}

TEST_CASE("gradients of every differentiable op vs finite differences") {
    RngStream rng(31, "fd");
    const double tol = 1e-5;

    SECTION("add") {
        CHECK(op_grad_max_err({randn({3, 4}, rng), randn({3, 4}, rng)},
                              [](auto& t, const auto& in) { return t.add(in[0], in[1]); }) < tol);
    }
    SECTION("mul") {
        CHECK(op_grad_max_err({randn({3, 4}, rng), randn({3, 4}, rng)},
                              [](auto& t, const auto& in) { return t.mul(in[0], in[1]); }) < tol);
    }
    SECTION("scale") {
        CHECK(op_grad_max_err({randn({5}, rng)},
                              [](auto& t, const auto& in) { return t.scale(in[0], -2.5); }) < tol);
    }
    SECTION("silu") {
        CHECK(op_grad_max_err({randn({12}, rng)},
                              [](auto& t, const auto& in) { return t.silu(in[0]); }) < tol);
    }
    SECTION("swiglu") {
        CHECK(op_grad_max_err({randn({2, 6}, rng), randn({2, 6}, rng)},
                              [](auto& t, const auto& in) { return t.swiglu(in[0], in[1]); }) < tol);
    }
    SECTION("softmax") {
        CHECK(op_grad_max_err({randn({3, 7}, rng)},
                              [](auto& t, const auto& in) { return t.softmax(in[0]); }) < tol);
    }
    SECTION("rmsnorm") {
        CHECK(op_grad_max_err({randn({4, 6}, rng), randn({6}, rng)},
                              [](auto& t, const auto& in) { return t.rmsnorm(in[0], in[1], 1e-5); }) < tol);
    }
    SECTION("layernorm_np") {
        CHECK(op_grad_max_err({randn({4, 6}, rng)},
                              [](auto& t, const auto& in) { return t.layernorm_np(in[0], 1e-5); }) < tol);
    }
    SECTION("rope") {
        CHECK(op_grad_max_err({randn({3, 8}, rng)}, [](auto& t, const auto& in) {
                  return t.rope(in[0], {0, 2, 5}, 10000.0);
              }) < tol);
    }
    SECTION("cross_entropy") {
        CHECK(op_grad_max_err({randn({4, 9}, rng)}, [](auto& t, const auto& in) {
                  return t.cross_entropy(in[0], {1, 0, 8, 3});
              }) < tol);
    }
    SECTION("embedding") {
        CHECK(op_grad_max_err({randn({6, 3}, rng)}, [](auto& t, const auto& in) {
                  return t.embedding(in[0], {0, 5, 2, 2});
              }) < tol);
    }
    SECTION("gather_rows") {
        CHECK(op_grad_max_err({randn({5, 4}, rng)}, [](auto& t, const auto& in) {
                  return t.gather_rows(in[0], {4, 0, 0, 2});
              }) < tol);
    }
    SECTION("scatter_add_rows") {
        CHECK(op_grad_max_err({randn({4, 3}, rng)}, [](auto& t, const auto& in) {
                  return t.scatter_add_rows(in[0], {2, 0, 2, 5}, 6);
              }) < tol);
    }
    SECTION("gather_at") {
        CHECK(op_grad_max_err({randn({3, 4}, rng)}, [](auto& t, const auto& in) {
                  return t.gather_at(in[0], {0, 7, 7, 11});
              }) < tol);
    }
    SECTION("row_scale") {
        CHECK(op_grad_max_err({randn({4, 5}, rng), randn({4}, rng)},
                              [](auto& t, const auto& in) { return t.row_scale(in[0], in[1]); }) < tol);
    }
    SECTION("sum mean col_mean") {
        CHECK(op_grad_max_err({randn({3, 4}, rng)},
                              [](auto& t, const auto& in) { return t.sum(in[0]); }) < tol);
        CHECK(op_grad_max_err({randn({3, 4}, rng)},
                              [](auto& t, const auto& in) { return t.mean(in[0]); }) < tol);
        CHECK(op_grad_max_err({randn({5, 3}, rng)},
                              [](auto& t, const auto& in) { return t.col_mean(in[0]); }) < tol);
    }
    SECTION("logsumexp_rows") {
        CHECK(op_grad_max_err({randn({4, 6}, rng)},
                              [](auto& t, const auto& in) { return t.logsumexp_rows(in[0]); }) < tol);
    }
    SECTION("reshape") {
        CHECK(op_grad_max_err({randn({3, 4}, rng)},
                              [](auto& t, const auto& in) { return t.reshape(in[0], {2, 6}); }) < tol);
    }
    SECTION("causal_attention") {
        CHECK(op_grad_max_err({randn({6, 4}, rng), randn({6, 4}, rng), randn({6, 4}, rng)},
                              [](auto& t, const auto& in) {
                                  return t.causal_attention(in[0], in[1], in[2], 2, 3, 2);
                              }) < tol);
    }
}

TEST_CASE("tape accumulates gradients across reuse") {
    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>({2}, {3.0, -1.0}), true);
    auto y = tape.sum(tape.mul(x, x)); // d/dx = 2x
    tape.backward(y);
    CHECK(tape.grad(x)[0] == Catch::Approx(6.0));
    CHECK(tape.grad(x)[1] == Catch::Approx(-2.0));
}

TEST_CASE("tensor wire format round-trips") {
    RngStream rng(5, "ser");
    Tensor<float> t({3, 2, 4});
    for (auto& v : t.data) v = float(rng.next_normal());
    std::stringstream ss;
    write_tensor(ss, t);
    auto u = read_tensor<float>(ss);
    CHECK(u.shape == t.shape);
    CHECK(u.data == t.data); // bit-exact for f32

    Tensor<float> s = Tensor<float>::scalar(2.5f);
    std::stringstream s2;
    write_tensor(s2, s);
    auto r = read_tensor<float>(s2);
    CHECK(r.shape.empty());
    CHECK(r.data[0] == 2.5f);
}
