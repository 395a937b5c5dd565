// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "qtrain/optim.hpp"
#include "test_util.hpp"

#include <cmath>

using namespace qtrain;
using qtest::bitwise_equal;
using qtest::random_tensor;

namespace {

struct Bowl {
    Tensor x;      // parameter
    Tensor target; // minimum
    GradMap grad() const {
        Tensor g = Tensor::zeros(x.shape);
        for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = x.data[i] - target.data[i];
        return GradMap{{"x", std::move(g)}};
    }
};

// f64 AdamW reference with the same update rule
struct F64Adam {
    std::vector<double> x, m, v;
    AdamWHyper h;
    int t = 0;
    void step(const std::vector<double>& g) {
        ++t;
        const double bc1 = 1.0 - std::pow(static_cast<double>(h.beta1), t);
        const double bc2 = 1.0 - std::pow(static_cast<double>(h.beta2), t);
        for (std::size_t i = 0; i < x.size(); ++i) {
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
            const double upd = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + h.eps) + h.weight_decay * x[i];
            x[i] -= h.lr * upd;
        }
    }
};

} // namespace

TEST_CASE("zero gradient, zero weight decay leaves parameters unchanged") {
    Tensor p = random_tensor(1, {64}, -1, 1, true);
    const Tensor keep = p;
    OptimState st;
    st.hyper.lr = 1e-2f;
    st.seed = 5;
    GradMap g{{"x", Tensor::zeros({64})}};
    adamw_step(st, {{"x", &p}}, g);
    adamw_step(st, {{"x", &p}}, g);
    CHECK(bitwise_equal(p, keep));
    // moments decayed toward zero but the parameters did not move
    CHECK(st.step_count == 2);
}

TEST_CASE("f32-moment mode tracks an f64 oracle on a quadratic bowl") {
    const std::size_t n = 32;
    Tensor x = random_tensor(3, {static_cast<std::int64_t>(n)}, -1, 1, true);
    Bowl bowl{x, random_tensor(4, {static_cast<std::int64_t>(n)}, -1, 1, true)};

    OptimState st;
    st.hyper = {1e-2f, 0.9f, 0.95f, 1e-8f, 0.0f};
    st.moments = MomentPrecision::F32;
    st.params = ParamPrecision::F32; // oracle mode: no bf16 writes anywhere
    F64Adam oracle;
    oracle.h = st.hyper;
    oracle.x.assign(bowl.x.data.begin(), bowl.x.data.end());
    oracle.m.assign(n, 0.0);
    oracle.v.assign(n, 0.0);

    for (int step = 0; step < 10; ++step) {
        const auto g = bowl.grad();
        std::vector<double> gd(g.at("x").data.begin(), g.at("x").data.end());
        adamw_step(st, {{"x", &bowl.x}}, g);
        oracle.step(gd);
        for (std::size_t i = 0; i < n; ++i)
            CHECK(std::fabs(bowl.x.data[i] - oracle.x[i]) < 1e-5);
    }
}

TEST_CASE("bf16 moments stay unbiased: 200-seed mean tracks the f32 trajectory") {
    const std::size_t n = 16;
    const Tensor x0 = random_tensor(7, {static_cast<std::int64_t>(n)}, -1, 1, true);
    const Tensor tgt = random_tensor(8, {static_cast<std::int64_t>(n)}, -1, 1, true);
    const AdamWHyper hyper{5e-3f, 0.9f, 0.95f, 1e-8f, 0.0f};
    const int steps = 20;

    auto run = [&](MomentPrecision mp, ParamPrecision pp, std::uint64_t seed) {
        Bowl b{x0, tgt};
        OptimState st;
        st.hyper = hyper;
        st.moments = mp;
        st.params = pp;
        st.seed = seed;
        for (int s = 0; s < steps; ++s) adamw_step(st, {{"x", &b.x}}, b.grad());
        return b.x;
    };

    const Tensor ref = run(MomentPrecision::F32, ParamPrecision::F32, 0);
    const int seeds = 200;
    std::vector<double> sum(n, 0.0), sumsq(n, 0.0);
    for (int s = 0; s < seeds; ++s) {
        const Tensor xs = run(MomentPrecision::BF16_SR, ParamPrecision::BF16_SR,
                              1000 + static_cast<std::uint64_t>(s));
        for (std::size_t i = 0; i < n; ++i) {
            sum[i] += xs.data[i];
            sumsq[i] += static_cast<double>(xs.data[i]) * xs.data[i];
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        const double mean = sum[i] / seeds;
        const double var = std::max(sumsq[i] / seeds - mean * mean, 0.0);
        const double sem = std::sqrt(var / seeds);
        CHECK(std::fabs(mean - ref.data[i]) <= 3.0 * sem + 1e-7);
    }
}

TEST_CASE("global_grad_norm: basics and shard invariance") {
    GradMap g1{{"t", Tensor{{2}, {3.0f, 4.0f}}}};
    CHECK(global_grad_norm(g1) == doctest::Approx(5.0).epsilon(1e-12));

    // shard-wise partials over aligned halves combine to the unsharded value
    Tensor big = random_tensor(9, {1024}, -2, 2);
    const double full = grad_norm_block_partials(big, 0, 1024);
    const double halves = grad_norm_block_partials(big, 0, 512) + grad_norm_block_partials(big, 512, 1024);
    CHECK(std::bit_cast<std::uint64_t>(full) == std::bit_cast<std::uint64_t>(halves));

    GradMap gm{{"t", big}};
    const double first = global_grad_norm(gm);
    for (int rep = 0; rep < 100; ++rep)
        CHECK(std::bit_cast<std::uint64_t>(global_grad_norm(gm)) ==
              std::bit_cast<std::uint64_t>(first));
}

TEST_CASE("clipping caps the post-clip norm") {
    GradMap g{{"a", random_tensor(10, {700}, -5, 5)}, {"b", random_tensor(11, {300}, -5, 5)}};
    const double norm = global_grad_norm(g);
    const float c = 1.0f;
    const float scale = clip_scale(norm, c);
    CHECK(scale < 1.0f);
    GradMap scaled = g;
    for (auto& [k, t] : scaled)
        for (auto& v : t.data) v *= scale;
    CHECK(global_grad_norm(scaled) <= c * (1.0 + 1e-6));
    CHECK(clip_scale(0.5, 1.0f) == 1.0f);
    CHECK(clip_scale(10.0, 0.0f) == 1.0f); // disabled
}

TEST_CASE("sharded step equals the single-worker step bitwise") {
    for (const int W : {2, 4}) {
        for (const std::int64_t n : {std::int64_t{1024}, std::int64_t{1000}, std::int64_t{3000}}) {
            Tensor a = random_tensor(20 + static_cast<std::uint64_t>(W), {n}, -1, 1, true);
            Tensor b = a;
            GradMap g{{"x", random_tensor(30 + static_cast<std::uint64_t>(n), {n}, -1, 1, true)}};

            OptimState single;
            single.hyper.lr = 3e-3f;
            single.seed = 99;
            adamw_step(single, {{"x", &a}}, g);
            adamw_step(single, {{"x", &a}}, g);

            WorkerGroup group(W);
            OptimState sharded;
            sharded.hyper.lr = 3e-3f;
            sharded.seed = 99;
            sharded_adamw_step(group, sharded, {{"x", &b}}, g);
            sharded_adamw_step(group, sharded, {{"x", &b}}, g, 1.0f, /*threaded=*/false);

            CHECK(bitwise_equal(a, b));
            // moment slots agree as well (worker-owned slices of the same state)
            CHECK(bitwise_equal(single.slots.at("x").first, sharded.slots.at("x").first));
            CHECK(bitwise_equal(single.slots.at("x").second, sharded.slots.at("x").second));
        }
    }
}

TEST_CASE("W=1 sharded step is exactly adamw_step") {
    Tensor a = random_tensor(40, {512}, -1, 1, true);
    Tensor b = a;
    GradMap g{{"x", random_tensor(41, {512}, -1, 1, true)}};
    OptimState s1, s2;
    s1.seed = s2.seed = 3;
    adamw_step(s1, {{"x", &a}}, g);
    WorkerGroup group(1);
    sharded_adamw_step(group, s2, {{"x", &b}}, g);
    CHECK(bitwise_equal(a, b));
}

TEST_CASE("optimizer state memory divides evenly across workers") {
    for (const int W : {2, 4, 8}) {
        const auto layout = shard_layout(7000000, W);
        CHECK(layout.per_worker * W == layout.padded);
        // bytes per worker = total/W for both moment precisions
        CHECK(moment_bytes_per_param(MomentPrecision::F32) == 8);
        CHECK(moment_bytes_per_param(MomentPrecision::BF16_SR) == 4);
        const std::uint64_t total_f32 = static_cast<std::uint64_t>(layout.padded) * 8;
        CHECK(total_f32 / W == static_cast<std::uint64_t>(layout.per_worker) * 8);
    }
}

TEST_CASE("non-finite gradients are rejected") {
    Tensor p = random_tensor(50, {8}, -1, 1, true);
    Tensor g = Tensor::zeros({8});
    g.data[3] = std::numeric_limits<float>::infinity();
    OptimState st;
    CHECK_THROWS_AS(adamw_step(st, {{"x", &p}}, GradMap{{"x", g}}), std::runtime_error);
}
