// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "qtrain/tensorops.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <cmath>

using namespace qtrain;
using qtest::bitwise_equal;
using qtest::random_tensor;

namespace {

// |fd - analytic| <= tol * max(1, |analytic|)
void check_grad(float fd, float an, float tol) {
    CHECK(std::fabs(fd - an) <= tol * std::max(1.0f, std::fabs(an)));
}

} // namespace

TEST_CASE("matmul_tn: identity passthrough") {
    auto x = random_tensor(1, {5, 4}, -2.0f, 2.0f, true);
    Tensor eye = Tensor::zeros({4, 4});
    for (int i = 0; i < 4; ++i) eye.at(i, i) = 1.0f;
    const Tensor out = matmul_tn(x, eye);
    CHECK(bitwise_equal(out, x));
}

TEST_CASE("matmul_tn: fp8 path is exact on small integers") {
    // entries from {-4,-2,-1,0,1,2,4}: scaled codes and all products stay
    // exactly representable (112*3 = 336 would not be)
    Tensor a{{2, 2}, {1.0f, -4.0f, -1.0f, 2.0f}};
    Tensor b{{2, 2}, {2.0f, 1.0f, -2.0f, 4.0f}};
    const auto qa = quantize_absmax(a.cspan(), a.shape, F8Kind::E4M3);
    const auto qb = quantize_absmax(b.cspan(), b.shape, F8Kind::E4M3);
    CHECK(qa.scale == 112.0f);
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        CHECK(f8_decode(qa.codes[i], F8Kind::E4M3) == a.data[i] * 112.0f);
        CHECK(f8_decode(qb.codes[i], F8Kind::E4M3) == b.data[i] * 112.0f);
    }
    const Tensor out = matmul_tn(qa, qb);
    // integer oracle: out[m][n] = sum_k a[m][k] * b[n][k]
    for (int m = 0; m < 2; ++m)
        for (int n = 0; n < 2; ++n) {
            long acc = 0;
            for (int k = 0; k < 2; ++k)
                acc += static_cast<long>(a.at(m, k)) * static_cast<long>(b.at(n, k));
            CHECK(out.at(m, n) == static_cast<float>(acc));
        }
}

TEST_CASE("matmul_tn: 8x8x8 against an f64 reference") {
    auto a = random_tensor(2, {8, 8}, -1.0f, 1.0f, true);
    auto b = random_tensor(3, {8, 8}, -1.0f, 1.0f, true);
    const Tensor out = matmul_tn(a, b);
    for (int m = 0; m < 8; ++m)
        for (int n = 0; n < 8; ++n) {
            double ref = 0.0, mag = 0.0;
            for (int k = 0; k < 8; ++k) {
                const double p = static_cast<double>(a.at(m, k)) * b.at(n, k);
                ref += p;
                mag += std::fabs(p);
            }
            const double bound = 8.0 * 0x1.0p-24 * mag + 1e-12;
            CHECK(std::fabs(out.at(m, n) - ref) <= bound);
        }
}

TEST_CASE("matmul_tn: shape mismatch throws") {
    auto a = random_tensor(4, {3, 5}, -1, 1);
    auto b = random_tensor(5, {2, 4}, -1, 1);
    CHECK_THROWS_AS((void)matmul_tn(a, b), std::invalid_argument);
}

TEST_CASE("rmsnorm_residual_fused: zero x leaves the residual alone") {
    auto res = random_tensor(6, {3, 16}, -2, 2, true);
    auto gamma = random_tensor(7, {16}, 0.5f, 1.5f, true);
    const auto [nr, normed] = rmsnorm_residual_fused(nullptr, res, gamma, 1e-6f);
    CHECK(bitwise_equal(nr, res));
    // oracle: plain rmsnorm in the same order
    for (int r = 0; r < 3; ++r) {
        float ssq = 0.0f;
        for (int i = 0; i < 16; ++i) ssq += res.at(r, i) * res.at(r, i);
        const float inv = 1.0f / std::sqrt(ssq / 16.0f + 1e-6f);
        for (int i = 0; i < 16; ++i)
            CHECK(normed.value.at(r, i) == bf16_round((res.at(r, i) * inv) * gamma.data[i]));
    }
}

TEST_CASE("rmsnorm_residual_fused: constant vector, gamma = 1") {
    const float c = -3.0f;
    Tensor res = Tensor::full({1, 64}, c);
    Tensor gamma = Tensor::full({64}, 1.0f);
    const auto [nr, normed] = rmsnorm_residual_fused(nullptr, res, gamma, 1e-6f, OutRound::None);
    for (const float v : normed.value.data) CHECK(v == doctest::Approx(c / std::fabs(c)).epsilon(1e-5));
}

TEST_CASE("rmsnorm_residual_fused: bitwise equals the unfused composition") {
    auto x = random_tensor(8, {4, 32}, -1, 1, true);
    auto res = random_tensor(9, {4, 32}, -1, 1, true);
    auto gamma = random_tensor(10, {32}, 0.5f, 1.5f, true);
    const auto [nr, normed] = rmsnorm_residual_fused(&x, res, gamma, 1e-6f);
    // unfused: separate add, then the norm with the same accumulation order
    Tensor nr2 = Tensor::zeros({4, 32});
    for (std::size_t i = 0; i < nr2.data.size(); ++i) nr2.data[i] = bf16_round(x.data[i] + res.data[i]);
    const auto [nr3, normed2] = rmsnorm_residual_fused(nullptr, nr2, gamma, 1e-6f);
    CHECK(bitwise_equal(nr, nr2));
    CHECK(bitwise_equal(normed.value, normed2.value));
    CHECK(normed.absmax == normed2.absmax);
}

TEST_CASE("fused absmax outputs equal a fresh absmax of the value") {
    auto x = random_tensor(11, {6, 32}, -4, 4, true);
    auto res = random_tensor(12, {6, 32}, -4, 4, true);
    auto gamma = random_tensor(13, {32}, 0.1f, 2.0f, true);
    const auto [nr, normed] = rmsnorm_residual_fused(&x, res, gamma, 1e-6f);
    CHECK(normed.absmax == absmax(normed.value.cspan()));

    auto gu = random_tensor(14, {5, 64}, -3, 3, true);
    const auto sw = swiglu_fused(gu);
    CHECK(sw.absmax == absmax(sw.value.cspan()));
}

TEST_CASE("swiglu: zero gate and saturated gate") {
    Tensor gu = Tensor::zeros({1, 8});
    for (int i = 0; i < 4; ++i) gu.at(0, 4 + i) = 2.0f; // fill the up half only
    const auto out = swiglu_fused(gu);
    for (const float v : out.value.data) CHECK(v == 0.0f);

    Tensor gu2 = Tensor::zeros({1, 8});
    for (int i = 0; i < 4; ++i) {
        gu2.at(0, i) = 40.0f; // silu(40) ~= 40
        gu2.at(0, 4 + i) = 1.5f;
    }
    const auto out2 = swiglu_fused(gu2, OutRound::None);
    for (const float v : out2.value.data) CHECK(v == doctest::Approx(60.0f).epsilon(1e-5));
}

TEST_CASE("swiglu: odd last dim throws") {
    auto bad = random_tensor(15, {2, 7}, -1, 1);
    CHECK_THROWS_AS((void)swiglu_fused(bad), std::invalid_argument);
}

TEST_CASE("swiglu backward matches central finite differences") {
    auto gu = random_tensor(16, {3, 16}, -2, 2);
    auto go = random_tensor(17, {3, 8}, -1, 1);
    const Tensor dgu = swiglu_backward(gu, go, OutRound::None);
    const float h = 1e-2f;
    for (std::size_t i = 0; i < gu.data.size(); ++i) {
        auto up = gu, dn = gu;
        up.data[i] += h;
        dn.data[i] -= h;
        const auto fu = swiglu_fused(up, OutRound::None);
        const auto fd = swiglu_fused(dn, OutRound::None);
        double lu = 0.0, ld = 0.0; // scalar objective: sum(out * go)
        for (std::size_t j = 0; j < fu.value.data.size(); ++j) {
            lu += static_cast<double>(fu.value.data[j]) * go.data[j];
            ld += static_cast<double>(fd.value.data[j]) * go.data[j];
        }
        check_grad(static_cast<float>((lu - ld) / (2.0 * h)), dgu.data[i], 1e-4f);
    }
}

TEST_CASE("transpose_quantize composes transpose after quantize") {
    auto t = random_tensor(18, {7, 5}, -3, 3, true);
    const auto tq = transpose_quantize(t, F8Kind::E4M3);
    const auto q = quantize_absmax(t.cspan(), t.shape, F8Kind::E4M3);
    CHECK(tq.scale == q.scale);
    CHECK(tq.source_absmax == q.source_absmax);
    REQUIRE(tq.shape == std::vector<std::int64_t>{5, 7});
    for (int r = 0; r < 7; ++r)
        for (int c = 0; c < 5; ++c) CHECK(tq.codes[c * 7 + r] == q.codes[r * 5 + c]);
}

TEST_CASE("transpose_quantize: symmetric matrix gives symmetric codes") {
    Tensor t = Tensor::zeros({4, 4});
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) t.at(r, c) = bf16_round(0.3f * (r + c) - 0.7f * (r * c));
    const auto tq = transpose_quantize(t, F8Kind::E5M2);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) CHECK(tq.codes[r * 4 + c] == tq.codes[c * 4 + r]);
}

TEST_CASE("transpose_quantize: 1xN becomes Nx1 with the same values") {
    auto t = random_tensor(19, {1, 9}, -2, 2, true);
    const auto tq = transpose_quantize(t, F8Kind::E4M3);
    const auto q = quantize_absmax(t.cspan(), t.shape, F8Kind::E4M3);
    CHECK(tq.shape == std::vector<std::int64_t>{9, 1});
    CHECK(tq.codes == q.codes);
    CHECK_THROWS_AS((void)transpose_quantize(random_tensor(20, {2, 2, 2}, -1, 1), F8Kind::E4M3),
                    std::invalid_argument);
}

namespace {

// naive causal attention written independently of the chunked kernel
Tensor naive_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    const std::int64_t H = q.shape[0], T = q.shape[1], D = q.shape[2];
    const std::int64_t group = H / k.shape[0];
    const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(D));
    Tensor out = Tensor::zeros(q.shape);
    for (std::int64_t h = 0; h < H; ++h) {
        const std::int64_t kvh = h / group;
        for (std::int64_t t = 0; t < T; ++t) {
            std::vector<float> s(static_cast<std::size_t>(t + 1));
            float mx = -std::numeric_limits<float>::infinity();
            for (std::int64_t j = 0; j <= t; ++j) {
                float acc = 0.0f;
                for (std::int64_t i = 0; i < D; ++i)
                    acc += q.data[(h * T + t) * D + i] * k.data[(kvh * T + j) * D + i];
                s[j] = acc * inv_sqrt_d;
                mx = std::max(mx, s[j]);
            }
            float denom = 0.0f;
            for (std::int64_t j = 0; j <= t; ++j) {
                s[j] = std::exp(s[j] - mx);
                denom += s[j];
            }
            const float inv_denom = 1.0f / denom;
            for (std::int64_t j = 0; j <= t; ++j) s[j] *= inv_denom;
            for (std::int64_t i = 0; i < D; ++i) {
                float acc = 0.0f;
                for (std::int64_t j = 0; j <= t; ++j) acc += s[j] * v.data[(kvh * T + j) * D + i];
                out.data[(h * T + t) * D + i] = bf16_round(acc);
            }
        }
    }
    return out;
}

} // namespace

TEST_CASE("sdpa: single chunk equals naive attention bitwise") {
    auto q = random_tensor(21, {2, 8, 4}, -1, 1, true);
    auto k = random_tensor(22, {1, 8, 4}, -1, 1, true);
    auto v = random_tensor(23, {1, 8, 4}, -1, 1, true);
    const Tensor full = sdpa_chunked(q, k, v, 8);
    CHECK(bitwise_equal(full, naive_attention(q, k, v)));
}

TEST_CASE("sdpa: output is invariant to chunk size") {
    auto q = random_tensor(24, {2, 12, 4}, -1, 1, true);
    auto k = random_tensor(25, {2, 12, 4}, -1, 1, true);
    auto v = random_tensor(26, {2, 12, 4}, -1, 1, true);
    const Tensor base = sdpa_chunked(q, k, v, 12);
    for (const std::int64_t cr : {std::int64_t{1}, std::int64_t{2}, std::int64_t{5}, std::int64_t{64}}) {
        CHECK(bitwise_equal(sdpa_chunked(q, k, v, cr), base)); // 64 > T exercises the clamp
    }
    const auto gb = sdpa_chunked_backward(q, k, v, random_tensor(27, {2, 12, 4}, -1, 1, true), 12);
    for (const std::int64_t cr : {std::int64_t{1}, std::int64_t{3}}) {
        const auto g2 = sdpa_chunked_backward(q, k, v, random_tensor(27, {2, 12, 4}, -1, 1, true), cr);
        CHECK(bitwise_equal(gb.dq, g2.dq));
        CHECK(bitwise_equal(gb.dk, g2.dk));
        CHECK(bitwise_equal(gb.dv, g2.dv));
    }
}

TEST_CASE("sdpa backward matches finite differences") {
    auto q = random_tensor(28, {1, 5, 4}, -1, 1);
    auto k = random_tensor(29, {1, 5, 4}, -1, 1);
    auto v = random_tensor(30, {1, 5, 4}, -1, 1);
    auto go = random_tensor(31, {1, 5, 4}, -1, 1);
    const auto g = sdpa_chunked_backward(q, k, v, go, 5, OutRound::None);
    const float h = 2e-2f;
    auto objective = [&](const Tensor& qq, const Tensor& kk, const Tensor& vv) {
        const Tensor o = sdpa_chunked(qq, kk, vv, 5, OutRound::None);
        double s = 0.0;
        for (std::size_t i = 0; i < o.data.size(); ++i) s += static_cast<double>(o.data[i]) * go.data[i];
        return s;
    };
    for (std::size_t i = 0; i < q.data.size(); ++i) {
        auto up = q, dn = q;
        up.data[i] += h;
        dn.data[i] -= h;
        check_grad(static_cast<float>((objective(up, k, v) - objective(dn, k, v)) / (2.0 * h)),
                   g.dq.data[i], 1e-3f);
    }
    for (std::size_t i = 0; i < k.data.size(); ++i) {
        auto up = k, dn = k;
        up.data[i] += h;
        dn.data[i] -= h;
        check_grad(static_cast<float>((objective(q, up, v) - objective(q, dn, v)) / (2.0 * h)),
                   g.dk.data[i], 1e-3f);
        auto vu = v, vd = v;
        vu.data[i] += h;
        vd.data[i] -= h;
        check_grad(static_cast<float>((objective(q, k, vu) - objective(q, k, vd)) / (2.0 * h)),
                   g.dv.data[i], 1e-3f);
    }
}

TEST_CASE("deterministic_reduce: basics and stability") {
    auto t = random_tensor(32, {4, 4}, -1, 1);
    const Tensor single = deterministic_reduce(std::span(&t, 1));
    CHECK(bitwise_equal(single, t));

    // partials engineered to cancel catastrophically in other orders
    std::vector<Tensor> parts;
    parts.push_back(Tensor{{2}, {1e20f, -1.0f}});
    parts.push_back(Tensor{{2}, {-1e20f, 1e-3f}});
    parts.push_back(Tensor{{2}, {1.0f, 1e20f}});
    parts.push_back(Tensor{{2}, {-1.0f, -1e20f}});
    const Tensor first = deterministic_reduce(parts);
    for (int rep = 0; rep < 100; ++rep) CHECK(bitwise_equal(deterministic_reduce(parts), first));

    // f64 oracle agreement within summation error
    std::vector<Tensor> ps;
    for (int i = 0; i < 6; ++i) ps.push_back(random_tensor(40 + i, {8}, -10, 10));
    const Tensor red = deterministic_reduce(ps);
    for (int e = 0; e < 8; ++e) {
        double ref = 0.0, mag = 0.0;
        for (const auto& p : ps) {
            ref += p.data[e];
            mag += std::fabs(p.data[e]);
        }
        CHECK(std::fabs(red.data[e] - ref) <= 6.0 * 0x1.0p-24 * mag + 1e-12);
    }

    CHECK_THROWS_AS((void)deterministic_reduce({}), std::invalid_argument);
}

TEST_CASE("embedding backward: permutation and all-identical cases") {
    const std::vector<std::int32_t> ids = {3, 1, 4, 0};
    auto go = random_tensor(50, {4, 6}, -1, 1);
    const Tensor g = embedding_backward_sorted(ids, go, 5);
    for (int t = 0; t < 4; ++t)
        for (int i = 0; i < 6; ++i) CHECK(g.at(ids[t], i) == go.at(t, i));
    for (int i = 0; i < 6; ++i) CHECK(g.at(2, i) == 0.0f);

    const std::vector<std::int32_t> same = {2, 2, 2, 2};
    const Tensor gs = embedding_backward_sorted(same, go, 5);
    for (int i = 0; i < 6; ++i) {
        float acc = 0.0f;
        for (int t = 0; t < 4; ++t) acc += go.at(t, i); // ascending position order
        CHECK(gs.at(2, i) == acc);
    }
}

TEST_CASE("embedding backward: random ids equal the ordered scatter-add oracle") {
    const std::int64_t vocab = 17, n = 200, d = 8;
    std::vector<std::int32_t> ids(n);
    for (std::int64_t i = 0; i < n; ++i)
        ids[i] = static_cast<std::int32_t>(rng_uniform({9, 9, static_cast<std::uint64_t>(i)}) % vocab);
    auto go = random_tensor(51, {n, d}, -2, 2);
    const Tensor g = embedding_backward_sorted(ids, go, vocab);
    Tensor oracle = Tensor::zeros({vocab, d});
    for (std::int64_t t = 0; t < n; ++t)
        for (std::int64_t i = 0; i < d; ++i) oracle.at(ids[t], i) += go.at(t, i);
    CHECK(bitwise_equal(g, oracle));

    std::vector<std::int32_t> bad = {0, 17};
    CHECK_THROWS_AS((void)embedding_backward_sorted(bad, random_tensor(52, {2, 8}, -1, 1), vocab),
                    std::out_of_range);
}

TEST_CASE("cross entropy: uniform logits give ln(vocab)") {
    auto hidden = random_tensor(60, {6, 8}, -1, 1, true);
    Tensor lm_w = Tensor::zeros({11, 8});
    const std::vector<std::int32_t> targets = {0, 3, 7, 10, 5, 2};
    const auto r = fused_cross_entropy_chunked(hidden, lm_w, targets, 6);
    CHECK(r.loss == doctest::Approx(std::log(11.0)).epsilon(1e-6));
}

TEST_CASE("cross entropy: chunk invariance is bitwise") {
    auto hidden = random_tensor(61, {10, 8}, -1, 1, true);
    auto lm_w = random_tensor(62, {13, 8}, -1, 1, true);
    std::vector<std::int32_t> targets(10);
    for (int t = 0; t < 10; ++t) targets[t] = t % 13;
    const auto base = fused_cross_entropy_chunked(hidden, lm_w, targets, 10);
    for (const std::int64_t ct : {std::int64_t{1}, std::int64_t{2}, std::int64_t{3}, std::int64_t{7}}) {
        const auto r = fused_cross_entropy_chunked(hidden, lm_w, targets, ct);
        CHECK(r.loss == base.loss);
        CHECK(bitwise_equal(r.d_hidden, base.d_hidden));
        CHECK(bitwise_equal(r.d_lm_w, base.d_lm_w));
    }
    CHECK(base.workspace_floats == 10 * 13);

    std::vector<std::int32_t> bad = {0, 13, 1, 1, 1, 1, 1, 1, 1, 1};
    CHECK_THROWS_AS((void)fused_cross_entropy_chunked(hidden, lm_w, bad, 4), std::out_of_range);
}

TEST_CASE("cross entropy gradients match finite differences (4 tokens, 11 vocab)") {
    auto hidden = random_tensor(63, {4, 6}, -1, 1);
    auto lm_w = random_tensor(64, {11, 6}, -1, 1);
    const std::vector<std::int32_t> targets = {1, 6, 10, 0};
    const auto r = fused_cross_entropy_chunked(hidden, lm_w, targets, 4, true, OutRound::None);
    const float h = 1e-2f;
    for (std::size_t i = 0; i < hidden.data.size(); ++i) {
        auto up = hidden, dn = hidden;
        up.data[i] += h;
        dn.data[i] -= h;
        const float lu = fused_cross_entropy_chunked(up, lm_w, targets, 4, false).loss;
        const float ld = fused_cross_entropy_chunked(dn, lm_w, targets, 4, false).loss;
        check_grad((lu - ld) / (2.0f * h), r.d_hidden.data[i], 1e-4f);
    }
    for (std::size_t i = 0; i < lm_w.data.size(); ++i) {
        auto up = lm_w, dn = lm_w;
        up.data[i] += h;
        dn.data[i] -= h;
        const float lu = fused_cross_entropy_chunked(hidden, up, targets, 4, false).loss;
        const float ld = fused_cross_entropy_chunked(hidden, dn, targets, 4, false).loss;
        check_grad((lu - ld) / (2.0f * h), r.d_lm_w.data[i], 1e-4f);
    }
}

TEST_CASE("ops are bitwise deterministic across repeated runs") {
    auto a = random_tensor(70, {6, 12}, -2, 2, true);
    auto b = random_tensor(71, {9, 12}, -2, 2, true);
    CHECK(bitwise_equal(matmul_tn(a, b), matmul_tn(a, b)));
    const auto qa = quantize_absmax(a.cspan(), a.shape, F8Kind::E4M3);
    const auto qb = quantize_absmax(b.cspan(), b.shape, F8Kind::E5M2);
    CHECK(bitwise_equal(matmul_tn(qa, qb), matmul_tn(qa, qb)));
}
