// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "qtrain/comms.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <map>

using namespace qtrain;
using qtest::bitwise_equal;
using qtest::random_tensor;

namespace {

// chunks[i][j] for a random instance
std::vector<std::vector<Tensor>> random_chunks(int W, std::int64_t len, std::uint64_t seed,
                                               bool integers = false) {
    std::vector<std::vector<Tensor>> out(static_cast<std::size_t>(W));
    for (int i = 0; i < W; ++i) {
        for (int j = 0; j < W; ++j) {
            auto t = random_tensor(seed + static_cast<std::uint64_t>(i * 131 + j), {len}, -4.0f,
                                   4.0f, true);
            if (integers)
                for (auto& v : t.data) v = std::floor(v);
            out[static_cast<std::size_t>(i)].push_back(std::move(t));
        }
    }
    return out;
}

std::vector<Tensor> zero_acc(int W, std::int64_t len) {
    std::vector<Tensor> acc;
    for (int i = 0; i < W; ++i) acc.push_back(Tensor::zeros({len}));
    return acc;
}

} // namespace

TEST_CASE("all_gather: identity at W=1 and concatenation order at W=3") {
    WorkerGroup g1(1);
    const std::vector<std::vector<std::uint8_t>> one = {{1, 2, 3}};
    const auto r1 = all_gather_bytes(g1, one);
    CHECK(r1.size() == 1);
    CHECK(r1[0] == one[0]);

    WorkerGroup g3(3);
    const std::vector<std::vector<std::uint8_t>> shards = {{10, 11}, {20, 21}, {30, 31}};
    const auto r3 = all_gather_bytes(g3, shards);
    const std::vector<std::uint8_t> want = {10, 11, 20, 21, 30, 31};
    for (const auto& out : r3) CHECK(out == want);

    CHECK_THROWS_AS((void)all_gather_bytes(g3, {{1}, {2, 3}, {4}}), std::invalid_argument);
}

TEST_CASE("all_gather: fp8 decode commutes with the gather") {
    const int W = 3;
    WorkerGroup g(W);
    std::vector<Tensor> plains;
    std::vector<std::vector<std::uint8_t>> code_shards;
    std::vector<float> scales;
    for (int i = 0; i < W; ++i) {
        plains.push_back(random_tensor(700 + static_cast<std::uint64_t>(i), {32}, -3, 3, true));
        auto q = quantize_absmax(plains.back().cspan(), plains.back().shape, F8Kind::E4M3);
        code_shards.push_back(q.codes);
        scales.push_back(q.scale);
    }
    const auto gathered = all_gather_bytes(g, code_shards); // raw codes, no arithmetic
    for (const auto& full : gathered) {
        for (int i = 0; i < W; ++i) {
            ScaledQuant q;
            q.kind = F8Kind::E4M3;
            q.scale = scales[static_cast<std::size_t>(i)];
            q.shape = {32};
            q.codes.assign(full.begin() + i * 32, full.begin() + (i + 1) * 32);
            const auto dec = dequantize(q);
            // decode-after-gather equals gather-after-decode (the original
            // dequantized shard)
            const auto ref = dequantize(quantize_absmax(plains[static_cast<std::size_t>(i)].cspan(),
                                                        {32}, F8Kind::E4M3));
            CHECK(dec == ref);
        }
    }
}

TEST_CASE("reduce_scatter: W=1 is the local aggregation only") {
    WorkerGroup g(1);
    auto chunks = random_chunks(1, 64, 42);
    auto acc = zero_acc(1, 64);
    const auto want = chunks[0][0];
    const auto out = reduce_scatter_copy(g, std::move(chunks), std::move(acc),
                                         {false, 0, 0, 0}); // plain adds
    CHECK(bitwise_equal(out[0], want));
}

TEST_CASE("reduce_scatter: integer chunks reduce exactly (W=3)") {
    const int W = 3;
    WorkerGroup g(W);
    auto chunks = random_chunks(W, 48, 77, true);
    const auto ref_chunks = chunks;
    const auto out =
        reduce_scatter_copy(g, std::move(chunks), zero_acc(W, 48), {true, 9, 1, 2});
    for (int i = 0; i < W; ++i) {
        for (std::int64_t e = 0; e < 48; ++e) {
            float want = 0.0f;
            for (int j = 0; j < W; ++j)
                want += ref_chunks[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)]
                            .data[static_cast<std::size_t>(e)];
            // small integers are exact in bf16, so stochastic rounding is a no-op
            CHECK(out[static_cast<std::size_t>(i)].data[static_cast<std::size_t>(e)] == want);
        }
    }
}

TEST_CASE("reduce_scatter: protocol trace has W-1 copy rounds and one free chunk per round") {
    for (const int W : {2, 3, 4, 8}) {
        WorkerGroup g(W);
        auto out = reduce_scatter_copy(g, random_chunks(W, 32, 5), zero_acc(W, 32), {true, 1, 0, 0},
                                       /*threaded=*/false);
        const auto trace = g.take_trace();

        int max_copy_round = 0;
        std::map<std::pair<int, int>, int> copies_per_round_worker;
        for (const auto& e : trace) {
            if (e.op == "copy") {
                max_copy_round = std::max(max_copy_round, e.round);
                copies_per_round_worker[{e.round, e.worker}]++;
                // the destination slot is the one freed by the previous round
                CHECK(e.chunk == (e.worker + e.round - 1) % W);
                CHECK(e.src == (e.worker - e.round + W) % W);
            }
        }
        CHECK(max_copy_round == W - 1);
        for (int r = 1; r < W; ++r)
            for (int w = 0; w < W; ++w) CHECK(copies_per_round_worker[{r, w}] == 1);
    }
}

TEST_CASE("reduce_scatter: equals the direct-summation oracle across W and schedules") {
    for (const int W : {1, 2, 3, 4, 8}) {
        for (std::uint64_t inst = 0; inst < 8; ++inst) {
            WorkerGroup g(W);
            const auto chunks = random_chunks(W, 40, 1000 + inst * 17);
            auto acc = zero_acc(W, 40);
            for (auto& a : acc)
                a = random_tensor(2000 + inst, {40}, -1, 1, true); // nonzero accumulators
            const SrSpec sr{true, 33, inst, 4};
            const auto oracle = reduce_scatter_oracle(chunks, acc, sr);

            // threaded execution
            auto out_t = reduce_scatter_copy(g, chunks, acc, sr, true);
            // lockstep under several shuffled worker orders
            for (std::uint64_t order = 0; order < 4; ++order) {
                auto out_l = reduce_scatter_copy(g, chunks, acc, sr, false, order * 7 + 1);
                for (int w = 0; w < W; ++w)
                    CHECK(bitwise_equal(out_l[static_cast<std::size_t>(w)],
                                        out_t[static_cast<std::size_t>(w)]));
            }
            for (int w = 0; w < W; ++w)
                CHECK(bitwise_equal(out_t[static_cast<std::size_t>(w)],
                                    oracle[static_cast<std::size_t>(w)]));
        }
    }
}

TEST_CASE("reduce_scatter: copy phase does zero arithmetic") {
    const int W = 4;
    WorkerGroup g(W);
    (void)reduce_scatter_copy(g, random_chunks(W, 64, 3), zero_acc(W, 64), {true, 2, 0, 0},
                              /*threaded=*/false);
    const auto marks = g.take_phase_marks();
    REQUIRE(marks.size() == 2);
    CHECK(marks[0].first == "phase1-done");
    CHECK(marks[1].first == "copies-done");
    CHECK(marks[0].second == marks[1].second); // meter unchanged across all copy rounds
    CHECK(marks[0].second > 0);
}

TEST_CASE("reduce_scatter then all_gather equals sum-all-then-slice") {
    for (const int W : {2, 3, 4}) {
        WorkerGroup g(W);
        const std::int64_t len = 24;
        const auto chunks = random_chunks(W, len, 4321 + static_cast<std::uint64_t>(W));
        const SrSpec sr{true, 5, 0, 7};
        auto shards = reduce_scatter_copy(g, chunks, zero_acc(W, len), sr);
        const auto full = all_gather_tensors(g, shards);
        const auto oracle_shards = reduce_scatter_oracle(chunks, zero_acc(W, len), sr);
        for (const auto& f : full) {
            for (int j = 0; j < W; ++j)
                for (std::int64_t e = 0; e < len; ++e)
                    CHECK(f.data[static_cast<std::size_t>(j * len + e)] ==
                          oracle_shards[static_cast<std::size_t>(j)].data[static_cast<std::size_t>(e)]);
        }
    }
}

TEST_CASE("host weight cache: one publish per step, everything else served") {
    const auto r1 = host_weight_cache(4, 1, 1000);
    CHECK(r1.total_publish_bytes == 1000);
    CHECK(r1.cache_served_passes == 1); // the backward pass
    validate_cache_events(r1);

    const auto r4 = host_weight_cache(4, 4, 1000);
    CHECK(r4.total_publish_bytes == 1000); // identical to GA=1
    CHECK(r4.cache_served_passes == 7);    // 3 fwd + 4 bwd beyond the first fwd
    int publishes = 0;
    for (const auto& p : r4.passes) {
        if (p.publish_bytes > 0) {
            ++publishes;
            CHECK(p.index == 0);
        }
    }
    CHECK(publishes == 1);
    validate_cache_events(r4);

    auto bad = r4;
    bad.passes[0].publish_bytes = 0;
    CHECK_THROWS_AS(validate_cache_events(bad), std::runtime_error);
}

TEST_CASE("traffic model: host-cached weights beat sharded gradients for GA > 1") {
    const Topology no_p2p{false, 64e9};
    // fp8 weights gather at 1 byte/param, gradients move in bf16
    for (const std::uint64_t params : {1000000ull, 7000000000ull}) {
        const std::uint64_t wbytes = params;
        const std::uint64_t gbytes = 2 * params;
        for (const int W : {2, 4, 8}) {
            for (const int ga : {1, 2, 4, 8, 16}) {
                const auto wt = weight_shard_traffic(true, ga, wbytes);
                CHECK(wt == weight_shard_traffic(true, 1, wbytes)); // GA-independent
                const auto gt = grad_shard_traffic(ga, W, gbytes, no_p2p);
                CHECK(gt == static_cast<std::uint64_t>(ga) * grad_shard_traffic(1, W, gbytes, no_p2p));
                if (ga > 1) CHECK(wt < gt); // shard weights before gradients
            }
        }
    }
    // without the cache, weight traffic grows with GA again
    CHECK(weight_shard_traffic(false, 4, 100) == 4 * weight_shard_traffic(false, 1, 100));
}

TEST_CASE("issue queue: bounded pool deadlocks without the cpu barrier") {
    // worker 0 races ahead: collective plus two kernels; worker 1 arrives late
    const std::vector<std::vector<SchedOp>> programs = {
        {{true, 0}, {false, 0}, {false, 0}},
        {{true, 0}},
    };
    const auto no_barrier = check_issue_queue(programs, 2, false);
    CHECK(no_barrier.deadlock_found);
    CHECK_FALSE(no_barrier.witness.empty());

    const auto with_barrier = check_issue_queue(programs, 2, true);
    CHECK_FALSE(with_barrier.deadlock_found);
    CHECK(with_barrier.all_complete);

    // unbounded resource: no deadlock either way
    const auto unbounded = check_issue_queue(programs, 1000, false);
    CHECK_FALSE(unbounded.deadlock_found);
    CHECK(unbounded.all_complete);
}

TEST_CASE("issue queue: multi-collective programs stay deadlock-free with the barrier") {
    const std::vector<std::vector<SchedOp>> programs = {
        {{false, 0}, {true, 0}, {false, 0}, {true, 1}, {false, 0}},
        {{true, 0}, {false, 0}, {false, 0}, {true, 1}},
        {{false, 0}, {true, 0}, {true, 1}, {false, 0}},
    };
    const auto no_barrier = check_issue_queue(programs, 3, false);
    CHECK(no_barrier.deadlock_found); // capacity == W is still racy without the barrier
    const auto with_barrier = check_issue_queue(programs, 3, true);
    CHECK_FALSE(with_barrier.deadlock_found);
    CHECK(with_barrier.all_complete);
}

TEST_CASE("shard layout: aligned, even, padded") {
    const auto l = shard_layout(1000, 4);
    CHECK(l.per_worker * 4 == l.padded);
    CHECK(l.padded >= 1000);
    CHECK(l.per_worker % kShardAlign == 0);
    CHECK(shard_layout(1024, 4).padded == 1024);
    CHECK(shard_layout(1, 1).padded == kShardAlign);
}

TEST_CASE("trace exports as json lines") {
    WorkerGroup g(2);
    (void)reduce_scatter_copy(g, random_chunks(2, 16, 8), zero_acc(2, 16), {true, 0, 0, 0}, false);
    const auto s = trace_to_jsonl(g.take_trace());
    CHECK(s.find("\"op\":\"copy\"") != std::string::npos);
    CHECK(s.find("\"stream\":\"copy\"") != std::string::npos);
    CHECK(std::count(s.begin(), s.end(), '\n') >= 4);
}
