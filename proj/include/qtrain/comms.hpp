// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0
//
// Simulated multi-worker runtime over a shared address space: copy-based
// all-gather, the three-phase copy reduce-scatter, host weight caching, the
// bounded-issue-queue deadlock model and its CPU-side barrier fix.
//
// Central contract: collectives produce identical bits under any thread
// interleaving or lockstep visiting order. Copy phases move bytes only; an
// arithmetic meter proves it.

#pragma once

#include "qtrain/numerics.hpp"
#include "qtrain/tensor.hpp"

#include <atomic>
#include <barrier>
#include <cstdint>
#include <functional>
#include <mutex>
#include <string>
#include <vector>

namespace qtrain {

struct Topology {
    bool p2p = false;              // no peer-to-peer: every transfer crosses the host twice
    double link_bandwidth = 64e9;  // bytes/s per direction (PCIe 4.0 x16 by default)

    int link_traversals() const { return p2p ? 1 : 2; }
};

enum class Stream { Main, Copy };

struct TraceEvent {
    double time = 0.0; // logical clock (protocol rounds); seconds live in the planner
    int worker = -1;
    Stream stream = Stream::Main;
    std::string op;
    std::uint64_t bytes = 0;
    int round = -1; // 0 = local aggregation, 1..W-1 = copy rounds, W = reduction
    int chunk = -1; // chunk slot involved
    int src = -1;   // source worker for copies
};

/// N simulated workers sharing one address space. `run` is the threaded mode
/// (one std::thread per worker, phase barriers inside the collectives); the
/// lockstep drivers below replay the same phase functions in any caller-given
/// order.
class WorkerGroup {
public:
    explicit WorkerGroup(int workers, Topology topo = {});

    int size() const { return workers_; }
    const Topology& topology() const { return topo_; }

    void run(const std::function<void(int)>& fn);
    void barrier(); // only from inside run()

    void add_arith(std::uint64_t n) { arith_ += n; }
    std::uint64_t arith_ops() const { return arith_; }

    void record(TraceEvent e);
    std::vector<TraceEvent> take_trace();
    /// Arithmetic-meter snapshots at phase boundaries, appended by collectives.
    std::vector<std::pair<std::string, std::uint64_t>> take_phase_marks();
    void mark_phase(const std::string& name);

private:
    int workers_;
    Topology topo_;
    std::barrier<> bar_;
    std::mutex mu_;
    std::vector<TraceEvent> trace_;
    std::vector<std::pair<std::string, std::uint64_t>> marks_;
    std::atomic<std::uint64_t> arith_{0};
};

// ---------------------------------------------------------------------------
// Sharding layout (shared with the optimizer): contiguous 1/W slices, padded
// to W * kShardAlign elements so shard boundaries align with the fixed-block
// norm reduction.
// ---------------------------------------------------------------------------

inline constexpr std::int64_t kShardAlign = 256;

struct ShardLayout {
    std::int64_t padded = 0;
    std::int64_t per_worker = 0;
};

ShardLayout shard_layout(std::int64_t numel, int workers);

// ---------------------------------------------------------------------------
// all-gather (pure byte movement)
// ---------------------------------------------------------------------------

/// Every worker ends with the concatenation of all shards in shard order.
/// Lockstep when order_seed == nullptr is not needed: gather has one phase and
/// any order works; the threaded path exercises real concurrency.
std::vector<std::vector<std::uint8_t>> all_gather_bytes(WorkerGroup& g,
                                                        const std::vector<std::vector<std::uint8_t>>& shards,
                                                        bool threaded = true);

std::vector<Tensor> all_gather_tensors(WorkerGroup& g, const std::vector<Tensor>& shards,
                                       bool threaded = true);

// ---------------------------------------------------------------------------
// reduce-scatter as three phases of copies plus local arithmetic
// ---------------------------------------------------------------------------

struct SrSpec {
    bool stochastic = true; // bf16 accumulate with stochastic rounding; false = plain f32 adds
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    std::uint64_t layer = 0;
};

/// chunks[i][j] = worker i's gradient chunk destined to owner j; acc[i] =
/// worker i's shard accumulator (modified). Order per shard: own chunk first
/// (local aggregation), then ascending source worker. Rounding keys derive
/// from (step, layer, source worker, element), so any schedule gives the same
/// bits.
std::vector<Tensor> reduce_scatter_copy(WorkerGroup& g, std::vector<std::vector<Tensor>> chunks,
                                        std::vector<Tensor> acc, const SrSpec& sr,
                                        bool threaded = true, std::uint64_t lockstep_order_seed = 0);

/// Reference for tests: straight summation per shard in the same documented
/// order and rounding, no protocol.
std::vector<Tensor> reduce_scatter_oracle(const std::vector<std::vector<Tensor>>& chunks,
                                          std::vector<Tensor> acc, const SrSpec& sr);

// ---------------------------------------------------------------------------
// Host weight cache (event model)
// ---------------------------------------------------------------------------

struct HostCacheReport {
    struct Pass {
        int index = 0;   // 0-based pass (fwd then bwd per microbatch)
        bool forward = true;
        std::uint64_t publish_bytes = 0;    // new inter-worker traffic (worker -> host)
        std::uint64_t cache_read_bytes = 0; // host -> device, overlappable
    };
    std::vector<Pass> passes;
    std::uint64_t total_publish_bytes = 0;
    int cache_served_passes = 0;
};

/// Sharded weights live in host memory: shards are published once per
/// optimizer step, during the first forward pass; every later pass in the
/// accumulation window is served from the cache.
HostCacheReport host_weight_cache(int workers, int ga_steps, std::uint64_t weight_bytes_total);

/// Throws if a pass reads the cache before the publish pass.
void validate_cache_events(const HostCacheReport& report);

// ---------------------------------------------------------------------------
// Communication-volume model (per optimizer step, total bytes crossing the
// host link because of sharding; down-legs common to all schemes excluded)
// ---------------------------------------------------------------------------

/// Sharded weights: without the host cache every pass (fwd+bwd per microbatch)
/// re-uploads every shard; with it, one publish per step.
std::uint64_t weight_shard_traffic(bool host_cache, int ga_steps, std::uint64_t weight_bytes);

/// Sharded gradients reduce-scatter every microbatch: (W-1)/W of the gradient
/// bytes per worker, up and down when host-routed.
std::uint64_t grad_shard_traffic(int ga_steps, int workers, std::uint64_t grad_bytes,
                                 const Topology& topo);

// ---------------------------------------------------------------------------
// Issue-queue deadlock model
// ---------------------------------------------------------------------------

/// One enqueued GPU operation. Collectives carry a global barrier: they
/// complete only once every worker has them at the front of its stream.
struct SchedOp {
    bool collective = false;
    int id = 0; // matches collectives across workers
};

struct DeadlockCheck {
    bool deadlock_found = false;
    bool all_complete = false;
    std::uint64_t states_explored = 0;
    std::vector<std::string> witness; // action trace reaching a deadlock
};

/// Exhaustive enumeration of every interleaving of a small schedule under a
/// shared bounded issue pool (the paper's hypothesized per-process resource:
/// enqueues block when `pool_capacity` operations are pending across all
/// workers). With `cpu_barrier`, a worker that issued a collective submits
/// nothing further until all workers have issued it.
DeadlockCheck check_issue_queue(const std::vector<std::vector<SchedOp>>& programs,
                                int pool_capacity, bool cpu_barrier,
                                std::uint64_t max_states = 2000000);

/// JSON-lines export of a protocol trace (one event per line).
std::string trace_to_jsonl(const std::vector<TraceEvent>& trace);

} // namespace qtrain
