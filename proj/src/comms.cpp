// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0

#include "qtrain/comms.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <unordered_set>

namespace qtrain {

WorkerGroup::WorkerGroup(int workers, Topology topo)
    : workers_(workers), topo_(topo), bar_(workers) {
    if (workers < 1) throw std::invalid_argument("WorkerGroup: need at least one worker");
}

void WorkerGroup::run(const std::function<void(int)>& fn) {
    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(workers_));
    std::exception_ptr err;
    std::mutex err_mu;
    for (int w = 0; w < workers_; ++w) {
        threads.emplace_back([&, w] {
            try {
                fn(w);
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!err) err = std::current_exception();
            }
        });
    }
    for (auto& t : threads) t.join();
    if (err) std::rethrow_exception(err);
}

void WorkerGroup::barrier() { bar_.arrive_and_wait(); }

void WorkerGroup::record(TraceEvent e) {
    std::lock_guard<std::mutex> lk(mu_);
    trace_.push_back(std::move(e));
}

std::vector<TraceEvent> WorkerGroup::take_trace() {
    std::lock_guard<std::mutex> lk(mu_);
    auto out = std::move(trace_);
    trace_.clear();
    // stable report order regardless of thread arrival
    std::stable_sort(out.begin(), out.end(), [](const TraceEvent& a, const TraceEvent& b) {
        if (a.round != b.round) return a.round < b.round;
        return a.worker < b.worker;
    });
    return out;
}

void WorkerGroup::mark_phase(const std::string& name) {
    std::lock_guard<std::mutex> lk(mu_);
    marks_.emplace_back(name, arith_.load());
}

std::vector<std::pair<std::string, std::uint64_t>> WorkerGroup::take_phase_marks() {
    std::lock_guard<std::mutex> lk(mu_);
    auto out = std::move(marks_);
    marks_.clear();
    return out;
}

ShardLayout shard_layout(std::int64_t numel, int workers) {
    const std::int64_t unit = kShardAlign * workers;
    const std::int64_t padded = (numel + unit - 1) / unit * unit;
    return {padded, padded / workers};
}

// ---------------------------------------------------------------------------
// all-gather
// ---------------------------------------------------------------------------

std::vector<std::vector<std::uint8_t>> all_gather_bytes(WorkerGroup& g,
                                                        const std::vector<std::vector<std::uint8_t>>& shards,
                                                        bool threaded) {
    const int W = g.size();
    if (static_cast<int>(shards.size()) != W)
        throw std::invalid_argument("all_gather: one shard per worker expected");
    const std::size_t len = shards[0].size();
    for (const auto& s : shards)
        if (s.size() != len) throw std::invalid_argument("all_gather: shard size mismatch");

    std::vector<std::vector<std::uint8_t>> out(static_cast<std::size_t>(W));
    auto gather_one = [&](int w) {
        auto& dst = out[static_cast<std::size_t>(w)];
        dst.resize(len * static_cast<std::size_t>(W));
        for (int j = 0; j < W; ++j) {
            std::copy(shards[static_cast<std::size_t>(j)].begin(),
                      shards[static_cast<std::size_t>(j)].end(),
                      dst.begin() + static_cast<std::ptrdiff_t>(len) * j);
            if (j != w)
                g.record({0.0, w, Stream::Copy, "gather-copy", len, 0, j, j});
        }
    };
    if (threaded) {
        g.run(gather_one);
    } else {
        for (int w = 0; w < W; ++w) gather_one(w);
    }
    return out;
}

std::vector<Tensor> all_gather_tensors(WorkerGroup& g, const std::vector<Tensor>& shards,
                                       bool threaded) {
    std::vector<std::vector<std::uint8_t>> bytes(shards.size());
    for (std::size_t i = 0; i < shards.size(); ++i) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(shards[i].data.data());
        bytes[i].assign(p, p + shards[i].data.size() * sizeof(float));
    }
    auto gathered = all_gather_bytes(g, bytes, threaded);
    std::vector<Tensor> out;
    out.reserve(gathered.size());
    const std::int64_t n = static_cast<std::int64_t>(gathered[0].size() / sizeof(float));
    for (auto& gb : gathered) {
        Tensor t = Tensor::zeros({n});
        std::copy(gb.begin(), gb.end(), reinterpret_cast<std::uint8_t*>(t.data.data()));
        out.push_back(std::move(t));
    }
    return out;
}

// ---------------------------------------------------------------------------
// reduce-scatter
// ---------------------------------------------------------------------------

namespace {

// accumulate one source chunk into the shard, in the documented order and
// rounding; this is the only arithmetic in the whole protocol
void sr_add(WorkerGroup& g, Tensor& acc, const Tensor& chunk, const SrSpec& sr, int src_worker) {
    const std::uint64_t stream = fnv1a64("rs/" + std::to_string(sr.step) + "/" +
                                         std::to_string(sr.layer) + "/" + std::to_string(src_worker));
    for (std::size_t i = 0; i < acc.data.size(); ++i) {
        const float sum = acc.data[i] + chunk.data[i];
        acc.data[i] = sr.stochastic ? stochastic_round_bf16(sum, {sr.seed, stream, i}) : sum;
    }
    g.add_arith(acc.data.size());
}

struct ReduceScatterState {
    WorkerGroup& g;
    std::vector<std::vector<Tensor>> chunks; // chunks[i][slot]
    std::vector<Tensor> acc;
    SrSpec sr;
    int W;

    void phase1(int w) {
        sr_add(g, acc[static_cast<std::size_t>(w)],
               chunks[static_cast<std::size_t>(w)][static_cast<std::size_t>(w)], sr, w);
        g.record({0.0, w, Stream::Main, "aggregate-local", bytes(), 0, w, w});
    }

    // round r: worker w receives its owned chunk from worker (w - r) into the
    // slot it sent from in round r-1 (slot w itself for r = 1)
    void copy_round(int r, int w) {
        const int src = (w - r + W) % W;
        const int dst_slot = (w + r - 1) % W;
        chunks[static_cast<std::size_t>(w)][static_cast<std::size_t>(dst_slot)] =
            chunks[static_cast<std::size_t>(src)][static_cast<std::size_t>(w)];
        g.record({static_cast<double>(r), w, Stream::Copy, "copy", bytes(), r, dst_slot, src});
    }

    void phase3(int w) {
        for (int src = 0; src < W; ++src) {
            if (src == w) continue;
            const int r = (w - src + W) % W;
            const int slot = (w + r - 1) % W;
            sr_add(g, acc[static_cast<std::size_t>(w)],
                   chunks[static_cast<std::size_t>(w)][static_cast<std::size_t>(slot)], sr, src);
            g.record({static_cast<double>(W), w, Stream::Main, "reduce", bytes(), W, slot, src});
        }
    }

    std::uint64_t bytes() const { return acc[0].data.size() * sizeof(float); }
};

} // namespace

std::vector<Tensor> reduce_scatter_copy(WorkerGroup& g, std::vector<std::vector<Tensor>> chunks,
                                        std::vector<Tensor> acc, const SrSpec& sr, bool threaded,
                                        std::uint64_t lockstep_order_seed) {
    const int W = g.size();
    if (static_cast<int>(chunks.size()) != W || static_cast<int>(acc.size()) != W)
        throw std::invalid_argument("reduce_scatter: per-worker inputs expected");
    for (const auto& row : chunks)
        if (static_cast<int>(row.size()) != W)
            throw std::invalid_argument("reduce_scatter: chunk count must equal worker count");

    ReduceScatterState st{g, std::move(chunks), std::move(acc), sr, W};

    if (threaded) {
        g.run([&](int w) {
            st.phase1(w);
            g.barrier();
            g.mark_phase("phase1-done");
            for (int r = 1; r < W; ++r) {
                st.copy_round(r, w);
                g.barrier();
            }
            g.mark_phase("copies-done");
            st.phase3(w);
        });
    } else {
        auto order = [&](int phase) {
            std::vector<int> idx(static_cast<std::size_t>(W));
            for (int i = 0; i < W; ++i) idx[static_cast<std::size_t>(i)] = i;
            if (lockstep_order_seed != 0) {
                for (int i = W - 1; i > 0; --i) {
                    const auto j = static_cast<int>(
                        rng_uniform({lockstep_order_seed, static_cast<std::uint64_t>(phase),
                                     static_cast<std::uint64_t>(i)}) %
                        static_cast<std::uint32_t>(i + 1));
                    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
                }
            }
            return idx;
        };
        for (const int w : order(0)) st.phase1(w);
        g.mark_phase("phase1-done");
        for (int r = 1; r < W; ++r)
            for (const int w : order(r)) st.copy_round(r, w);
        g.mark_phase("copies-done");
        for (const int w : order(W)) st.phase3(w);
    }
    return std::move(st.acc);
}

std::vector<Tensor> reduce_scatter_oracle(const std::vector<std::vector<Tensor>>& chunks,
                                          std::vector<Tensor> acc, const SrSpec& sr) {
    const int W = static_cast<int>(chunks.size());
    for (int w = 0; w < W; ++w) {
        auto& a = acc[static_cast<std::size_t>(w)];
        auto add = [&](int src) {
            const auto& c = chunks[static_cast<std::size_t>(src)][static_cast<std::size_t>(w)];
            const std::uint64_t stream =
                fnv1a64("rs/" + std::to_string(sr.step) + "/" + std::to_string(sr.layer) + "/" +
                        std::to_string(src));
            for (std::size_t i = 0; i < a.data.size(); ++i) {
                const float sum = a.data[i] + c.data[i];
                a.data[i] = sr.stochastic ? stochastic_round_bf16(sum, {sr.seed, stream, i}) : sum;
            }
        };
        add(w); // own chunk first, then ascending sources
        for (int src = 0; src < W; ++src)
            if (src != w) add(src);
    }
    return acc;
}

// ---------------------------------------------------------------------------
// host weight cache
// ---------------------------------------------------------------------------

HostCacheReport host_weight_cache(int workers, int ga_steps, std::uint64_t weight_bytes_total) {
    if (workers < 1 || ga_steps < 1) throw std::invalid_argument("host_weight_cache: bad arguments");
    HostCacheReport rep;
    const int passes = 2 * ga_steps; // one forward + one backward per microbatch
    for (int p = 0; p < passes; ++p) {
        HostCacheReport::Pass pass;
        pass.index = p;
        pass.forward = (p % 2 == 0);
        if (p == 0) {
            // shards go worker -> host once per optimizer step
            pass.publish_bytes = weight_bytes_total;
        } else {
            pass.cache_read_bytes = weight_bytes_total;
            ++rep.cache_served_passes;
        }
        rep.total_publish_bytes += pass.publish_bytes;
        rep.passes.push_back(pass);
    }
    return rep;
}

void validate_cache_events(const HostCacheReport& report) {
    bool published = false;
    for (const auto& p : report.passes) {
        if (p.publish_bytes > 0) published = true;
        if (p.cache_read_bytes > 0 && !published)
            throw std::runtime_error("host cache read before first publish");
    }
}

std::uint64_t weight_shard_traffic(bool host_cache, int ga_steps, std::uint64_t weight_bytes) {
    if (host_cache) return weight_bytes; // one publish per optimizer step, GA-independent
    return 2ull * static_cast<std::uint64_t>(ga_steps) * weight_bytes; // re-upload per fwd and bwd pass
}

std::uint64_t grad_shard_traffic(int ga_steps, int workers, std::uint64_t grad_bytes,
                                 const Topology& topo) {
    if (workers < 2) return 0;
    const double per_step = static_cast<double>(ga_steps) *
                            (static_cast<double>(workers - 1) / workers) *
                            static_cast<double>(grad_bytes) * topo.link_traversals();
    return static_cast<std::uint64_t>(per_step);
}

// ---------------------------------------------------------------------------
// issue-queue model checker
// ---------------------------------------------------------------------------

namespace {

struct CheckerState {
    std::vector<int> pc;
    std::vector<int> barrier_wait;          // collective id being waited on, or -1
    std::vector<std::vector<int>> queues;   // -1 = compute, >= 0 = collective id
    std::vector<int> issued_count_by_id;    // indexed by collective id

    std::string key() const {
        std::string k;
        for (std::size_t w = 0; w < pc.size(); ++w) {
            k += std::to_string(pc[w]) + "|" + std::to_string(barrier_wait[w]) + "[";
            for (const int op : queues[w]) k += std::to_string(op) + ",";
            k += "]";
        }
        return k;
    }
};

} // namespace

DeadlockCheck check_issue_queue(const std::vector<std::vector<SchedOp>>& programs,
                                int pool_capacity, bool cpu_barrier, std::uint64_t max_states) {
    const int W = static_cast<int>(programs.size());
    int max_id = -1;
    for (const auto& prog : programs)
        for (const auto& op : prog)
            if (op.collective) max_id = std::max(max_id, op.id);

    CheckerState init;
    init.pc.assign(static_cast<std::size_t>(W), 0);
    init.barrier_wait.assign(static_cast<std::size_t>(W), -1);
    init.queues.resize(static_cast<std::size_t>(W));
    init.issued_count_by_id.assign(static_cast<std::size_t>(max_id + 1), 0);

    DeadlockCheck result;
    std::unordered_set<std::string> visited;
    std::vector<std::string> path;

    std::function<void(const CheckerState&)> dfs = [&](const CheckerState& s) {
        if (result.states_explored >= max_states) return;
        const std::string key = s.key();
        if (!visited.insert(key).second) return;
        ++result.states_explored;

        int pool_used = 0;
        for (const auto& q : s.queues) pool_used += static_cast<int>(q.size());

        bool finished = true;
        for (int w = 0; w < W; ++w)
            if (s.pc[static_cast<std::size_t>(w)] <
                    static_cast<int>(programs[static_cast<std::size_t>(w)].size()) ||
                !s.queues[static_cast<std::size_t>(w)].empty())
                finished = false;
        if (finished) return;

        bool any_action = false;

        // enqueue actions
        for (int w = 0; w < W; ++w) {
            const auto wu = static_cast<std::size_t>(w);
            if (s.pc[wu] >= static_cast<int>(programs[wu].size())) continue;
            if (s.barrier_wait[wu] >= 0) continue; // CPU-side sync: nothing submits
            if (pool_used >= pool_capacity) continue;
            any_action = true;
            if (result.deadlock_found && !result.witness.empty()) {
                // keep exploring for all_complete, but skip path bookkeeping
            }
            CheckerState nxt = s;
            const SchedOp op = programs[wu][static_cast<std::size_t>(s.pc[wu])];
            nxt.queues[wu].push_back(op.collective ? op.id : -1);
            nxt.pc[wu] += 1;
            if (op.collective) {
                nxt.issued_count_by_id[static_cast<std::size_t>(op.id)] += 1;
                if (cpu_barrier) {
                    nxt.barrier_wait[wu] = op.id;
                    if (nxt.issued_count_by_id[static_cast<std::size_t>(op.id)] == W) {
                        for (int x = 0; x < W; ++x)
                            if (nxt.barrier_wait[static_cast<std::size_t>(x)] == op.id)
                                nxt.barrier_wait[static_cast<std::size_t>(x)] = -1;
                    }
                }
            }
            path.push_back("enqueue w" + std::to_string(w) +
                           (op.collective ? " collective" + std::to_string(op.id) : " kernel"));
            dfs(nxt);
            path.pop_back();
        }

        // compute completions
        for (int w = 0; w < W; ++w) {
            const auto wu = static_cast<std::size_t>(w);
            if (s.queues[wu].empty() || s.queues[wu].front() != -1) continue;
            any_action = true;
            CheckerState nxt = s;
            nxt.queues[wu].erase(nxt.queues[wu].begin());
            path.push_back("complete w" + std::to_string(w) + " kernel");
            dfs(nxt);
            path.pop_back();
        }

        // collective completion: needs the same id at the front everywhere
        if (max_id >= 0) {
            bool all_front = true;
            int id = -2;
            for (int w = 0; w < W && all_front; ++w) {
                const auto& q = s.queues[static_cast<std::size_t>(w)];
                if (q.empty() || q.front() < 0) all_front = false;
                else if (id == -2) id = q.front();
                else if (q.front() != id) all_front = false;
            }
            if (all_front && id >= 0) {
                any_action = true;
                CheckerState nxt = s;
                for (int w = 0; w < W; ++w)
                    nxt.queues[static_cast<std::size_t>(w)].erase(
                        nxt.queues[static_cast<std::size_t>(w)].begin());
                path.push_back("complete collective" + std::to_string(id));
                dfs(nxt);
                path.pop_back();
            }
        }

        if (!any_action) {
            if (!result.deadlock_found) result.witness = path;
            result.deadlock_found = true;
        }
    };

    dfs(init);
    result.all_complete = !result.deadlock_found && result.states_explored < max_states;
    return result;
}

std::string trace_to_jsonl(const std::vector<TraceEvent>& trace) {
    std::ostringstream os;
    for (const auto& e : trace) {
        os << "{\"time\":" << e.time << ",\"worker\":" << e.worker << ",\"stream\":\""
           << (e.stream == Stream::Main ? "main" : "copy") << "\",\"op\":\"" << e.op
           << "\",\"bytes\":" << e.bytes << ",\"round\":" << e.round << ",\"chunk\":" << e.chunk
           << ",\"src\":" << e.src << "}\n";
    }
    return os.str();
}

} // namespace qtrain
