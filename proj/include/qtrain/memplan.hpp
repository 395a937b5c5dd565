// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0
//
// Analytical planner: memory breakdown, per-precision FLOP accounting,
// step-time lower bounds, MFU, the FP8 speed-up ceiling, and exhaustive
// configuration search.
//
// Conventions (also in the README): GB means 1e9 bytes everywhere in reports;
// device capacities are physical bytes. Activation bytes follow the stored-
// site table in memplan.cpp; the sequence length is a fixture input (1024 by
// default) since throughput tables fix tokens per step, not shapes.

#pragma once

#include "qtrain/model.hpp"
#include "qtrain/optim.hpp"
#include "qtrain/profiles.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace qtrain {

// ---------------------------------------------------------------------------
// Plan types
// ---------------------------------------------------------------------------

/// What lives in host memory: x = residuals, m/v = optimizer moments,
/// master = bf16 master params, weights = quantized compute weights,
/// grads = gradient buffers. LM-head and embeddings never offload.
struct OffloadSet {
    bool x = false, m = false, v = false, master = false, weights = false, grads = false;

    static OffloadSet none() { return {}; }
    static OffloadSet full() { return {true, true, true, true, true, true}; }
    bool any() const { return x || m || v || master || weights || grads; }
    std::string str() const;
    bool operator==(const OffloadSet&) const = default;
};

OffloadSet offload_set_from_names(std::span<const std::string> names);

enum class TransferPolicy { ZeroCopy, DoubleBuffer };

struct TierBudget {
    std::uint64_t device_bytes = 0;
    std::uint64_t host_bytes = 0;
    TransferPolicy transfer_policy = TransferPolicy::DoubleBuffer;
};

struct RunPlan {
    int micro_batch = 1;
    int ga_steps = 1;
    RecomputeSet recompute;
    OffloadSet offload;
    bool shard_weights = false;
    bool shard_grads = false; // enable sharded weights first (host cache makes them cheaper)
    PrecisionMap precision;
    MomentPrecision moments = MomentPrecision::BF16_SR;
    std::int64_t lmhead_chunk_tokens = 512; // 0 = unchunked
    std::int64_t attn_chunk_rows = 256;     // 0 = unchunked

    std::string str() const;
};

// ---------------------------------------------------------------------------
// Sizes
// ---------------------------------------------------------------------------

struct ParamCounts {
    std::uint64_t total = 0;
    std::uint64_t block_linear = 0; // matmul params inside transformer blocks
    std::uint64_t per_layer_linear = 0;
    std::uint64_t lmhead = 0;
    std::uint64_t embed = 0;
    std::uint64_t norms = 0;

    static ParamCounts from_config(const ModelConfig& cfg, bool tied_embeddings = false);
    /// Fixture constructor for paper-style round arithmetic (e.g. "a 7B
    /// model" meaning 7e9 parameters).
    static ParamCounts nominal(std::uint64_t total);
};

/// Named model presets with public decoder dimensions (Qwen2.5-class shapes).
struct ModelPreset {
    std::string name;
    ModelConfig cfg;
    bool tied_embeddings = false;
};
const std::vector<ModelPreset>& model_presets();
const ModelPreset& preset_by_name(const std::string& name);

// ---------------------------------------------------------------------------
// Memory breakdown
// ---------------------------------------------------------------------------

struct MemoryBreakdown {
    struct Tier {
        std::uint64_t params_fp8 = 0;
        std::uint64_t params_bf16_master = 0;
        std::uint64_t moments_m = 0;
        std::uint64_t moments_v = 0;
        std::uint64_t grads = 0;
        std::uint64_t residuals = 0;
        std::uint64_t activations = 0;
        std::uint64_t logits_workspace = 0;
        std::uint64_t attn_workspace = 0;

        std::uint64_t total() const {
            return params_fp8 + params_bf16_master + moments_m + moments_v + grads + residuals +
                   activations + logits_workspace + attn_workspace;
        }
    };
    Tier device, host;
};

/// Geometry + counts feeding the byte arithmetic. from_config derives both
/// from real dimensions; fixtures may combine nominal counts with explicit
/// geometry (the paper's round numbers).
struct SizeSpec {
    ParamCounts counts;
    std::int64_t n_layers = 0;
    std::int64_t d_model = 0;
    std::int64_t qkv_dim = 0;
    std::int64_t d_ff = 0;
    std::int64_t vocab = 0;
    std::int64_t n_heads = 1;
    std::int64_t seq = 1024;
    std::int64_t tokens_in_flight = 0; // micro_batch * seq

    static SizeSpec from_config(const ModelConfig& cfg, int micro_batch, bool tied_embeddings);
};

/// Per-worker breakdown for one plan. Sharded categories divide by W
/// (optimizer state always under ZeRO-1; weights/gradients per the plan's
/// flags, transformer blocks only).
MemoryBreakdown memory_breakdown(const ModelConfig& cfg, const RunPlan& plan, int workers,
                                 bool tied_embeddings = false);

/// The same arithmetic over explicit counts and geometry.
MemoryBreakdown memory_breakdown_from_counts(const SizeSpec& spec, const RunPlan& plan,
                                             int workers);

// ---------------------------------------------------------------------------
// FLOPs
// ---------------------------------------------------------------------------

struct FlopBreakdown {
    // per token, forward+backward (2 + 4 ops per matmul parameter)
    double linear = 0.0;    // block matmuls (fp8-eligible)
    double lmhead = 0.0;    // always bf16
    double attention = 0.0; // always bf16; causal average context = seq/2
    double recompute = 0.0; // extra forward flops implied by the recompute set

    /// ops per precision bucket under the given precision map
    std::vector<std::pair<std::string, double>> by_precision(const PrecisionMap& prec,
                                                             bool include_recompute = false) const;
    double total() const { return linear + lmhead + attention; }
};

FlopBreakdown flop_breakdown(const ModelConfig& cfg, const RecomputeSet& recompute = {},
                             bool tied_embeddings = false);

/// Precision-aware lower bound on seconds per token.
double lower_bound_seconds_per_token(const FlopBreakdown& fb, const PrecisionMap& prec,
                                     const HardwareProfile& hw, bool attainable = false,
                                     bool include_recompute = false);

/// MFU = lower-bound step time / measured step time, from measured tokens/s.
double mfu(double measured_tps, const ModelConfig& cfg, const PrecisionMap& prec,
           const HardwareProfile& hw, bool tied_embeddings = false);

/// Best-case FP8-over-BF16 speed-up with LM-head and attention pinned to
/// BF16 in both scenarios: T_bf16/T_fp8 - 1.
double fp8_speedup_ceiling(const ModelConfig& cfg, const HardwareProfile& hw,
                           bool tied_embeddings = false);

// ---------------------------------------------------------------------------
// Step time
// ---------------------------------------------------------------------------

struct TimeBreakdown {
    double compute = 0.0;          // seconds per optimizer step
    double transfer = 0.0;         // total offload+collective bytes / bandwidth
    double exposed_transfer = 0.0; // the part overlap cannot hide
    double optimizer = 0.0;        // optimizer-phase streaming
    double total = 0.0;
    bool feasible_in_time = true; // false on zero-bandwidth style degenerate inputs
    double tokens_per_second = 0.0;
};

TimeBreakdown estimate_step_time(const ModelConfig& cfg, const RunPlan& plan,
                                 const HardwareProfile& hw, int workers,
                                 bool tied_embeddings = false);

// ---------------------------------------------------------------------------
// Plan search
// ---------------------------------------------------------------------------

struct PlanVerdict {
    RunPlan plan;
    bool feasible = false;
    MemoryBreakdown memory;
    TimeBreakdown time;
    std::string infeasible_reason; // binding constraint when not feasible
};

struct SearchResult {
    std::vector<PlanVerdict> feasible; // sorted by estimated TPS, deterministic ties
    std::optional<std::string> no_fit_reason;
};

/// Enumerates micro-batch sizes, the recompute ladder and the offload chain
/// (every subset in exhaustive mode) and ranks memory-feasible plans by
/// estimated throughput. target_batch_tokens fixes tokens per optimizer step.
SearchResult search_plan(const ModelConfig& cfg, const HardwareProfile& hw, int workers,
                         std::int64_t target_batch_tokens, MatmulPrecision dtype,
                         bool exhaustive = false, bool tied_embeddings = false);

} // namespace qtrain
