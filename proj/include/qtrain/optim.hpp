// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0
//
// AdamW with configurable moment precision (f32, or bf16 with stochastic
// rounding), bf16 master weights, a deterministic fixed-block gradient norm,
// and ZeRO-1 sharded stepping over the simulated worker group.

#pragma once

#include "qtrain/comms.hpp"
#include "qtrain/model.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <utility>

namespace qtrain {

struct AdamWHyper {
    float lr = 1e-3f;
    float beta1 = 0.9f; // repo defaults; the training recipes never pin these
    float beta2 = 0.95f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;
};

enum class MomentPrecision { F32, BF16_SR };

/// BF16_SR is the production mode (bf16 master weights, stochastically
/// rounded writes); F32 exists for oracle tests only.
enum class ParamPrecision { BF16_SR, F32 };

/// Storage bytes per parameter for both moment buffers together.
inline std::size_t moment_bytes_per_param(MomentPrecision p) {
    return p == MomentPrecision::F32 ? 8 : 4;
}

/// Mutable view over a set of named parameter tensors.
using NamedTensors = std::vector<std::pair<std::string, Tensor*>>;

NamedTensors named_params(ModelParams& p);

struct OptimState {
    AdamWHyper hyper;
    MomentPrecision moments = MomentPrecision::F32;
    ParamPrecision params = ParamPrecision::BF16_SR;
    std::uint64_t seed = 0;
    std::int64_t step_count = 0; // completed steps
    std::map<std::string, std::pair<Tensor, Tensor>> slots; // m, v

    void ensure_slots(const NamedTensors& p);
};

/// One AdamW update. The math always runs in f32 regardless of storage; every
/// write to a bf16 field goes through stochastic rounding with a key derived
/// from (param name, field, step, element index). Throws on non-finite
/// gradients.
void adamw_step(OptimState& st, const NamedTensors& params, const GradMap& grads,
                float grad_scale = 1.0f);

/// Deterministic global norm: per tensor in name order, f64 partial sums over
/// fixed 256-element blocks, combined in block order. Identical on every
/// worker and invariant to the shard count (shards are block-aligned).
double global_grad_norm(const GradMap& grads);

/// Partial of the same reduction over one aligned element range.
double grad_norm_block_partials(const Tensor& g, std::int64_t lo, std::int64_t hi);

/// min(1, max_norm/norm); max_norm <= 0 disables clipping.
float clip_scale(double norm, float max_norm);

/// ZeRO-1: each worker updates its contiguous aligned slice of every
/// shardable state, then full parameters are re-assembled with the copy
/// all-gather. Bitwise identical to adamw_step for any worker count.
void sharded_adamw_step(WorkerGroup& group, OptimState& st, const NamedTensors& params,
                        const GradMap& grads, float grad_scale = 1.0f, bool threaded = true);

} // namespace qtrain
