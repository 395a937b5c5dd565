// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0
//
// Two-tier residency planning: per-tensor-class placement, the double-buffered
// prefetch/evict schedule over the layer-by-layer walk, and the transfer-time
// model with the zero-copy vs double-buffer policy switch.
//
// The host tier is modeled, not physically separate, so offloading never
// changes numerical results, only the schedule.

#pragma once

#include "qtrain/memplan.hpp"
#include "qtrain/profiles.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace qtrain {

struct ResidencyEvent {
    double time = 0.0; // logical order index
    enum class Kind { Prefetch, Evict, Compute, Publish } kind;
    std::string category; // "weights", "grads", "residuals", "moments", ...
    int layer = -1;
    int buffer = -1; // 0/1 for the A/B double buffers
    std::uint64_t bytes = 0;
    std::uint64_t device_resident_after = 0;
};

struct ResidencySchedule {
    std::vector<ResidencyEvent> events;
    std::uint64_t high_water_device = 0;
    std::uint64_t high_water_by_category_weights = 0;
    std::uint64_t high_water_by_category_grads = 0;
    std::uint64_t high_water_by_category_residuals = 0;
    bool feasible = true;
    std::string report; // why not, when infeasible

    std::string to_jsonl() const;
};

/// Walk one microbatch (forward then backward) plus the optimizer phase and
/// schedule every transfer the offload set implies. Prefetches are issued one
/// layer ahead; offloaded weights/grads alternate between two layer-sized
/// buffers. Infeasibility (high-water above the budget) is reported, not
/// thrown.
ResidencySchedule plan_residency(const ModelConfig& cfg, const RunPlan& plan,
                                 const TierBudget& budget, bool tied_embeddings = false);

/// bytes/bandwidth plus a fixed per-transfer latency; the policy applies the
/// profile's efficiency factor (zero-copy collapses on consumer boards,
/// double-buffering keeps the link busy).
double transfer_time(std::uint64_t bytes, const HardwareProfile& hw, TransferPolicy policy);

inline constexpr double kTransferLatencySeconds = 20e-6;

} // namespace qtrain
