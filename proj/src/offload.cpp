// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0

#include "qtrain/offload.hpp"

#include <algorithm>
#include <sstream>

namespace qtrain {

namespace {

struct Sim {
    std::vector<ResidencyEvent> events;
    std::uint64_t resident = 0; // device bytes that come and go with the schedule
    std::uint64_t hw_total = 0;
    std::uint64_t cat_weights = 0, hw_weights = 0;
    std::uint64_t cat_grads = 0, hw_grads = 0;
    std::uint64_t cat_resid = 0, hw_resid = 0;
    double clock = 0.0;

    void emit(ResidencyEvent::Kind kind, const std::string& cat, int layer, int buffer,
              std::uint64_t bytes, std::int64_t delta) {
        resident = static_cast<std::uint64_t>(static_cast<std::int64_t>(resident) + delta);
        auto bump = [&](std::uint64_t& cur, std::uint64_t& high) {
            cur = static_cast<std::uint64_t>(static_cast<std::int64_t>(cur) + delta);
            high = std::max(high, cur);
        };
        if (cat == "weights") bump(cat_weights, hw_weights);
        if (cat == "grads") bump(cat_grads, hw_grads);
        if (cat == "residuals") bump(cat_resid, hw_resid);
        hw_total = std::max(hw_total, resident);
        events.push_back({clock, kind, cat, layer, buffer, bytes, resident});
        clock += 1.0;
    }
};

} // namespace

ResidencySchedule plan_residency(const ModelConfig& cfg, const RunPlan& plan,
                                 const TierBudget& budget, bool tied_embeddings) {
    const SizeSpec s = SizeSpec::from_config(cfg, plan.micro_batch, tied_embeddings);
    const bool fp8 = plan.precision.block_matmuls == MatmulPrecision::FP8_E4M3;
    const std::uint64_t layer_w = fp8 ? s.counts.per_layer_linear : 2 * s.counts.per_layer_linear;
    const std::uint64_t layer_g = 2 * s.counts.per_layer_linear;
    const std::uint64_t layer_x =
        static_cast<std::uint64_t>(s.tokens_in_flight) * static_cast<std::uint64_t>(s.d_model) * 2;
    const std::uint64_t moment_b = plan.moments == MomentPrecision::F32 ? 4 : 2;
    const int L = cfg.n_layers;

    // everything that sits on the device for the whole step, independent of
    // the layer walk (the breakdown arithmetic supplies it)
    const MemoryBreakdown mb = memory_breakdown_from_counts(s, plan, 1);
    std::uint64_t static_bytes = mb.device.total();
    if (plan.offload.weights) static_bytes -= 2 * layer_w; // scheduled below, buffer by buffer
    if (plan.offload.grads) static_bytes -= 2 * layer_g;
    if (plan.offload.x) static_bytes -= 2 * layer_x;
    if (plan.recompute.has(RecomputeSite::Block)) {
        // the transient is per-active-layer; the walk re-adds it
        const std::uint64_t transient =
            mb.device.activations; // Block keeps nothing else in this category
        static_bytes -= transient;
    }

    Sim sim;
    sim.resident = static_bytes;
    sim.hw_total = static_bytes;

    const std::uint64_t transient_act =
        plan.recompute.has(RecomputeSite::Block) ? mb.device.activations : 0;

    // forward walk: prefetch weights one layer ahead, evict residuals as they
    // are produced
    if (plan.offload.weights) sim.emit(ResidencyEvent::Kind::Prefetch, "weights", 0, 0, layer_w, layer_w);
    for (int l = 0; l < L; ++l) {
        if (plan.offload.weights && l + 1 < L)
            sim.emit(ResidencyEvent::Kind::Prefetch, "weights", l + 1, (l + 1) % 2, layer_w, layer_w);
        if (transient_act) sim.emit(ResidencyEvent::Kind::Compute, "activations", l, -1, 0, transient_act);
        sim.emit(ResidencyEvent::Kind::Compute, "forward", l, l % 2, 0, 0);
        if (transient_act)
            sim.emit(ResidencyEvent::Kind::Compute, "activations", l, -1, 0,
                     -static_cast<std::int64_t>(transient_act));
        if (plan.offload.weights)
            sim.emit(ResidencyEvent::Kind::Evict, "weights", l, l % 2, layer_w,
                     -static_cast<std::int64_t>(layer_w));
        if (plan.offload.x) {
            sim.emit(ResidencyEvent::Kind::Compute, "residuals", l, -1, 0, layer_x);
            sim.emit(ResidencyEvent::Kind::Evict, "residuals", l, -1, layer_x,
                     -static_cast<std::int64_t>(layer_x));
        }
    }

    // backward walk: weights and residuals stream back in, gradient buffers
    // flush layer by layer
    if (plan.offload.weights)
        sim.emit(ResidencyEvent::Kind::Prefetch, "weights", L - 1, (L - 1) % 2, layer_w, layer_w);
    if (plan.offload.x)
        sim.emit(ResidencyEvent::Kind::Prefetch, "residuals", L - 1, -1, layer_x, layer_x);
    int flushing_grad_layer = -1; // the previous layer's buffer drains while this one computes
    for (int l = L - 1; l >= 0; --l) {
        if (plan.offload.weights && l > 0)
            sim.emit(ResidencyEvent::Kind::Prefetch, "weights", l - 1, (l - 1) % 2, layer_w, layer_w);
        if (plan.offload.x && l > 0)
            sim.emit(ResidencyEvent::Kind::Prefetch, "residuals", l - 1, -1, layer_x, layer_x);
        if (plan.offload.grads)
            sim.emit(ResidencyEvent::Kind::Compute, "grads", l, l % 2, 0, layer_g);
        if (transient_act) sim.emit(ResidencyEvent::Kind::Compute, "activations", l, -1, 0, transient_act);
        sim.emit(ResidencyEvent::Kind::Compute, "backward", l, l % 2, 0, 0);
        if (transient_act)
            sim.emit(ResidencyEvent::Kind::Compute, "activations", l, -1, 0,
                     -static_cast<std::int64_t>(transient_act));
        if (plan.offload.weights)
            sim.emit(ResidencyEvent::Kind::Evict, "weights", l, l % 2, layer_w,
                     -static_cast<std::int64_t>(layer_w));
        if (plan.offload.x)
            sim.emit(ResidencyEvent::Kind::Evict, "residuals", l, -1, layer_x,
                     -static_cast<std::int64_t>(layer_x));
        if (plan.offload.grads) {
            if (flushing_grad_layer >= 0)
                sim.emit(ResidencyEvent::Kind::Evict, "grads", flushing_grad_layer,
                         flushing_grad_layer % 2, layer_g, -static_cast<std::int64_t>(layer_g));
            flushing_grad_layer = l; // drains behind the next layer's backward
        }
    }
    if (plan.offload.grads && flushing_grad_layer >= 0)
        sim.emit(ResidencyEvent::Kind::Evict, "grads", flushing_grad_layer, flushing_grad_layer % 2,
                 layer_g, -static_cast<std::int64_t>(layer_g));

    // optimizer phase: offloaded states stream through in layer chunks
    if (plan.offload.m || plan.offload.v || plan.offload.master) {
        std::uint64_t chunk = 0;
        if (plan.offload.m) chunk += s.counts.per_layer_linear * moment_b;
        if (plan.offload.v) chunk += s.counts.per_layer_linear * moment_b;
        if (plan.offload.master && fp8) chunk += 2 * s.counts.per_layer_linear;
        for (int l = 0; l < L; ++l) {
            sim.emit(ResidencyEvent::Kind::Prefetch, "moments", l, l % 2, chunk, chunk);
            sim.emit(ResidencyEvent::Kind::Compute, "optimizer", l, l % 2, 0, 0);
            sim.emit(ResidencyEvent::Kind::Publish, "moments", l, l % 2, chunk,
                     -static_cast<std::int64_t>(chunk));
        }
    }

    ResidencySchedule out;
    out.events = std::move(sim.events);
    out.high_water_device = sim.hw_total;
    out.high_water_by_category_weights = sim.hw_weights;
    out.high_water_by_category_grads = sim.hw_grads;
    out.high_water_by_category_residuals = sim.hw_resid;
    out.feasible = sim.hw_total <= budget.device_bytes;
    if (!out.feasible) {
        std::ostringstream os;
        os << "device high-water " << sim.hw_total / 1e9 << " GB exceeds budget "
           << budget.device_bytes / 1e9 << " GB";
        out.report = os.str();
    }
    return out;
}

std::string ResidencySchedule::to_jsonl() const {
    std::ostringstream os;
    for (const auto& e : events) {
        const char* kind = e.kind == ResidencyEvent::Kind::Prefetch ? "prefetch"
                           : e.kind == ResidencyEvent::Kind::Evict  ? "evict"
                           : e.kind == ResidencyEvent::Kind::Publish ? "publish"
                                                                     : "compute";
        os << "{\"time\":" << e.time << ",\"kind\":\"" << kind << "\",\"category\":\"" << e.category
           << "\",\"layer\":" << e.layer << ",\"buffer\":" << e.buffer << ",\"bytes\":" << e.bytes
           << ",\"resident\":" << e.device_resident_after << "}\n";
    }
    return os.str();
}

double transfer_time(std::uint64_t bytes, const HardwareProfile& hw, TransferPolicy policy) {
    if (hw.link_bandwidth <= 0.0) throw std::invalid_argument("transfer_time: zero link bandwidth");
    const double eff = policy == TransferPolicy::ZeroCopy ? hw.zero_copy_efficiency
                                                          : hw.double_buffer_efficiency;
    return kTransferLatencySeconds + static_cast<double>(bytes) / (hw.link_bandwidth * eff);
}

} // namespace qtrain
