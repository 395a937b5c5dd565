// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0
//
// Byte and FLOP arithmetic. Stored-activation sites per transformer layer and
// token (bytes; fp8 mode stores the quantized copy of matmul inputs):
//
//   site      elems      fp8 mode   bf16 mode   dropped by
//   n1        d          1 B/el     2 B/el      rmsnorm, block
//   qkv       qkv_dim    2 B/el     2 B/el      qkv, block
//   att       d          1 B/el     2 B/el      attention, block
//   r_mid     d          2 B/el     2 B/el      block
//   n2        d          1 B/el     2 B/el      rmsnorm, block
//   gate_up   d_ff       2 B/el     2 B/el      ffn, block
//   h         d_ff/2     1 B/el     2 B/el      swiglu, ffn, block
//
// Block recompute keeps none of these (only the per-layer input residual) and
// pays one layer's full site set as transient working memory.

#include "qtrain/memplan.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace qtrain {

std::string OffloadSet::str() const {
    std::string out;
    auto add = [&](bool on, const char* n) {
        if (on) {
            if (!out.empty()) out += ",";
            out += n;
        }
    };
    add(x, "x");
    add(m, "m");
    add(v, "v");
    add(master, "master");
    add(weights, "weights");
    add(grads, "grads");
    return out.empty() ? "none" : out;
}

OffloadSet offload_set_from_names(std::span<const std::string> names) {
    OffloadSet s;
    for (const auto& n : names) {
        if (n == "x" || n == "residuals") s.x = true;
        else if (n == "m") s.m = true;
        else if (n == "v") s.v = true;
        else if (n == "master" || n == "theta*") s.master = true;
        else if (n == "weights" || n == "theta") s.weights = true;
        else if (n == "grads" || n == "g") s.grads = true;
        else if (n == "none" || n.empty()) continue;
        else throw std::invalid_argument("unknown offload category: " + n);
    }
    return s;
}

std::string RunPlan::str() const {
    std::ostringstream os;
    os << "mb=" << micro_batch << " ga=" << ga_steps << " recompute=" << recompute.str()
       << " offload=" << offload.str() << " shard_w=" << (shard_weights ? 1 : 0)
       << " shard_g=" << (shard_grads ? 1 : 0)
       << " prec=" << (precision.block_matmuls == MatmulPrecision::FP8_E4M3 ? "fp8" : "bf16")
       << " moments=" << (moments == MomentPrecision::F32 ? "f32" : "bf16");
    return os.str();
}

ParamCounts ParamCounts::from_config(const ModelConfig& cfg, bool tied_embeddings) {
    ParamCounts c;
    const auto d = static_cast<std::uint64_t>(cfg.d_model);
    const auto qkv = static_cast<std::uint64_t>(cfg.qkv_dim());
    const auto ff = static_cast<std::uint64_t>(cfg.d_ff);
    c.per_layer_linear = d * qkv + d * d + d * ff + (ff / 2) * d;
    c.block_linear = c.per_layer_linear * static_cast<std::uint64_t>(cfg.n_layers);
    c.lmhead = static_cast<std::uint64_t>(cfg.vocab) * d;
    c.embed = static_cast<std::uint64_t>(cfg.vocab) * d;
    c.norms = (2ull * static_cast<std::uint64_t>(cfg.n_layers) + 1) * d;
    c.total = c.block_linear + c.embed + c.norms + (tied_embeddings ? 0 : c.lmhead);
    return c;
}

ParamCounts ParamCounts::nominal(std::uint64_t total) {
    ParamCounts c;
    c.total = total;
    c.block_linear = total; // fixture: the whole budget behaves like block weights
    c.per_layer_linear = total;
    return c;
}

const std::vector<ModelPreset>& model_presets() {
    // public decoder shapes for the sizes the throughput tables use; seq_len
    // 1024 is the accounting fixture length
    static const std::vector<ModelPreset> presets = {
        {"toy", ModelConfig{2, 64, 256, 4, 2, 512, 128}, false},
        {"0.5b", ModelConfig{24, 896, 9728, 14, 2, 151936, 1024}, true},
        {"1.5b", ModelConfig{28, 1536, 17920, 12, 2, 151936, 1024}, true},
        {"3b", ModelConfig{36, 2048, 22016, 16, 2, 151936, 1024}, true},
        {"7b", ModelConfig{28, 3584, 37888, 28, 4, 152064, 1024}, false},
        {"14b", ModelConfig{48, 5120, 27648, 40, 8, 152064, 1024}, false},
        {"32b", ModelConfig{64, 5120, 55296, 40, 8, 152064, 1024}, false},
    };
    return presets;
}

const ModelPreset& preset_by_name(const std::string& name) {
    for (const auto& p : model_presets())
        if (p.name == name) return p;
    std::ostringstream os;
    os << "unknown model preset '" << name << "'; available:";
    for (const auto& p : model_presets()) os << " " << p.name;
    throw std::invalid_argument(os.str());
}

SizeSpec SizeSpec::from_config(const ModelConfig& cfg, int micro_batch, bool tied_embeddings) {
    SizeSpec s;
    s.counts = ParamCounts::from_config(cfg, tied_embeddings);
    s.n_layers = cfg.n_layers;
    s.d_model = cfg.d_model;
    s.qkv_dim = cfg.qkv_dim();
    s.d_ff = cfg.d_ff;
    s.vocab = cfg.vocab;
    s.n_heads = cfg.n_heads;
    s.seq = cfg.seq_len;
    s.tokens_in_flight = static_cast<std::int64_t>(micro_batch) * cfg.seq_len;
    return s;
}

namespace {

struct SiteBytes {
    std::uint64_t kept_per_token = 0;
    std::uint64_t transient_per_token = 0; // one layer's full set, paid at Block level
};

SiteBytes activation_sites(const SizeSpec& s, const RecomputeSet& rc, bool fp8) {
    const std::uint64_t d = static_cast<std::uint64_t>(s.d_model);
    const std::uint64_t one = fp8 ? 1 : 2;
    struct Site {
        std::uint64_t bytes;
        bool kept;
    };
    const bool block = rc.has(RecomputeSite::Block);
    const Site sites[] = {
        {d * one, !block && !rc.has(RecomputeSite::RMSNorm)},                               // n1
        {static_cast<std::uint64_t>(s.qkv_dim) * 2, !block && !rc.has(RecomputeSite::QKV)}, // qkv
        {d * one, !block && !rc.has(RecomputeSite::Attention)},                             // att
        {d * 2, !block},                                                                    // r_mid
        {d * one, !block && !rc.has(RecomputeSite::RMSNorm)},                               // n2
        {static_cast<std::uint64_t>(s.d_ff) * 2, !block && !rc.has(RecomputeSite::FFN)},    // gate_up
        {static_cast<std::uint64_t>(s.d_ff) / 2 * one,
         !block && !rc.has(RecomputeSite::FFN) && !rc.has(RecomputeSite::SwiGLU)}, // h
    };
    SiteBytes out;
    for (const auto& site : sites) {
        out.transient_per_token += site.bytes;
        if (site.kept) out.kept_per_token += site.bytes;
    }
    return out;
}

std::uint64_t div_workers(std::uint64_t bytes, int W) {
    return W > 1 ? bytes / static_cast<std::uint64_t>(W) : bytes;
}

} // namespace

MemoryBreakdown memory_breakdown_from_counts(const SizeSpec& s, const RunPlan& plan, int workers) {
    const bool fp8 = plan.precision.block_matmuls == MatmulPrecision::FP8_E4M3;
    const std::uint64_t moment_b = plan.moments == MomentPrecision::F32 ? 4 : 2;
    const std::uint64_t tokens = static_cast<std::uint64_t>(s.tokens_in_flight);
    const std::uint64_t nonblock = s.counts.total - s.counts.block_linear;
    MemoryBreakdown mb;

    // compute weights: fp8 blocks carry one f32 scale per weight tensor (4 per
    // layer forward + 4 transposed)
    const std::uint64_t scale_overhead = fp8 ? static_cast<std::uint64_t>(s.n_layers) * 8 * 4 : 0;
    const std::uint64_t block_weights =
        (fp8 ? s.counts.block_linear : 2 * s.counts.block_linear) + scale_overhead;
    const std::uint64_t nonblock_weights = nonblock * 2; // lm-head/embed/norms stay bf16, resident
    {
        const std::uint64_t sharded = plan.shard_weights ? div_workers(block_weights, workers)
                                                         : block_weights;
        auto& tier = plan.offload.weights ? mb.host : mb.device;
        auto& field = fp8 ? tier.params_fp8 : tier.params_bf16_master;
        field += sharded;
        if (plan.offload.weights) {
            // two layer-sized streaming buffers stay on device
            auto& dev_field = fp8 ? mb.device.params_fp8 : mb.device.params_bf16_master;
            dev_field += 2 * (fp8 ? s.counts.per_layer_linear : 2 * s.counts.per_layer_linear);
        }
        mb.device.params_bf16_master += nonblock_weights;
    }

    // bf16 master copies of the quantized block weights (fp8 mode only; in
    // bf16 mode the compute copy above *is* the master)
    if (fp8) {
        const std::uint64_t master = div_workers(2 * s.counts.block_linear, workers);
        (plan.offload.master ? mb.host : mb.device).params_bf16_master += master;
    }

    // optimizer moments, ZeRO-1 sharded whenever W > 1
    const std::uint64_t per_moment = div_workers(s.counts.total * moment_b, workers);
    (plan.offload.m ? mb.host : mb.device).moments_m += per_moment;
    (plan.offload.v ? mb.host : mb.device).moments_v += per_moment;

    // gradients accumulate in bf16; lm-head and embedding gradients are
    // replicated and never leave the device
    {
        std::uint64_t block_g = 2 * s.counts.block_linear;
        if (plan.shard_grads) block_g = div_workers(block_g, workers);
        (plan.offload.grads ? mb.host : mb.device).grads += block_g;
        if (plan.offload.grads) mb.device.grads += 2 * (2 * s.counts.per_layer_linear);
        mb.device.grads += nonblock * 2;
    }

    // residual stream: n_layers slices of (tokens, d_model) in bf16
    {
        const std::uint64_t resid =
            static_cast<std::uint64_t>(s.n_layers) * tokens * static_cast<std::uint64_t>(s.d_model) * 2;
        (plan.offload.x ? mb.host : mb.device).residuals += resid;
        if (plan.offload.x)
            mb.device.residuals += 2 * tokens * static_cast<std::uint64_t>(s.d_model) * 2;
    }

    // saved activations + the Block-recompute transient
    {
        const SiteBytes sites = activation_sites(s, plan.recompute, fp8);
        std::uint64_t act = sites.kept_per_token * tokens * static_cast<std::uint64_t>(s.n_layers);
        if (plan.recompute.has(RecomputeSite::Block)) act += sites.transient_per_token * tokens;
        mb.device.activations += act;
    }

    // chunked-op workspaces: f32 logits chunk (gradients written in place),
    // per-sequence attention scores
    {
        const std::int64_t ce_chunk =
            plan.lmhead_chunk_tokens > 0
                ? std::min<std::int64_t>(plan.lmhead_chunk_tokens, s.tokens_in_flight)
                : s.tokens_in_flight;
        mb.device.logits_workspace +=
            static_cast<std::uint64_t>(ce_chunk) * static_cast<std::uint64_t>(s.vocab) * 4;
        const std::int64_t rows =
            plan.attn_chunk_rows > 0 ? std::min<std::int64_t>(plan.attn_chunk_rows, s.seq) : s.seq;
        mb.device.attn_workspace += static_cast<std::uint64_t>(s.n_heads) *
                                    static_cast<std::uint64_t>(rows) *
                                    static_cast<std::uint64_t>(s.seq) * 4 * 2;
    }
    return mb;
}

MemoryBreakdown memory_breakdown(const ModelConfig& cfg, const RunPlan& plan, int workers,
                                 bool tied_embeddings) {
    return memory_breakdown_from_counts(SizeSpec::from_config(cfg, plan.micro_batch, tied_embeddings),
                                        plan, workers);
}

// ---------------------------------------------------------------------------
// FLOPs
// ---------------------------------------------------------------------------

FlopBreakdown flop_breakdown(const ModelConfig& cfg, const RecomputeSet& recompute,
                             bool tied_embeddings) {
    const auto counts = ParamCounts::from_config(cfg, tied_embeddings);
    FlopBreakdown fb;
    fb.linear = 6.0 * static_cast<double>(counts.block_linear);
    fb.lmhead = 6.0 * static_cast<double>(cfg.vocab) * cfg.d_model;
    // two matmuls x multiply-add x (fwd + 2 bwd), causal average context seq/2
    fb.attention = 12.0 * (static_cast<double>(cfg.seq_len) / 2.0) * cfg.d_model * cfg.n_layers;
    const double attn_fwd = fb.attention / 3.0;
    const double d = cfg.d_model;
    if (recompute.has(RecomputeSite::Block)) {
        fb.recompute = 2.0 * static_cast<double>(counts.block_linear) + attn_fwd;
    } else {
        if (recompute.has(RecomputeSite::QKV))
            fb.recompute += 2.0 * d * cfg.qkv_dim() * cfg.n_layers;
        if (recompute.has(RecomputeSite::FFN))
            fb.recompute += 2.0 * (d * cfg.d_ff + static_cast<double>(cfg.d_ff) / 2.0 * d) * cfg.n_layers;
        if (recompute.has(RecomputeSite::Attention)) fb.recompute += attn_fwd;
    }
    return fb;
}

std::vector<std::pair<std::string, double>> FlopBreakdown::by_precision(
    const PrecisionMap& prec, bool include_recompute) const {
    const double extra = include_recompute ? recompute : 0.0;
    if (prec.f32_debug) return {{"f32", total() + extra}};
    if (prec.block_matmuls == MatmulPrecision::FP8_E4M3)
        return {{"fp8", linear + extra}, {"bf16", lmhead + attention}};
    return {{"bf16", total() + extra}};
}

double lower_bound_seconds_per_token(const FlopBreakdown& fb, const PrecisionMap& prec,
                                     const HardwareProfile& hw, bool attainable,
                                     bool include_recompute) {
    double secs = 0.0;
    for (const auto& [precision, ops] : fb.by_precision(prec, include_recompute)) {
        const double peak = hw.peak(precision) * (attainable ? hw.attainable_fraction : 1.0);
        if (peak <= 0.0) throw std::invalid_argument("profile lacks a peak rate for " + precision);
        secs += ops / peak;
    }
    return secs;
}

double mfu(double measured_tps, const ModelConfig& cfg, const PrecisionMap& prec,
           const HardwareProfile& hw, bool tied_embeddings) {
    if (measured_tps <= 0.0) throw std::invalid_argument("mfu: measured_tps must be positive");
    return measured_tps * lower_bound_seconds_per_token(flop_breakdown(cfg, {}, tied_embeddings),
                                                        prec, hw, false, false);
}

namespace {

double ceiling_from_breakdown(const FlopBreakdown& fb, const HardwareProfile& hw) {
    const PrecisionMap bf{MatmulPrecision::BF16, GradPrecision::E4M3, false};
    const PrecisionMap f8{MatmulPrecision::FP8_E4M3, GradPrecision::E4M3, false};
    const double t_bf = lower_bound_seconds_per_token(fb, bf, hw, false, false);
    const double t_f8 = lower_bound_seconds_per_token(fb, f8, hw, false, false);
    return t_bf / t_f8 - 1.0;
}

} // namespace

double fp8_speedup_ceiling(const ModelConfig& cfg, const HardwareProfile& hw,
                           bool tied_embeddings) {
    return ceiling_from_breakdown(flop_breakdown(cfg, {}, tied_embeddings), hw);
}

// ---------------------------------------------------------------------------
// Step time
// ---------------------------------------------------------------------------

TimeBreakdown estimate_step_time(const ModelConfig& cfg, const RunPlan& plan,
                                 const HardwareProfile& hw, int workers, bool tied_embeddings) {
    const SizeSpec s = SizeSpec::from_config(cfg, plan.micro_batch, tied_embeddings);
    const bool fp8 = plan.precision.block_matmuls == MatmulPrecision::FP8_E4M3;
    const double tokens_mb = static_cast<double>(s.tokens_in_flight);
    const auto fb = flop_breakdown(cfg, plan.recompute, tied_embeddings);

    TimeBreakdown tb;
    tb.compute = tokens_mb * lower_bound_seconds_per_token(fb, plan.precision, hw, true, true);

    // per-microbatch offload/collective bytes (double-buffered transfers run
    // on the copy engine; the planner assumes the better of the two policies)
    const double eff = std::max(hw.zero_copy_efficiency, hw.double_buffer_efficiency);
    const double bw = hw.link_bandwidth * eff;
    const std::uint64_t block_w_bytes =
        fp8 ? s.counts.block_linear : 2 * s.counts.block_linear;
    const std::uint64_t block_g_bytes = 2 * s.counts.block_linear;
    const std::uint64_t resid_bytes =
        static_cast<std::uint64_t>(s.n_layers) * static_cast<std::uint64_t>(s.tokens_in_flight) *
        static_cast<std::uint64_t>(s.d_model) * 2;
    const Topology topo{hw.p2p, hw.link_bandwidth};

    double bytes_mb = 0.0;
    if (plan.offload.weights || plan.shard_weights) bytes_mb += 2.0 * static_cast<double>(block_w_bytes);
    if (plan.offload.x) bytes_mb += 2.0 * static_cast<double>(resid_bytes);
    if (plan.offload.grads) bytes_mb += static_cast<double>(block_g_bytes);
    if (plan.shard_grads && workers > 1)
        bytes_mb += static_cast<double>(grad_shard_traffic(1, workers, block_g_bytes, topo)) /
                    workers; // per-worker share rides this worker's link

    // optimizer-phase streaming (once per step, no compute to hide it)
    double opt_bytes = 0.0;
    const std::uint64_t moment_b = plan.moments == MomentPrecision::F32 ? 4 : 2;
    if (plan.offload.m) opt_bytes += 2.0 * static_cast<double>(s.counts.total * moment_b);
    if (plan.offload.v) opt_bytes += 2.0 * static_cast<double>(s.counts.total * moment_b);
    if (plan.offload.master && fp8) opt_bytes += 2.0 * static_cast<double>(2 * s.counts.total);
    opt_bytes /= workers; // ZeRO-1: each worker streams only its shard

    if ((bytes_mb > 0.0 || opt_bytes > 0.0) && bw <= 0.0) {
        tb.feasible_in_time = false;
        tb.total = std::numeric_limits<double>::infinity();
        return tb;
    }

    const double transfer_mb = bw > 0.0 ? bytes_mb / bw : 0.0;
    const double fill = transfer_mb / static_cast<double>(s.n_layers); // first prefetch
    const double exposed_mb = std::max(0.0, transfer_mb - tb.compute) + fill;
    tb.transfer = plan.ga_steps * transfer_mb;
    tb.exposed_transfer = plan.ga_steps * exposed_mb;
    tb.optimizer = bw > 0.0 ? opt_bytes / bw : 0.0;

    // replicated lm-head/embedding gradients synchronize once per step; the
    // embedding side cannot overlap (the global norm needs it immediately)
    double sync = 0.0;
    if (workers > 1) {
        const std::uint64_t rep_bytes = (s.counts.lmhead + s.counts.embed) * 2;
        sync = static_cast<double>(rep_bytes) * topo.link_traversals() / hw.link_bandwidth;
    }

    const double per_mb = tb.compute + exposed_mb;
    tb.compute = plan.ga_steps * tb.compute;
    tb.total = plan.ga_steps * per_mb + tb.optimizer + sync;
    tb.tokens_per_second =
        static_cast<double>(plan.ga_steps) * tokens_mb * workers / tb.total;
    return tb;
}

// ---------------------------------------------------------------------------
// Search
// ---------------------------------------------------------------------------

namespace {

std::vector<OffloadSet> offload_chain(bool fp8, bool exhaustive) {
    std::vector<OffloadSet> out;
    if (exhaustive) {
        for (int bits = 0; bits < 64; ++bits) {
            OffloadSet o;
            o.x = bits & 1;
            o.m = bits & 2;
            o.v = bits & 4;
            o.master = bits & 8;
            o.weights = bits & 16;
            o.grads = bits & 32;
            if (!fp8 && o.master) continue; // bf16 has one weight copy; offload it via `weights`
            out.push_back(o);
        }
        return out;
    }
    // the dependency ladder observed in practice: moments first, then master,
    // weights, residuals, gradients
    auto add = [&](bool x, bool m, bool v, bool master, bool w, bool g) {
        OffloadSet o{x, m, v, master && fp8, w, g};
        if (std::find(out.begin(), out.end(), o) == out.end()) out.push_back(o);
    };
    add(false, false, false, false, false, false);
    add(true, false, false, false, false, false);
    add(false, true, true, false, false, false);
    add(true, true, true, false, false, false);
    add(false, true, true, true, false, false);
    add(true, true, true, true, false, false);
    add(false, true, true, true, true, false);
    add(true, true, true, true, true, false);
    add(true, true, true, true, true, true);
    return out;
}

const std::vector<RecomputeSet>& recompute_ladder() {
    static const std::vector<RecomputeSet> ladder = {
        RecomputeSet::none(),
        RecomputeSet::of({RecomputeSite::SwiGLU}),
        RecomputeSet::of({RecomputeSite::FFN, RecomputeSite::Attention}),
        RecomputeSet::of({RecomputeSite::QKV, RecomputeSite::FFN}),
        RecomputeSet::block(),
    };
    return ladder;
}

std::string binding_category(const MemoryBreakdown::Tier& t) {
    const std::pair<const char*, std::uint64_t> cats[] = {
        {"params", t.params_fp8 + t.params_bf16_master},
        {"moments", t.moments_m + t.moments_v},
        {"grads", t.grads},
        {"residuals", t.residuals},
        {"activations", t.activations},
        {"logits workspace", t.logits_workspace},
        {"attention workspace", t.attn_workspace},
    };
    const auto* best = &cats[0];
    for (const auto& c : cats)
        if (c.second > best->second) best = &c;
    return best->first;
}

} // namespace

SearchResult search_plan(const ModelConfig& cfg, const HardwareProfile& hw, int workers,
                         std::int64_t target_batch_tokens, MatmulPrecision dtype, bool exhaustive,
                         bool tied_embeddings) {
    const bool fp8 = dtype == MatmulPrecision::FP8_E4M3;
    const std::vector<int> batches = {1, 2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64};
    std::vector<std::pair<bool, bool>> shard_opts = {{false, false}};
    if (workers > 1) {
        shard_opts = {{false, false}, {true, false}, {true, true}};
        if (exhaustive) shard_opts.emplace_back(false, true); // discouraged order, still legal
    }
    std::vector<MomentPrecision> moment_opts = {MomentPrecision::BF16_SR};
    if (exhaustive) moment_opts.push_back(MomentPrecision::F32);

    SearchResult res;
    for (const int mb : batches) {
        const std::int64_t tokens_step =
            static_cast<std::int64_t>(mb) * cfg.seq_len * workers;
        if (tokens_step > target_batch_tokens && mb != 1) continue;
        const int ga = static_cast<int>(
            std::max<std::int64_t>(1, (target_batch_tokens + tokens_step - 1) / tokens_step));
        for (const auto& rc : recompute_ladder()) {
            for (const auto& off : offload_chain(fp8, exhaustive)) {
                for (const auto& [sw, sg] : shard_opts) {
                    for (const auto mp : moment_opts) {
                        RunPlan plan;
                        plan.micro_batch = mb;
                        plan.ga_steps = ga;
                        plan.recompute = rc;
                        plan.offload = off;
                        plan.shard_weights = sw;
                        plan.shard_grads = sg;
                        plan.precision.block_matmuls = dtype;
                        plan.moments = mp;
                        PlanVerdict v;
                        v.plan = plan;
                        v.memory = memory_breakdown(cfg, plan, workers, tied_embeddings);
                        const bool dev_ok = v.memory.device.total() <= hw.device_bytes;
                        const bool host_ok = v.memory.host.total() <= hw.host_bytes;
                        v.feasible = dev_ok && host_ok;
                        if (!v.feasible) {
                            v.infeasible_reason = !dev_ok
                                                      ? "device: " + binding_category(v.memory.device)
                                                      : "host: " + binding_category(v.memory.host);
                            continue;
                        }
                        v.time = estimate_step_time(cfg, plan, hw, workers, tied_embeddings);
                        if (v.time.feasible_in_time) res.feasible.push_back(std::move(v));
                    }
                }
            }
        }
    }
    std::sort(res.feasible.begin(), res.feasible.end(), [](const PlanVerdict& a, const PlanVerdict& b) {
        if (a.time.tokens_per_second != b.time.tokens_per_second)
            return a.time.tokens_per_second > b.time.tokens_per_second;
        return a.plan.str() < b.plan.str(); // deterministic ties
    });
    if (res.feasible.empty()) {
        // most aggressive plan shows the binding constraint
        RunPlan min_plan;
        min_plan.micro_batch = 1;
        min_plan.ga_steps = 1;
        min_plan.recompute = RecomputeSet::block();
        min_plan.offload = OffloadSet::full();
        if (!fp8) min_plan.offload.master = false;
        min_plan.shard_weights = workers > 1;
        min_plan.shard_grads = workers > 1;
        min_plan.precision.block_matmuls = dtype;
        const auto mbd = memory_breakdown(cfg, min_plan, workers, tied_embeddings);
        std::ostringstream os;
        os << "model does not fit: ";
        if (mbd.device.total() > hw.device_bytes)
            os << "device needs " << mbd.device.total() / 1e9 << " GB (" << hw.device_bytes / 1e9
               << " GB available), binding: " << binding_category(mbd.device);
        else
            os << "host needs " << mbd.host.total() / 1e9 << " GB (" << hw.host_bytes / 1e9
               << " GB available), binding: " << binding_category(mbd.host);
        res.no_fit_reason = os.str();
    }
    return res;
}

} // namespace qtrain
