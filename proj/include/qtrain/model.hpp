// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only transformer (rmsnorm -> attention -> rmsnorm -> SwiGLU FFN,
// rotary positions, untied LM-head) wired through the FP8/BF16 precision map,
// with selective recomputation driven by cached forward statistics.

#pragma once

#include "qtrain/numerics.hpp"
#include "qtrain/tensor.hpp"
#include "qtrain/tensorops.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace qtrain {

struct ModelConfig {
    int n_layers = 2;
    int d_model = 64;
    int d_ff = 256; // fused gate|up width; the FFN hidden dim is d_ff/2
    int n_heads = 4;
    int n_kv_heads = 2;
    std::int64_t vocab = 512;
    int seq_len = 128;

    int head_dim() const { return d_model / n_heads; }
    int qkv_dim() const { return d_model + 2 * n_kv_heads * head_dim(); }
    void validate() const;

    /// Small enough for finite-difference oracles, big enough to train.
    static ModelConfig toy() { return ModelConfig{}; }
};

enum class MatmulPrecision { FP8_E4M3, BF16 };
enum class GradPrecision { E4M3, E5M2 };

/// LM-head, attention and gradient accumulation are pinned to BF16 by
/// construction; only the block matmuls and the activation-gradient fp8 kind
/// are configurable. f32_debug disables every rounding point (oracle mode).
struct PrecisionMap {
    MatmulPrecision block_matmuls = MatmulPrecision::FP8_E4M3;
    GradPrecision backward_grads = GradPrecision::E4M3;
    bool f32_debug = false;

    bool fp8() const { return block_matmuls == MatmulPrecision::FP8_E4M3 && !f32_debug; }
    OutRound rounding() const { return f32_debug ? OutRound::None : OutRound::Bf16; }
    F8Kind grad_kind() const {
        return backward_grads == GradPrecision::E4M3 ? F8Kind::E4M3 : F8Kind::E5M2;
    }
};

enum class RecomputeSite : std::uint8_t { SwiGLU, RMSNorm, Attention, QKV, FFN, Block };

/// Which forward tensors are dropped and recomputed during backward. Block
/// subsumes everything (only the per-block input residual is kept).
struct RecomputeSet {
    std::uint8_t bits = 0;

    static RecomputeSet none() { return {}; }
    static RecomputeSet of(std::initializer_list<RecomputeSite> sites) {
        RecomputeSet s;
        for (const auto site : sites) s.bits |= static_cast<std::uint8_t>(1u << static_cast<int>(site));
        return s;
    }
    static RecomputeSet block() { return of({RecomputeSite::Block}); }

    bool has(RecomputeSite site) const {
        if (bits & (1u << static_cast<int>(RecomputeSite::Block))) return true;
        return bits & (1u << static_cast<int>(site));
    }
    bool empty() const { return bits == 0; }
    std::string str() const;
};

RecomputeSet recompute_set_from_names(std::span<const std::string> names);

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct LayerParams {
    Tensor ln1_g;     // (d)
    Tensor w_qkv;     // (qkv_dim, d)
    Tensor w_o;       // (d, d)
    Tensor ln2_g;     // (d)
    Tensor w_gate_up; // (d_ff, d)
    Tensor w_down;    // (d, d_ff/2)
};

struct ModelParams {
    Tensor embed; // (vocab, d)
    std::vector<LayerParams> layers;
    Tensor final_g; // (d)
    Tensor lm_head; // (vocab, d), untied, replicated across workers (never sharded)

    std::int64_t total_elems() const;
};

/// Deterministic iteration in checkpoint/optimizer order.
template <typename F>
void for_each_param(ModelParams& p, F&& fn) {
    fn("embed", p.embed);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const std::string pre = "layers." + std::to_string(l) + ".";
        fn(pre + "ln1_g", p.layers[l].ln1_g);
        fn(pre + "w_qkv", p.layers[l].w_qkv);
        fn(pre + "w_o", p.layers[l].w_o);
        fn(pre + "ln2_g", p.layers[l].ln2_g);
        fn(pre + "w_gate_up", p.layers[l].w_gate_up);
        fn(pre + "w_down", p.layers[l].w_down);
    }
    fn("final_g", p.final_g);
    fn("lm_head", p.lm_head);
}

/// Scaled-normal init (std = d_model^-1/2 for all projection matrices and
/// embeddings, gammas = 1), on the bf16 grid, fully determined by the seed.
ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Per-step context and saved state
// ---------------------------------------------------------------------------

/// FP8 weights are quantized once per optimizer step (forward layout and the
/// transposed layout the TN-only backward needs) and shared by every
/// microbatch, including recomputation.
struct StepContext {
    struct LayerQuant {
        ScaledQuant qkv, o, gate_up, down;         // (out, in) codes
        ScaledQuant qkv_t, o_t, gate_up_t, down_t; // (in, out) codes
    };
    bool fp8 = false;
    std::vector<LayerQuant> layers;
};

StepContext build_step_context(const ModelConfig& cfg, const ModelParams& params,
                               const PrecisionMap& prec);

/// Absmax statistics recorded at every forward quantization site, consumed by
/// recomputation so it never re-reduces (and quantization stays fused).
struct ForwardStats {
    enum Site { N1 = 0, ATT = 1, N2 = 2, H = 3 };
    std::vector<std::array<float, 4>> per_layer;
};

struct LayerSaved {
    Tensor r_in; // block input residual; the only tensor kept at Block level
    std::optional<Tensor> n1, qkv, att, r_mid, n2, gate_up, h;
};

struct ChunkSpec {
    std::int64_t lmhead_chunk_tokens = 0; // 0 = one chunk
    std::int64_t attn_chunk_rows = 0;     // 0 = one chunk
};

struct ForwardResult {
    float loss = 0.0f;
    std::vector<std::int32_t> tokens; // flattened (B*T)
    std::int64_t batch = 0, seq = 0;
    std::vector<LayerSaved> layers;
    Tensor r_final;
    Tensor d_hidden; // CE is a fused fwd+bwd kernel; its input gradient rides along
    Tensor d_lm_w;
    ForwardStats stats;
    std::size_t workspace_floats_peak = 0;
};

using GradMap = std::map<std::string, Tensor>;

/// Full forward pass including the fused chunked cross-entropy. `saved`
/// contains exactly what the recompute set says to keep. Throws with the
/// offending site name if anything goes non-finite. with_grads = false is the
/// evaluation path (loss only, nothing saved for backward).
ForwardResult model_forward(const ModelConfig& cfg, const ModelParams& params,
                            const StepContext& step, std::span<const std::int32_t> tokens,
                            std::int64_t batch, const RecomputeSet& recompute,
                            const PrecisionMap& prec, const ChunkSpec& chunks,
                            bool with_grads = true);

/// Backward from the saved state; missing sites are recomputed from the block
/// input residual using the cached absmax statistics, which makes gradients
/// bitwise independent of the recompute set.
GradMap model_backward(const ModelConfig& cfg, const ModelParams& params, const StepContext& step,
                       ForwardResult& saved, const RecomputeSet& recompute,
                       const PrecisionMap& prec, const ChunkSpec& chunks);

// ---------------------------------------------------------------------------
// Gradient accumulation (BF16 buffers + stochastic rounding)
// ---------------------------------------------------------------------------

class GradAccumulator {
public:
    GradAccumulator(bool f32_mode, std::uint64_t seed) : f32_mode_(f32_mode), seed_(seed) {}

    void accumulate(const GradMap& grads, std::uint64_t micro_step);
    const GradMap& buffers() const { return bufs_; }
    GradMap take();
    void reset() { bufs_.clear(); }

private:
    bool f32_mode_;
    std::uint64_t seed_;
    GradMap bufs_;
};

// ---------------------------------------------------------------------------
// LM-head backward schedule (the comm-overlap ordering of the weight/input
// gradient matmuls and the replicated-gradient synchronization)
// ---------------------------------------------------------------------------

struct LmHeadEvent {
    enum class Kind { WeightGradMatmul, GradSendStart, InputGradMatmul, GradSyncDone };
    Kind kind;
    int micro_step; // 1-based
    int chunk;      // 1-based
};

/// Weight-gradient matmul is scheduled before the input-gradient matmul so
/// the send overlaps the input-gradient compute; the replicated LM-head
/// gradient is synchronized only at the last accumulation step, and with
/// chunking the send attaches to the final chunk.
std::vector<LmHeadEvent> schedule_lmhead_backward(int workers, int ga_steps, int n_chunks);

} // namespace qtrain
