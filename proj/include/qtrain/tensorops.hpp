// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic dense kernels: TN matmul, fused rmsnorm+residual, SwiGLU,
// transpose+quantize, chunked attention and cross-entropy, and the fixed-order
// reductions used by every backward pass.
//
// Repo-wide determinism contract: every reduction runs in ascending-index
// sequential order, so any two runs (and any chunking of the chunked ops)
// produce identical bits.

#pragma once

#include "qtrain/numerics.hpp"
#include "qtrain/tensor.hpp"

#include <cstdint>
#include <span>
#include <utility>

namespace qtrain {

/// Output rounding applied at op boundaries. Bf16 mirrors mixed-precision
/// storage; None is the f32 debug mode used by gradient-check oracles.
enum class OutRound { Bf16, None };

inline float round_out(float v, OutRound r) { return r == OutRound::Bf16 ? bf16_round(v) : v; }

/// Value plus the absmax of that value, emitted by fused kernels so the
/// following quantization does not need its own global reduction.
struct FusedOut {
    Tensor value;
    float absmax = 0.0f;
};

// ---------------------------------------------------------------------------
// Matmul (TN layout: out = a . b^T, reduction dim contiguous in both operands)
// ---------------------------------------------------------------------------

/// a: (M,K), b: (N,K) -> (M,N). f32 accumulation, sequential over k per
/// output element.
Tensor matmul_tn(const Tensor& a, const Tensor& b, OutRound rnd = OutRound::None);

/// FP8 path: out[m,n] = (sum_k dec(a[m,k]) * dec(b[n,k])) / (a.scale * b.scale)
/// where dec() yields the scaled code value. One tensor-level scale each.
Tensor matmul_tn(const ScaledQuant& a, const ScaledQuant& b, OutRound rnd = OutRound::None);

// ---------------------------------------------------------------------------
// Fused norm / nonlinearity kernels
// ---------------------------------------------------------------------------

/// new_residual = x + residual (x may be null: pass-through), normed =
/// rmsnorm(new_residual) * gamma, with the absmax of normed as a fused side
/// output. residual: (N,d), gamma: (d).
std::pair<Tensor, FusedOut> rmsnorm_residual_fused(const Tensor* x, const Tensor& residual,
                                                   const Tensor& gamma, float eps,
                                                   OutRound rnd = OutRound::Bf16);

struct RmsnormGrads {
    Tensor d_input;   // gradient wrt new_residual (flows to both x and residual)
    Tensor d_gamma;
};

/// Backward through normed = rmsnorm(nr)*gamma. d_extra, if non-null, is the
/// gradient arriving at new_residual from the residual stream and is added in.
RmsnormGrads rmsnorm_residual_backward(const Tensor& new_residual, const Tensor& gamma, float eps,
                                       const Tensor& d_normed, const Tensor* d_extra,
                                       OutRound rnd = OutRound::Bf16);

/// gate_up: (N, 2H) as [gate | up] halves -> silu(gate) * up: (N, H).
FusedOut swiglu_fused(const Tensor& gate_up, OutRound rnd = OutRound::Bf16);

Tensor swiglu_backward(const Tensor& gate_up, const Tensor& grad_out, OutRound rnd = OutRound::Bf16);

// ---------------------------------------------------------------------------
// Transposes
// ---------------------------------------------------------------------------

Tensor transpose(const Tensor& t);

/// Quantize a 2-D tensor and emit the codes in transposed layout; scale and
/// codes match quantize_absmax(t) elementwise (backward matmuls need the
/// transposed operand, the TN-only gemm cannot absorb it).
ScaledQuant transpose_quantize(const Tensor& t, F8Kind kind);
ScaledQuant transpose_quantize_with_absmax(const Tensor& t, F8Kind kind, float source_absmax);

// ---------------------------------------------------------------------------
// Chunked attention (causal SDPA)
// ---------------------------------------------------------------------------

/// q: (H,T,D), k/v: (Hkv,T,D) with H divisible by Hkv. Chunking over query
/// rows bounds the score workspace; results are invariant to chunk_rows.
/// chunk_rows > T is clamped. Softmax internals run in f32, I/O is bf16.
Tensor sdpa_chunked(const Tensor& q, const Tensor& k, const Tensor& v, std::int64_t chunk_rows,
                    OutRound rnd = OutRound::Bf16);

struct SdpaGrads {
    Tensor dq, dk, dv;
};

SdpaGrads sdpa_chunked_backward(const Tensor& q, const Tensor& k, const Tensor& v,
                                const Tensor& grad_out, std::int64_t chunk_rows,
                                OutRound rnd = OutRound::Bf16);

/// High-water f32 scratch elements for one (H,T,D) attention call; feeds the
/// planner's workspace accounting.
std::size_t sdpa_workspace_floats(std::int64_t seq, std::int64_t chunk_rows);

// ---------------------------------------------------------------------------
// Deterministic reductions
// ---------------------------------------------------------------------------

/// Sum of equally-shaped partials in list order (index 0 first). This is the
/// two-phase buffer scheme: partials are materialized first, reduced second,
/// never atomically.
Tensor deterministic_reduce(std::span<const Tensor> partials);

/// grad[v] = sum of grad_out rows whose token is v, in ascending position
/// order (ids are sorted and partitioned, never scatter-added atomically).
Tensor embedding_backward_sorted(std::span<const std::int32_t> token_ids, const Tensor& grad_out,
                                 std::int64_t vocab);

// ---------------------------------------------------------------------------
// Fused chunked cross-entropy (forward + backward in one pass)
// ---------------------------------------------------------------------------

struct CrossEntropyResult {
    float loss = 0.0f;       // mean over tokens
    Tensor d_hidden;         // (N,d), written slice-by-slice
    Tensor d_lm_w;           // (V,d), accumulated sequentially over tokens
    std::size_t workspace_floats = 0;
};

/// hidden: (N,d), lm_w: (V,d), targets: N ids. Logits are materialized one
/// chunk_tokens x V slab at a time; loss, d_hidden and d_lm_w are invariant
/// to chunk_tokens (per-token ascending accumulation order).
CrossEntropyResult fused_cross_entropy_chunked(const Tensor& hidden, const Tensor& lm_w,
                                               std::span<const std::int32_t> targets,
                                               std::int64_t chunk_tokens, bool with_grads = true,
                                               OutRound rnd = OutRound::Bf16);

} // namespace qtrain
