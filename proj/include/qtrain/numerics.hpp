// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0
//
// FP8 (E4M3/E5M2) and BF16 scalar emulation, tensor-level absmax scaling,
// stochastic rounding, and a stateless counter-based random generator.

#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace qtrain {

// ---------------------------------------------------------------------------
// FP8 formats
// ---------------------------------------------------------------------------

// E4M3 follows the saturating no-infinity convention (single NaN pattern per
// sign, 0x7F/0xFF); E5M2 keeps IEEE-like infinities and NaNs. Denormals are
// kept, not flushed.
enum class F8Kind : std::uint8_t { E4M3, E5M2 };

std::string_view to_string(F8Kind kind);

/// Decode one 8-bit code to f32. NaN patterns decode to quiet NaN, E5M2
/// infinity patterns to +-inf.
float f8_decode(std::uint8_t code, F8Kind kind);

/// Encode f32 to the nearest representable value (round-to-nearest-even over
/// the finite value set). Magnitudes beyond fmax saturate to +-fmax. NaN
/// input yields the NaN code.
std::uint8_t f8_encode(float x, F8Kind kind);

/// Largest finite representable magnitude, found by enumerating all 256 bit
/// patterns (448 for E4M3, 57344 for E5M2).
float f8_fmax(F8Kind kind);

bool f8_is_nan(std::uint8_t code, F8Kind kind);
bool f8_is_inf(std::uint8_t code, F8Kind kind);

/// Decode table for one kind, indexed by code. Stable reference for tests
/// and for hot loops that want to avoid per-element branching.
std::span<const float, 256> f8_decode_table(F8Kind kind);

// ---------------------------------------------------------------------------
// Absmax-scaled quantization
// ---------------------------------------------------------------------------

/// A quantized tensor: 8-bit codes plus one tensor-level scale. The scale is
/// the multiplier applied before encoding (codes[i] = encode(x[i] * scale)),
/// chosen so the largest magnitude maps to fmax and nothing is ever clipped.
struct ScaledQuant {
    std::vector<std::int64_t> shape;
    std::vector<std::uint8_t> codes;
    F8Kind kind = F8Kind::E4M3;
    float scale = 1.0f;
    float source_absmax = 0.0f;

    std::int64_t numel() const { return static_cast<std::int64_t>(codes.size()); }
};

/// Max over |t_i|; 0 for an empty or all-zero tensor. Throws on NaN elements
/// (a divergence signal, not a representable statistic).
float absmax(std::span<const float> t);

/// scale = fmax(kind)/absmax, rounded *up* so that fmax/scale <= absmax holds
/// exactly in f32; absmax == 0 yields scale = 1.
float absmax_scale(float source_absmax, F8Kind kind);

ScaledQuant quantize_absmax(std::span<const float> t, std::vector<std::int64_t> shape,
                            F8Kind kind);

/// Same as quantize_absmax but with the absmax supplied by the caller (fused
/// kernels emit it as a side output; recomputation replays it from cached
/// statistics instead of re-reducing).
ScaledQuant quantize_with_absmax(std::span<const float> t, std::vector<std::int64_t> shape,
                                 F8Kind kind, float source_absmax);

/// element_i = decode(codes_i) / scale.
std::vector<float> dequantize(const ScaledQuant& q);

// ---------------------------------------------------------------------------
// Counter-based RNG
// ---------------------------------------------------------------------------

/// Stateless key: the same (seed, stream, counter) always yields the same
/// bits. Streams separate independent consumers (one per parameter, per
/// rounding site, ...); counters enumerate draws within a stream.
struct RngKey {
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;
    std::uint64_t counter = 0;
};

/// 4-round mixer over (seed, stream, counter). Rounds 1-3 absorb one key
/// word each, round 4 whitens; the 64-bit state is folded to 32 bits.
/// Reference vectors live in data/rng_test_vectors.txt.
std::uint32_t rng_uniform(const RngKey& key);

/// Uniform in [0, 1) with 24 bits of resolution.
float rng_uniform_float(const RngKey& key);

/// Standard normal via Box-Muller; consumes counters (2*counter, 2*counter+1)
/// of the key's stream.
float rng_normal(const RngKey& key);

/// FNV-1a, used to derive RNG streams from parameter names.
std::uint64_t fnv1a64(std::string_view s);

// ---------------------------------------------------------------------------
// BF16 emulation (values live in f32, restricted to the bf16 grid)
// ---------------------------------------------------------------------------

/// Round f32 to the nearest bf16 (ties to even).
float bf16_round(float x);

bool bf16_representable(float x);

/// Round x to one of its two bf16 neighbors; P(up) = (x - lo)/(hi - lo).
/// Exactly representable inputs pass through unchanged for every key.
float stochastic_round_bf16(float x, const RngKey& key);

} // namespace qtrain
