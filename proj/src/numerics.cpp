// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0

#include "qtrain/numerics.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace qtrain {

namespace {

struct F8Layout {
    int exp_bits;
    int man_bits;
    int bias;
    bool ieee_inf_nan; // E5M2: top exponent is inf/NaN; E4M3: only mantissa-all-ones is NaN
};

constexpr F8Layout layout_of(F8Kind kind) {
    return kind == F8Kind::E4M3 ? F8Layout{4, 3, 7, false} : F8Layout{5, 2, 15, true};
}

float decode_raw(std::uint8_t code, F8Kind kind) {
    const F8Layout L = layout_of(kind);
    const int sign = (code >> 7) ? -1 : 1;
    const int exp_mask = (1 << L.exp_bits) - 1;
    const int man_mask = (1 << L.man_bits) - 1;
    const int e = (code >> L.man_bits) & exp_mask;
    const int m = code & man_mask;

    if (L.ieee_inf_nan && e == exp_mask) {
        if (m == 0) return sign * std::numeric_limits<float>::infinity();
        return std::numeric_limits<float>::quiet_NaN();
    }
    if (!L.ieee_inf_nan && e == exp_mask && m == man_mask) {
        return std::numeric_limits<float>::quiet_NaN();
    }
    const float man_scale = 1.0f / static_cast<float>(1 << L.man_bits);
    if (e == 0) { // denormal, kept (not flushed)
        return sign * static_cast<float>(m) * man_scale * std::exp2f(static_cast<float>(1 - L.bias));
    }
    return sign * (1.0f + static_cast<float>(m) * man_scale) * std::exp2f(static_cast<float>(e - L.bias));
}

struct F8Tables {
    std::array<float, 256> decode{};
    // finite non-NaN values >= 0, sorted ascending, with their codes
    std::vector<float> pos_values;
    std::vector<std::uint8_t> pos_codes;
    float fmax = 0.0f;
    std::uint8_t nan_code = 0x7F;
    std::uint8_t inf_code = 0; // 0 = format has no infinity

    explicit F8Tables(F8Kind kind) {
        for (int c = 0; c < 256; ++c) decode[static_cast<std::size_t>(c)] = decode_raw(static_cast<std::uint8_t>(c), kind);
        for (int c = 0; c < 128; ++c) { // positive half; negatives mirror via sign bit
            const float v = decode[static_cast<std::size_t>(c)];
            if (std::isfinite(v)) {
                pos_values.push_back(v);
                pos_codes.push_back(static_cast<std::uint8_t>(c));
                fmax = std::max(fmax, v);
            } else if (std::isinf(v)) {
                inf_code = static_cast<std::uint8_t>(c);
            }
        }
        // codes are already monotone in value within the positive half, but do
        // not rely on it
        std::vector<std::size_t> order(pos_values.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(),
                  [&](std::size_t a, std::size_t b) { return pos_values[a] < pos_values[b]; });
        std::vector<float> sv(order.size());
        std::vector<std::uint8_t> sc(order.size());
        for (std::size_t i = 0; i < order.size(); ++i) {
            sv[i] = pos_values[order[i]];
            sc[i] = pos_codes[order[i]];
        }
        pos_values = std::move(sv);
        pos_codes = std::move(sc);
    }

    std::uint8_t encode(float x) const {
        if (std::isnan(x)) return nan_code;
        const bool neg = std::signbit(x);
        const float a = std::fabs(x);
        std::uint8_t code;
        if (std::isinf(x) && inf_code != 0) {
            code = inf_code; // E5M2 keeps IEEE infinities; finite overflow still saturates
        } else if (a >= pos_values.back()) {
            code = pos_codes.back(); // saturate to fmax
        } else {
            // first value >= a
            const auto it = std::lower_bound(pos_values.begin(), pos_values.end(), a);
            const std::size_t hi = static_cast<std::size_t>(it - pos_values.begin());
            if (pos_values[hi] == a || hi == 0) {
                code = pos_codes[hi];
            } else {
                const std::size_t lo = hi - 1;
                // midpoint of two fp8 values is exact in f32
                const float mid = 0.5f * (pos_values[lo] + pos_values[hi]);
                if (a < mid) code = pos_codes[lo];
                else if (a > mid) code = pos_codes[hi];
                else code = (pos_codes[lo] & 1u) == 0 ? pos_codes[lo] : pos_codes[hi]; // ties to even
            }
        }
        return neg ? static_cast<std::uint8_t>(code | 0x80u) : code;
    }
};

const F8Tables& tables(F8Kind kind) {
    static const F8Tables e4m3{F8Kind::E4M3};
    static const F8Tables e5m2{F8Kind::E5M2};
    return kind == F8Kind::E4M3 ? e4m3 : e5m2;
}

} // namespace

std::string_view to_string(F8Kind kind) {
    return kind == F8Kind::E4M3 ? "e4m3" : "e5m2";
}

float f8_decode(std::uint8_t code, F8Kind kind) { return tables(kind).decode[code]; }

std::uint8_t f8_encode(float x, F8Kind kind) { return tables(kind).encode(x); }

float f8_fmax(F8Kind kind) { return tables(kind).fmax; }

bool f8_is_nan(std::uint8_t code, F8Kind kind) { return std::isnan(tables(kind).decode[code]); }

bool f8_is_inf(std::uint8_t code, F8Kind kind) { return std::isinf(tables(kind).decode[code]); }

std::span<const float, 256> f8_decode_table(F8Kind kind) {
    return std::span<const float, 256>{tables(kind).decode};
}

float absmax(std::span<const float> t) {
    float m = 0.0f;
    for (const float v : t) {
        if (std::isnan(v)) throw std::runtime_error("absmax: NaN element (training diverged?)");
        m = std::max(m, std::fabs(v));
    }
    return m;
}

float absmax_scale(float source_absmax, F8Kind kind) {
    if (source_absmax == 0.0f) return 1.0f;
    const double exact = static_cast<double>(f8_fmax(kind)) / static_cast<double>(source_absmax);
    float s = static_cast<float>(exact);
    // round up so that fmax/scale <= absmax exactly; this is what makes the
    // no-clipping guarantee strict rather than within-an-ulp
    if (static_cast<double>(s) < exact) s = std::nextafterf(s, std::numeric_limits<float>::infinity());
    return s;
}

ScaledQuant quantize_with_absmax(std::span<const float> t, std::vector<std::int64_t> shape,
                                 F8Kind kind, float source_absmax) {
    ScaledQuant q;
    q.shape = std::move(shape);
    q.kind = kind;
    q.source_absmax = source_absmax;
    q.scale = absmax_scale(source_absmax, kind);
    q.codes.resize(t.size());
    const F8Tables& tab = tables(kind);
    const float fmax = tab.fmax;
    for (std::size_t i = 0; i < t.size(); ++i) {
        float v = t[i] * q.scale;
        v = std::clamp(v, -fmax, fmax);
        q.codes[i] = tab.encode(v);
    }
    return q;
}

ScaledQuant quantize_absmax(std::span<const float> t, std::vector<std::int64_t> shape, F8Kind kind) {
    return quantize_with_absmax(t, std::move(shape), kind, absmax(t));
}

std::vector<float> dequantize(const ScaledQuant& q) {
    std::vector<float> out(q.codes.size());
    const auto& tab = tables(q.kind).decode;
    const float s = q.scale;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = tab[q.codes[i]] / s;
    return out;
}

namespace {

inline std::uint64_t mix64(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
}

} // namespace

std::uint32_t rng_uniform(const RngKey& key) {
    std::uint64_t z = 0x9E3779B97F4A7C15ull;
    z = mix64(z ^ key.seed);    // round 1
    z = mix64(z ^ key.stream);  // round 2
    z = mix64(z ^ key.counter); // round 3
    z = mix64(z);               // round 4
    return static_cast<std::uint32_t>(z >> 32) ^ static_cast<std::uint32_t>(z);
}

float rng_uniform_float(const RngKey& key) {
    return static_cast<float>(rng_uniform(key) >> 8) * 0x1.0p-24f;
}

float rng_normal(const RngKey& key) {
    RngKey k1 = key;
    RngKey k2 = key;
    k1.counter = 2 * key.counter;
    k2.counter = 2 * key.counter + 1;
    // avoid log(0): shift u1 into (0, 1]
    const double u1 = (static_cast<double>(rng_uniform(k1)) + 1.0) * 0x1.0p-32;
    const double u2 = static_cast<double>(rng_uniform(k2)) * 0x1.0p-32;
    const double r = std::sqrt(-2.0 * std::log(u1));
    return static_cast<float>(r * std::cos(2.0 * 3.14159265358979323846 * u2));
}

std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (const char c : s) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 0x100000001B3ull;
    }
    return h;
}

float bf16_round(float x) {
    if (std::isnan(x)) return x;
    std::uint32_t bits = std::bit_cast<std::uint32_t>(x);
    bits += 0x7FFFu + ((bits >> 16) & 1u); // round to nearest even
    bits &= 0xFFFF0000u;
    return std::bit_cast<float>(bits);
}

bool bf16_representable(float x) {
    return (std::bit_cast<std::uint32_t>(x) & 0xFFFFu) == 0 || std::isnan(x);
}

float stochastic_round_bf16(float x, const RngKey& key) {
    if (std::isnan(x)) return x;
    std::uint32_t bits = std::bit_cast<std::uint32_t>(x);
    if ((bits & 0xFFFFu) == 0) return x; // already on the bf16 grid
    // adding a uniform 16-bit offset carries into the bf16 half with
    // probability exactly (x - lo)/(hi - lo)
    bits += rng_uniform(key) & 0xFFFFu;
    bits &= 0xFFFF0000u;
    return std::bit_cast<float>(bits);
}

} // namespace qtrain
