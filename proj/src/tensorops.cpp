// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0

#include "qtrain/tensorops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace qtrain {

namespace {

void require(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

} // namespace

Tensor matmul_tn(const Tensor& a, const Tensor& b, OutRound rnd) {
    require(a.rank() == 2 && b.rank() == 2, "matmul_tn: operands must be 2-D");
    require(a.shape[1] == b.shape[1], "matmul_tn: inner dimensions disagree");
    const std::int64_t M = a.shape[0], N = b.shape[0], K = a.shape[1];
    Tensor out = Tensor::zeros({M, N});
    for (std::int64_t m = 0; m < M; ++m) {
        const float* ar = a.row(m);
        for (std::int64_t n = 0; n < N; ++n) {
            const float* br = b.row(n);
            float acc = 0.0f;
            for (std::int64_t k = 0; k < K; ++k) acc += ar[k] * br[k];
            out.at(m, n) = round_out(acc, rnd);
        }
    }
    return out;
}

Tensor matmul_tn(const ScaledQuant& a, const ScaledQuant& b, OutRound rnd) {
    require(a.shape.size() == 2 && b.shape.size() == 2, "matmul_tn: operands must be 2-D");
    require(a.shape[1] == b.shape[1], "matmul_tn: inner dimensions disagree");
    const std::int64_t M = a.shape[0], N = b.shape[0], K = a.shape[1];
    const auto dec_a = f8_decode_table(a.kind);
    const auto dec_b = f8_decode_table(b.kind);
    const float denom = a.scale * b.scale;
    Tensor out = Tensor::zeros({M, N});
    for (std::int64_t m = 0; m < M; ++m) {
        const std::uint8_t* ar = a.codes.data() + m * K;
        for (std::int64_t n = 0; n < N; ++n) {
            const std::uint8_t* br = b.codes.data() + n * K;
            float acc = 0.0f;
            for (std::int64_t k = 0; k < K; ++k) acc += dec_a[ar[k]] * dec_b[br[k]];
            out.at(m, n) = round_out(acc / denom, rnd);
        }
    }
    return out;
}

std::pair<Tensor, FusedOut> rmsnorm_residual_fused(const Tensor* x, const Tensor& residual,
                                                   const Tensor& gamma, float eps, OutRound rnd) {
    if (x) require(x->same_shape(residual), "rmsnorm_residual_fused: x/residual shape mismatch");
    require(gamma.numel() == residual.shape.back(), "rmsnorm_residual_fused: gamma dim mismatch");
    const std::int64_t rows = residual.numel() / residual.shape.back();
    const std::int64_t d = residual.shape.back();

    Tensor nr = Tensor::zeros(residual.shape);
    FusedOut normed{Tensor::zeros(residual.shape), 0.0f};
    for (std::int64_t r = 0; r < rows; ++r) {
        const float* res = residual.data.data() + r * d;
        const float* xp = x ? x->data.data() + r * d : nullptr;
        float* nrp = nr.data.data() + r * d;
        for (std::int64_t i = 0; i < d; ++i) nrp[i] = xp ? round_out(xp[i] + res[i], rnd) : res[i];
        float ssq = 0.0f;
        for (std::int64_t i = 0; i < d; ++i) ssq += nrp[i] * nrp[i];
        const float inv = 1.0f / std::sqrt(ssq / static_cast<float>(d) + eps);
        float* np = normed.value.data.data() + r * d;
        for (std::int64_t i = 0; i < d; ++i) {
            np[i] = round_out((nrp[i] * inv) * gamma.data[static_cast<std::size_t>(i)], rnd);
            const float a = std::fabs(np[i]);
            if (a > normed.absmax || std::isnan(a)) normed.absmax = a; // nan sticks
        }
    }
    return {std::move(nr), std::move(normed)};
}

RmsnormGrads rmsnorm_residual_backward(const Tensor& new_residual, const Tensor& gamma, float eps,
                                       const Tensor& d_normed, const Tensor* d_extra, OutRound rnd) {
    require(new_residual.same_shape(d_normed), "rmsnorm backward: shape mismatch");
    const std::int64_t d = new_residual.shape.back();
    const std::int64_t rows = new_residual.numel() / d;
    RmsnormGrads g{Tensor::zeros(new_residual.shape), Tensor::zeros(gamma.shape)};
    for (std::int64_t r = 0; r < rows; ++r) {
        const float* nr = new_residual.data.data() + r * d;
        const float* dy = d_normed.data.data() + r * d;
        float ssq = 0.0f;
        for (std::int64_t i = 0; i < d; ++i) ssq += nr[i] * nr[i];
        const float inv = 1.0f / std::sqrt(ssq / static_cast<float>(d) + eps);
        float dot = 0.0f; // sum_i dy_i * gamma_i * nr_i
        for (std::int64_t i = 0; i < d; ++i) dot += dy[i] * gamma.data[static_cast<std::size_t>(i)] * nr[i];
        const float inv3_over_d = inv * inv * inv / static_cast<float>(d);
        float* dn = g.d_input.data.data() + r * d;
        for (std::int64_t i = 0; i < d; ++i) {
            float v = dy[i] * gamma.data[static_cast<std::size_t>(i)] * inv - nr[i] * inv3_over_d * dot;
            if (d_extra) v += d_extra->data[static_cast<std::size_t>(r * d + i)];
            dn[i] = round_out(v, rnd);
            g.d_gamma.data[static_cast<std::size_t>(i)] += dy[i] * nr[i] * inv;
        }
    }
    return g;
}

FusedOut swiglu_fused(const Tensor& gate_up, OutRound rnd) {
    require(gate_up.shape.back() % 2 == 0, "swiglu: last dim must be even (gate | up halves)");
    const std::int64_t two_h = gate_up.shape.back();
    const std::int64_t h = two_h / 2;
    const std::int64_t rows = gate_up.numel() / two_h;
    auto out_shape = gate_up.shape;
    out_shape.back() = h;
    FusedOut out{Tensor::zeros(out_shape), 0.0f};
    for (std::int64_t r = 0; r < rows; ++r) {
        const float* gu = gate_up.data.data() + r * two_h;
        float* op = out.value.data.data() + r * h;
        for (std::int64_t i = 0; i < h; ++i) {
            op[i] = round_out(silu(gu[i]) * gu[h + i], rnd);
            const float a = std::fabs(op[i]);
            if (a > out.absmax || std::isnan(a)) out.absmax = a; // nan sticks
        }
    }
    return out;
}

Tensor swiglu_backward(const Tensor& gate_up, const Tensor& grad_out, OutRound rnd) {
    const std::int64_t two_h = gate_up.shape.back();
    const std::int64_t h = two_h / 2;
    const std::int64_t rows = gate_up.numel() / two_h;
    require(grad_out.shape.back() == h, "swiglu backward: grad dim mismatch");
    Tensor dgu = Tensor::zeros(gate_up.shape);
    for (std::int64_t r = 0; r < rows; ++r) {
        const float* gu = gate_up.data.data() + r * two_h;
        const float* go = grad_out.data.data() + r * h;
        float* dp = dgu.data.data() + r * two_h;
        for (std::int64_t i = 0; i < h; ++i) {
            const float g = gu[i], u = gu[h + i];
            const float sig = 1.0f / (1.0f + std::exp(-g));
            const float dsilu = sig * (1.0f + g * (1.0f - sig));
            dp[i] = round_out(go[i] * u * dsilu, rnd);
            dp[h + i] = round_out(go[i] * (g * sig), rnd);
        }
    }
    return dgu;
}

Tensor transpose(const Tensor& t) {
    require(t.rank() == 2, "transpose: 2-D only");
    const std::int64_t R = t.shape[0], C = t.shape[1];
    Tensor out = Tensor::zeros({C, R});
    for (std::int64_t r = 0; r < R; ++r)
        for (std::int64_t c = 0; c < C; ++c) out.at(c, r) = t.at(r, c);
    return out;
}

ScaledQuant transpose_quantize_with_absmax(const Tensor& t, F8Kind kind, float source_absmax) {
    require(t.rank() == 2, "transpose_quantize: 2-D only");
    const std::int64_t R = t.shape[0], C = t.shape[1];
    ScaledQuant q;
    q.shape = {C, R};
    q.kind = kind;
    q.source_absmax = source_absmax;
    q.scale = absmax_scale(source_absmax, kind);
    q.codes.resize(static_cast<std::size_t>(R * C));
    const float fmax = f8_fmax(kind);
    for (std::int64_t r = 0; r < R; ++r) {
        for (std::int64_t c = 0; c < C; ++c) {
            float v = t.at(r, c) * q.scale;
            v = std::clamp(v, -fmax, fmax);
            q.codes[static_cast<std::size_t>(c * R + r)] = f8_encode(v, kind);
        }
    }
    return q;
}

ScaledQuant transpose_quantize(const Tensor& t, F8Kind kind) {
    return transpose_quantize_with_absmax(t, kind, absmax(t.cspan()));
}

namespace {

// one query row of causal attention; probs buffer has row+1 slots
void attn_row_forward(const float* qr, const Tensor& k, const Tensor& v, std::int64_t kvh,
                      std::int64_t row, std::int64_t D, float inv_sqrt_d, float* probs,
                      float* out_row) {
    const std::int64_t T = k.shape[1];
    const float* kb = k.data.data() + kvh * T * D;
    const float* vb = v.data.data() + kvh * T * D;
    float mx = -std::numeric_limits<float>::infinity();
    for (std::int64_t j = 0; j <= row; ++j) {
        const float* kr = kb + j * D;
        float s = 0.0f;
        for (std::int64_t i = 0; i < D; ++i) s += qr[i] * kr[i];
        probs[j] = s * inv_sqrt_d;
        mx = std::max(mx, probs[j]);
    }
    float denom = 0.0f;
    for (std::int64_t j = 0; j <= row; ++j) {
        probs[j] = std::exp(probs[j] - mx);
        denom += probs[j];
    }
    const float inv_denom = 1.0f / denom;
    for (std::int64_t j = 0; j <= row; ++j) probs[j] *= inv_denom;
    for (std::int64_t i = 0; i < D; ++i) out_row[i] = 0.0f;
    for (std::int64_t j = 0; j <= row; ++j) {
        const float* vr = vb + j * D;
        const float p = probs[j];
        for (std::int64_t i = 0; i < D; ++i) out_row[i] += p * vr[i];
    }
}

} // namespace

std::size_t sdpa_workspace_floats(std::int64_t seq, std::int64_t chunk_rows) {
    const std::int64_t rows = std::clamp<std::int64_t>(chunk_rows, 1, seq);
    return static_cast<std::size_t>(rows * seq);
}

Tensor sdpa_chunked(const Tensor& q, const Tensor& k, const Tensor& v, std::int64_t chunk_rows,
                    OutRound rnd) {
    require(q.rank() == 3 && k.rank() == 3 && v.rank() == 3, "sdpa: (H,T,D) tensors expected");
    require(k.same_shape(v), "sdpa: k/v shape mismatch");
    require(q.shape[1] == k.shape[1] && q.shape[2] == k.shape[2], "sdpa: q/k dims disagree");
    require(q.shape[0] % k.shape[0] == 0, "sdpa: heads not divisible by kv heads");
    require(chunk_rows >= 1, "sdpa: chunk_rows must be >= 1");
    const std::int64_t H = q.shape[0], T = q.shape[1], D = q.shape[2];
    const std::int64_t group = H / k.shape[0];
    const std::int64_t step = std::min<std::int64_t>(chunk_rows, T); // clamp, not an error
    const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(D));

    Tensor out = Tensor::zeros(q.shape);
    std::vector<float> probs(static_cast<std::size_t>(T));
    std::vector<float> orow(static_cast<std::size_t>(D));
    for (std::int64_t h = 0; h < H; ++h) {
        const std::int64_t kvh = h / group;
        for (std::int64_t c0 = 0; c0 < T; c0 += step) {
            const std::int64_t c1 = std::min(c0 + step, T);
            for (std::int64_t t = c0; t < c1; ++t) {
                const float* qr = q.data.data() + (h * T + t) * D;
                attn_row_forward(qr, k, v, kvh, t, D, inv_sqrt_d, probs.data(), orow.data());
                float* op = out.data.data() + (h * T + t) * D;
                for (std::int64_t i = 0; i < D; ++i) op[i] = round_out(orow[i], rnd);
            }
        }
    }
    return out;
}

SdpaGrads sdpa_chunked_backward(const Tensor& q, const Tensor& k, const Tensor& v,
                                const Tensor& grad_out, std::int64_t chunk_rows, OutRound rnd) {
    require(grad_out.same_shape(q), "sdpa backward: grad shape mismatch");
    const std::int64_t H = q.shape[0], T = q.shape[1], D = q.shape[2];
    const std::int64_t group = H / k.shape[0];
    const std::int64_t step = std::min(std::max<std::int64_t>(chunk_rows, 1), T);
    const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(D));

    SdpaGrads g{Tensor::zeros(q.shape), Tensor::zeros(k.shape), Tensor::zeros(v.shape)};
    std::vector<float> probs(static_cast<std::size_t>(T));
    std::vector<float> orow(static_cast<std::size_t>(D));
    for (std::int64_t h = 0; h < H; ++h) {
        const std::int64_t kvh = h / group;
        const float* kb = k.data.data() + kvh * T * D;
        float* dkb = g.dk.data.data() + kvh * T * D;
        float* dvb = g.dv.data.data() + kvh * T * D;
        for (std::int64_t c0 = 0; c0 < T; c0 += step) {
            const std::int64_t c1 = std::min(c0 + step, T);
            for (std::int64_t t = c0; t < c1; ++t) {
                const float* qr = q.data.data() + (h * T + t) * D;
                const float* go = grad_out.data.data() + (h * T + t) * D;
                attn_row_forward(qr, k, v, kvh, t, D, inv_sqrt_d, probs.data(), orow.data());
                // dP_j = go . v_j ; ds_j = P_j (dP_j - sum_i P_i dP_i)
                float pdp = 0.0f;
                for (std::int64_t i = 0; i < D; ++i) pdp += go[i] * orow[i];
                float* dqr = g.dq.data.data() + (h * T + t) * D;
                for (std::int64_t j = 0; j <= t; ++j) {
                    const float* vr = v.data.data() + (kvh * T + j) * D;
                    float dp = 0.0f;
                    for (std::int64_t i = 0; i < D; ++i) dp += go[i] * vr[i];
                    const float ds = probs[j] * (dp - pdp) * inv_sqrt_d;
                    const float* kr = kb + j * D;
                    for (std::int64_t i = 0; i < D; ++i) {
                        dqr[i] += ds * kr[i];
                        dkb[j * D + i] += ds * qr[i];
                        dvb[j * D + i] += probs[j] * go[i];
                    }
                }
            }
        }
    }
    if (rnd == OutRound::Bf16) {
        for (auto* t : {&g.dq, &g.dk, &g.dv})
            for (auto& x : t->data) x = bf16_round(x);
    }
    return g;
}

Tensor deterministic_reduce(std::span<const Tensor> partials) {
    if (partials.empty()) throw std::invalid_argument("deterministic_reduce: empty partial list");
    Tensor out = partials[0];
    for (std::size_t p = 1; p < partials.size(); ++p) {
        require(partials[p].same_shape(out), "deterministic_reduce: shape mismatch");
        const float* src = partials[p].data.data();
        float* dst = out.data.data();
        for (std::size_t i = 0; i < out.data.size(); ++i) dst[i] += src[i];
    }
    return out;
}

Tensor embedding_backward_sorted(std::span<const std::int32_t> token_ids, const Tensor& grad_out,
                                 std::int64_t vocab) {
    require(grad_out.rank() == 2, "embedding backward: grad_out must be (N,d)");
    require(static_cast<std::int64_t>(token_ids.size()) == grad_out.shape[0],
            "embedding backward: id/grad count mismatch");
    const std::int64_t d = grad_out.shape[1];
    for (const auto id : token_ids)
        if (id < 0 || id >= vocab) throw std::out_of_range("embedding backward: token id out of range");

    // sort-and-partition replaces atomic scatter-adds: each row of the result
    // is accumulated in ascending position order
    std::vector<std::int64_t> pos(token_ids.size());
    std::iota(pos.begin(), pos.end(), 0);
    std::stable_sort(pos.begin(), pos.end(), [&](std::int64_t a, std::int64_t b) {
        return token_ids[static_cast<std::size_t>(a)] < token_ids[static_cast<std::size_t>(b)];
    });

    Tensor grad = Tensor::zeros({vocab, d});
    for (const std::int64_t p : pos) {
        const std::int32_t id = token_ids[static_cast<std::size_t>(p)];
        const float* src = grad_out.row(p);
        float* dst = grad.row(id);
        for (std::int64_t i = 0; i < d; ++i) dst[i] += src[i];
    }
    return grad;
}

CrossEntropyResult fused_cross_entropy_chunked(const Tensor& hidden, const Tensor& lm_w,
                                               std::span<const std::int32_t> targets,
                                               std::int64_t chunk_tokens, bool with_grads,
                                               OutRound rnd) {
    require(hidden.rank() == 2 && lm_w.rank() == 2, "cross entropy: 2-D inputs expected");
    require(hidden.shape[1] == lm_w.shape[1], "cross entropy: hidden dim mismatch");
    require(chunk_tokens >= 1, "cross entropy: chunk_tokens must be >= 1");
    const std::int64_t N = hidden.shape[0], d = hidden.shape[1], V = lm_w.shape[0];
    require(static_cast<std::int64_t>(targets.size()) == N, "cross entropy: target count mismatch");
    for (const auto t : targets)
        if (t < 0 || t >= V) throw std::out_of_range("cross entropy: target id out of range");

    const std::int64_t step = std::min(chunk_tokens, N);
    CrossEntropyResult res;
    if (with_grads) {
        res.d_hidden = Tensor::zeros(hidden.shape);
        res.d_lm_w = Tensor::zeros(lm_w.shape);
    }
    res.workspace_floats = static_cast<std::size_t>(step * V);
    std::vector<float> logits(res.workspace_floats); // one chunk of the (N,V) tensor
    const float inv_n = 1.0f / static_cast<float>(N);

    float loss_sum = 0.0f;
    for (std::int64_t c0 = 0; c0 < N; c0 += step) {
        const std::int64_t c1 = std::min(c0 + step, N);
        for (std::int64_t t = c0; t < c1; ++t) {
            float* lrow = logits.data() + (t - c0) * V;
            const float* hrow = hidden.row(t);
            for (std::int64_t vv = 0; vv < V; ++vv) {
                const float* wrow = lm_w.row(vv);
                float acc = 0.0f;
                for (std::int64_t i = 0; i < d; ++i) acc += hrow[i] * wrow[i];
                lrow[vv] = acc;
            }
            float mx = lrow[0];
            for (std::int64_t vv = 1; vv < V; ++vv) mx = std::max(mx, lrow[vv]);
            float denom = 0.0f;
            for (std::int64_t vv = 0; vv < V; ++vv) denom += std::exp(lrow[vv] - mx);
            const float lse = mx + std::log(denom);
            loss_sum += lse - lrow[targets[static_cast<std::size_t>(t)]];

            if (!with_grads) continue;
            // dlogits (overwrites the logit row), then both matmuls of the
            // backward, token by token so chunking cannot change the result
            const float inv_denom = 1.0f / denom;
            for (std::int64_t vv = 0; vv < V; ++vv) {
                float p = std::exp(lrow[vv] - mx) * inv_denom;
                if (vv == targets[static_cast<std::size_t>(t)]) p -= 1.0f;
                lrow[vv] = p * inv_n;
            }
            float* dh = res.d_hidden.row(t); // written directly into the token's slice
            for (std::int64_t i = 0; i < d; ++i) {
                float acc = 0.0f;
                for (std::int64_t vv = 0; vv < V; ++vv) acc += lrow[vv] * lm_w.at(vv, i);
                dh[i] = round_out(acc, rnd);
            }
            for (std::int64_t vv = 0; vv < V; ++vv) {
                const float dl = lrow[vv];
                if (dl == 0.0f) continue;
                float* dw = res.d_lm_w.row(vv);
                for (std::int64_t i = 0; i < d; ++i) dw[i] += dl * hrow[i];
            }
        }
    }
    res.loss = loss_sum * inv_n;
    return res;
}

} // namespace qtrain
