// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0

#include "qtrain/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace qtrain {

void ModelConfig::validate() const {
    if (d_model % n_heads != 0) throw std::invalid_argument("ModelConfig: d_model % n_heads != 0");
    if (n_heads % n_kv_heads != 0) throw std::invalid_argument("ModelConfig: n_heads % n_kv_heads != 0");
    if (d_ff % 2 != 0) throw std::invalid_argument("ModelConfig: d_ff must be even (gate | up halves)");
    if (n_layers < 1 || vocab < 2 || seq_len < 1) throw std::invalid_argument("ModelConfig: degenerate");
}

std::string RecomputeSet::str() const {
    static const char* names[] = {"swiglu", "rmsnorm", "attention", "qkv", "ffn", "block"};
    std::string out;
    for (int i = 0; i < 6; ++i) {
        if (bits & (1u << i)) {
            if (!out.empty()) out += ",";
            out += names[i];
        }
    }
    return out.empty() ? "none" : out;
}

RecomputeSet recompute_set_from_names(std::span<const std::string> names) {
    RecomputeSet s;
    for (const auto& n : names) {
        if (n == "swiglu") s.bits |= 1u << static_cast<int>(RecomputeSite::SwiGLU);
        else if (n == "rmsnorm") s.bits |= 1u << static_cast<int>(RecomputeSite::RMSNorm);
        else if (n == "attention" || n == "att") s.bits |= 1u << static_cast<int>(RecomputeSite::Attention);
        else if (n == "qkv") s.bits |= 1u << static_cast<int>(RecomputeSite::QKV);
        else if (n == "ffn") s.bits |= 1u << static_cast<int>(RecomputeSite::FFN);
        else if (n == "block") s.bits |= 1u << static_cast<int>(RecomputeSite::Block);
        else if (n == "none" || n.empty()) continue;
        else throw std::invalid_argument("unknown recompute site: " + n);
    }
    return s;
}

std::int64_t ModelParams::total_elems() const {
    std::int64_t n = embed.numel() + final_g.numel() + lm_head.numel();
    for (const auto& l : layers)
        n += l.ln1_g.numel() + l.w_qkv.numel() + l.w_o.numel() + l.ln2_g.numel() +
             l.w_gate_up.numel() + l.w_down.numel();
    return n;
}

namespace {

Tensor normal_init(std::vector<std::int64_t> shape, float std, std::uint64_t seed,
                   const std::string& name) {
    Tensor t = Tensor::zeros(std::move(shape));
    const std::uint64_t stream = fnv1a64("init/" + name);
    for (std::size_t i = 0; i < t.data.size(); ++i)
        t.data[i] = bf16_round(std * rng_normal({seed, stream, i}));
    return t;
}

} // namespace

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const float std = 1.0f / std::sqrt(static_cast<float>(cfg.d_model));
    ModelParams p;
    p.embed = normal_init({cfg.vocab, cfg.d_model}, std, seed, "embed");
    p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string pre = "layers." + std::to_string(l) + ".";
        auto& lp = p.layers[static_cast<std::size_t>(l)];
        lp.ln1_g = Tensor::full({cfg.d_model}, 1.0f);
        lp.w_qkv = normal_init({cfg.qkv_dim(), cfg.d_model}, std, seed, pre + "w_qkv");
        lp.w_o = normal_init({cfg.d_model, cfg.d_model}, std, seed, pre + "w_o");
        lp.ln2_g = Tensor::full({cfg.d_model}, 1.0f);
        lp.w_gate_up = normal_init({cfg.d_ff, cfg.d_model}, std, seed, pre + "w_gate_up");
        lp.w_down = normal_init({cfg.d_model, cfg.d_ff / 2}, std, seed, pre + "w_down");
    }
    p.final_g = Tensor::full({cfg.d_model}, 1.0f);
    p.lm_head = normal_init({cfg.vocab, cfg.d_model}, std, seed, "lm_head");
    return p;
}

StepContext build_step_context(const ModelConfig& cfg, const ModelParams& params,
                               const PrecisionMap& prec) {
    StepContext ctx;
    ctx.fp8 = prec.fp8();
    if (!ctx.fp8) return ctx;
    ctx.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& lp = params.layers[static_cast<std::size_t>(l)];
        auto& q = ctx.layers[static_cast<std::size_t>(l)];
        q.qkv = quantize_absmax(lp.w_qkv.cspan(), lp.w_qkv.shape, F8Kind::E4M3);
        q.o = quantize_absmax(lp.w_o.cspan(), lp.w_o.shape, F8Kind::E4M3);
        q.gate_up = quantize_absmax(lp.w_gate_up.cspan(), lp.w_gate_up.shape, F8Kind::E4M3);
        q.down = quantize_absmax(lp.w_down.cspan(), lp.w_down.shape, F8Kind::E4M3);
        q.qkv_t = transpose_quantize_with_absmax(lp.w_qkv, F8Kind::E4M3, q.qkv.source_absmax);
        q.o_t = transpose_quantize_with_absmax(lp.w_o, F8Kind::E4M3, q.o.source_absmax);
        q.gate_up_t = transpose_quantize_with_absmax(lp.w_gate_up, F8Kind::E4M3, q.gate_up.source_absmax);
        q.down_t = transpose_quantize_with_absmax(lp.w_down, F8Kind::E4M3, q.down.source_absmax);
    }
    return ctx;
}

namespace {

struct Ctx {
    const ModelConfig& cfg;
    const ModelParams& params;
    const StepContext& step;
    const PrecisionMap& prec;
    ChunkSpec chunks;
    std::int64_t batch = 0;
    std::int64_t seq = 0;
    OutRound rnd = OutRound::Bf16;
    std::size_t ws_peak = 0;

    std::int64_t rows() const { return batch * seq; }
};

void check_finite(float v, const char* site, int layer) {
    if (!std::isfinite(v))
        throw std::runtime_error(std::string("non-finite value at ") + site +
                                 (layer >= 0 ? " (layer " + std::to_string(layer) + ")" : ""));
}

// like absmax() but reports nan as a sticky nan instead of throwing, so the
// caller can name the site
float absmax_or_nan(std::span<const float> t) {
    float m = 0.0f;
    for (const float v : t) {
        const float a = std::fabs(v);
        if (a > m || std::isnan(a)) m = a;
    }
    return m;
}

Tensor linear_fwd(Ctx& c, const Tensor& x, const Tensor& w, const ScaledQuant* wq, float x_absmax) {
    if (c.step.fp8) {
        const auto xq = quantize_with_absmax(x.cspan(), x.shape, F8Kind::E4M3, x_absmax);
        return matmul_tn(xq, *wq, c.rnd);
    }
    return matmul_tn(x, w, c.rnd);
}

// dx = d_out . W, via the TN-only gemm with the pre-transposed weight
Tensor linear_dinput(Ctx& c, const Tensor& d_out, const Tensor& w, const ScaledQuant* wq_t) {
    if (c.step.fp8) {
        const auto dq = quantize_absmax(d_out.cspan(), d_out.shape, c.prec.grad_kind());
        return matmul_tn(dq, *wq_t, c.rnd);
    }
    return matmul_tn(d_out, transpose(w), c.rnd);
}

// dW[o,i] = sum_t d_out[t,o] x[t,i]; both operands need transposition
Tensor linear_dweight(Ctx& c, const Tensor& d_out, const Tensor& x, float x_absmax) {
    if (c.step.fp8) {
        const auto dq_t = transpose_quantize(d_out, c.prec.grad_kind());
        const auto xq_t = transpose_quantize_with_absmax(x, F8Kind::E4M3, x_absmax);
        return matmul_tn(dq_t, xq_t, c.rnd);
    }
    return matmul_tn(transpose(d_out), transpose(x), c.rnd);
}

// rotary positions over the q|k columns of the flat (B*T, qkv_dim) tensor,
// half-split pairing, angles in f32
void rope_apply(Ctx& c, Tensor& qkv, bool backward) {
    const int hd = c.cfg.head_dim();
    const int half = hd / 2;
    const std::int64_t q_cols = c.cfg.d_model;
    for (std::int64_t r = 0; r < c.rows(); ++r) {
        const auto t = static_cast<float>(r % c.seq);
        float* row = qkv.row(r);
        auto rotate = [&](float* head) {
            for (int i = 0; i < half; ++i) {
                const float freq = std::pow(10000.0f, -2.0f * static_cast<float>(i) / static_cast<float>(hd));
                const float angle = t * freq;
                const float cs = std::cos(angle), sn = backward ? -std::sin(angle) : std::sin(angle);
                const float a = head[i], b = head[half + i];
                head[i] = round_out(a * cs - b * sn, c.rnd);
                head[half + i] = round_out(a * sn + b * cs, c.rnd);
            }
        };
        for (int h = 0; h < c.cfg.n_heads; ++h) rotate(row + h * hd);
        for (int h = 0; h < c.cfg.n_kv_heads; ++h) rotate(row + q_cols + h * hd);
    }
}

// (B*T, qkv_dim) -> per-sequence (H,T,hd)/(Hkv,T,hd) views and back; pure
// layout movement
void split_heads(const Ctx& c, const Tensor& qkv, std::int64_t b, Tensor& q3, Tensor& k3, Tensor& v3) {
    const int hd = c.cfg.head_dim();
    const std::int64_t H = c.cfg.n_heads, Hkv = c.cfg.n_kv_heads, T = c.seq;
    const std::int64_t kvd = Hkv * hd;
    for (std::int64_t t = 0; t < T; ++t) {
        const float* row = qkv.row(b * T + t);
        for (std::int64_t h = 0; h < H; ++h)
            for (int i = 0; i < hd; ++i) q3.data[(h * T + t) * hd + i] = row[h * hd + i];
        for (std::int64_t h = 0; h < Hkv; ++h)
            for (int i = 0; i < hd; ++i) {
                k3.data[(h * T + t) * hd + i] = row[c.cfg.d_model + h * hd + i];
                v3.data[(h * T + t) * hd + i] = row[c.cfg.d_model + kvd + h * hd + i];
            }
    }
}

void merge_heads(const Ctx& c, const Tensor& att3, std::int64_t b, Tensor& att) {
    const int hd = c.cfg.head_dim();
    const std::int64_t H = c.cfg.n_heads, T = c.seq;
    for (std::int64_t t = 0; t < T; ++t) {
        float* row = att.row(b * T + t);
        for (std::int64_t h = 0; h < H; ++h)
            for (int i = 0; i < hd; ++i) row[h * hd + i] = att3.data[(h * T + t) * hd + i];
    }
}

struct KeepMask {
    bool n1 = true, qkv = true, att = true, r_mid = true, n2 = true, gate_up = true, h = true;

    static KeepMask from(const RecomputeSet& rc) {
        KeepMask k;
        if (rc.has(RecomputeSite::RMSNorm)) k.n1 = k.n2 = false;
        if (rc.has(RecomputeSite::QKV)) k.qkv = false;
        if (rc.has(RecomputeSite::Attention)) k.att = false;
        if (rc.has(RecomputeSite::FFN)) k.gate_up = k.h = false;
        if (rc.has(RecomputeSite::SwiGLU)) k.h = false;
        if (rc.has(RecomputeSite::Block)) k = KeepMask{false, false, false, false, false, false, false};
        return k;
    }
    static KeepMask all() { return {}; }
};

// One transformer block. In recording mode the absmax statistics are written;
// in replay mode they are consumed, so no recompute ever re-reduces.
Tensor block_forward(Ctx& c, int l, const Tensor& r_in, LayerSaved& saved,
                     std::array<float, 4>& stats, bool record_stats, const KeepMask& keep) {
    const auto& lp = c.params.layers[static_cast<std::size_t>(l)];
    const StepContext::LayerQuant* lq = c.step.fp8 ? &c.step.layers[static_cast<std::size_t>(l)] : nullptr;
    const std::int64_t T = c.seq;
    const int hd = c.cfg.head_dim();
    const std::int64_t attn_chunk = c.chunks.attn_chunk_rows > 0 ? c.chunks.attn_chunk_rows : T;

    auto [nr1, n1f] = rmsnorm_residual_fused(nullptr, r_in, lp.ln1_g, 1e-6f, c.rnd);
    if (record_stats) stats[ForwardStats::N1] = n1f.absmax;
    check_finite(n1f.absmax, "rmsnorm1", l);

    Tensor qkv = linear_fwd(c, n1f.value, lp.w_qkv, lq ? &lq->qkv : nullptr, stats[ForwardStats::N1]);
    rope_apply(c, qkv, false);

    Tensor att = Tensor::zeros({c.rows(), c.cfg.d_model});
    Tensor q3 = Tensor::zeros({c.cfg.n_heads, T, hd});
    Tensor k3 = Tensor::zeros({c.cfg.n_kv_heads, T, hd});
    Tensor v3 = Tensor::zeros({c.cfg.n_kv_heads, T, hd});
    for (std::int64_t b = 0; b < c.batch; ++b) {
        split_heads(c, qkv, b, q3, k3, v3);
        const Tensor o3 = sdpa_chunked(q3, k3, v3, attn_chunk, c.rnd);
        merge_heads(c, o3, b, att);
    }
    c.ws_peak = std::max(c.ws_peak, sdpa_workspace_floats(T, attn_chunk));
    if (record_stats) stats[ForwardStats::ATT] = absmax_or_nan(att.cspan());
    check_finite(stats[ForwardStats::ATT], "attention", l);

    Tensor attn_out = linear_fwd(c, att, lp.w_o, lq ? &lq->o : nullptr, stats[ForwardStats::ATT]);

    auto [r_mid, n2f] = rmsnorm_residual_fused(&attn_out, r_in, lp.ln2_g, 1e-6f, c.rnd);
    if (record_stats) stats[ForwardStats::N2] = n2f.absmax;
    check_finite(n2f.absmax, "rmsnorm2", l);

    Tensor gate_up = linear_fwd(c, n2f.value, lp.w_gate_up, lq ? &lq->gate_up : nullptr,
                                stats[ForwardStats::N2]);
    FusedOut hf = swiglu_fused(gate_up, c.rnd);
    if (record_stats) stats[ForwardStats::H] = hf.absmax;
    check_finite(stats[ForwardStats::H], "swiglu", l);

    Tensor ffn_out = linear_fwd(c, hf.value, lp.w_down, lq ? &lq->down : nullptr, stats[ForwardStats::H]);

    Tensor r_out = Tensor::zeros(r_in.shape);
    for (std::size_t i = 0; i < r_out.data.size(); ++i)
        r_out.data[i] = round_out(ffn_out.data[i] + r_mid.data[i], c.rnd);

    if (keep.n1) saved.n1 = std::move(n1f.value);
    if (keep.qkv) saved.qkv = std::move(qkv);
    if (keep.att) saved.att = std::move(att);
    if (keep.r_mid) saved.r_mid = std::move(r_mid);
    if (keep.n2) saved.n2 = std::move(n2f.value);
    if (keep.gate_up) saved.gate_up = std::move(gate_up);
    if (keep.h) saved.h = std::move(hf.value);
    return r_out;
}

} // namespace

ForwardResult model_forward(const ModelConfig& cfg, const ModelParams& params,
                            const StepContext& step, std::span<const std::int32_t> tokens,
                            std::int64_t batch, const RecomputeSet& recompute,
                            const PrecisionMap& prec, const ChunkSpec& chunks, bool with_grads) {
    cfg.validate();
    if (tokens.size() % static_cast<std::size_t>(batch) != 0)
        throw std::invalid_argument("model_forward: token count not divisible by batch");
    const std::int64_t seq = static_cast<std::int64_t>(tokens.size()) / batch - 1;
    if (seq < 1 || seq > cfg.seq_len) throw std::invalid_argument("model_forward: bad sequence length");

    Ctx c{cfg, params, step, prec, chunks, batch, seq, prec.rounding(), 0};
    const KeepMask keep = KeepMask::from(recompute);

    ForwardResult out;
    out.batch = batch;
    out.seq = seq;
    out.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    out.stats.per_layer.assign(static_cast<std::size_t>(cfg.n_layers), {});

    // embedding lookup; inputs are positions 0..T-1 of each sequence
    Tensor r = Tensor::zeros({c.rows(), cfg.d_model});
    std::vector<std::int32_t> inputs(static_cast<std::size_t>(c.rows()));
    std::vector<std::int32_t> targets(static_cast<std::size_t>(c.rows()));
    for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t t = 0; t < seq; ++t) {
            const std::int32_t tok = tokens[static_cast<std::size_t>(b * (seq + 1) + t)];
            const std::int32_t next = tokens[static_cast<std::size_t>(b * (seq + 1) + t + 1)];
            if (tok < 0 || tok >= cfg.vocab || next < 0 || next >= cfg.vocab)
                throw std::out_of_range("model_forward: token id out of range");
            inputs[static_cast<std::size_t>(b * seq + t)] = tok;
            targets[static_cast<std::size_t>(b * seq + t)] = next;
            const float* src = params.embed.row(tok);
            std::copy(src, src + cfg.d_model, r.row(b * seq + t));
        }
    }
    out.tokens = std::move(inputs);
    for (int l = 0; l < cfg.n_layers; ++l) {
        auto& saved = out.layers[static_cast<std::size_t>(l)];
        saved.r_in = r; // the residual kept at every recompute level
        r = block_forward(c, l, saved.r_in, saved, out.stats.per_layer[static_cast<std::size_t>(l)],
                          true, keep);
    }
    out.r_final = std::move(r);

    auto [_, nf] = rmsnorm_residual_fused(nullptr, out.r_final, params.final_g, 1e-6f, c.rnd);
    check_finite(nf.absmax, "final rmsnorm", -1);

    const std::int64_t ce_chunk = chunks.lmhead_chunk_tokens > 0 ? chunks.lmhead_chunk_tokens : c.rows();
    auto ce = fused_cross_entropy_chunked(nf.value, params.lm_head, targets, ce_chunk, with_grads, c.rnd);
    check_finite(ce.loss, "cross entropy", -1);
    out.loss = ce.loss;
    out.d_hidden = std::move(ce.d_hidden);
    out.d_lm_w = std::move(ce.d_lm_w);
    out.workspace_floats_peak = std::max(c.ws_peak, ce.workspace_floats);
    return out;
}

GradMap model_backward(const ModelConfig& cfg, const ModelParams& params, const StepContext& step,
                       ForwardResult& saved, const RecomputeSet& recompute,
                       const PrecisionMap& prec, const ChunkSpec& chunks) {
    Ctx c{cfg, params, step, prec, chunks, saved.batch, saved.seq, prec.rounding(), 0};
    const std::int64_t T = c.seq;
    const int hd = cfg.head_dim();
    const std::int64_t attn_chunk = chunks.attn_chunk_rows > 0 ? chunks.attn_chunk_rows : T;
    GradMap grads;

    grads["lm_head"] = std::move(saved.d_lm_w);

    // final norm backward (plain rmsnorm: no incoming residual-stream grad)
    auto fin = rmsnorm_residual_backward(saved.r_final, params.final_g, 1e-6f, saved.d_hidden,
                                         nullptr, c.rnd);
    grads["final_g"] = std::move(fin.d_gamma);
    Tensor d_r = std::move(fin.d_input);

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        auto& sv = saved.layers[static_cast<std::size_t>(l)];
        auto& st = saved.stats.per_layer[static_cast<std::size_t>(l)];
        if (!sv.n1 || !sv.qkv || !sv.att || !sv.r_mid || !sv.n2 || !sv.gate_up || !sv.h) {
            // replay the block from its input residual; cached stats mean the
            // quantization absmaxes are identical, so the bits are too
            (void)block_forward(c, l, sv.r_in, sv, st, false, KeepMask::all());
        }
        const auto& lp = params.layers[static_cast<std::size_t>(l)];
        const StepContext::LayerQuant* lq =
            step.fp8 ? &step.layers[static_cast<std::size_t>(l)] : nullptr;
        const std::string pre = "layers." + std::to_string(l) + ".";

        // r_out = ffn_out + r_mid
        const Tensor& d_ffn_out = d_r;

        // ffn_out = h . w_down^T
        grads[pre + "w_down"] = linear_dweight(c, d_ffn_out, *sv.h, st[ForwardStats::H]);
        Tensor d_h = linear_dinput(c, d_ffn_out, lp.w_down, lq ? &lq->down_t : nullptr);

        Tensor d_gate_up = swiglu_backward(*sv.gate_up, d_h, c.rnd);

        grads[pre + "w_gate_up"] = linear_dweight(c, d_gate_up, *sv.n2, st[ForwardStats::N2]);
        Tensor d_n2 = linear_dinput(c, d_gate_up, lp.w_gate_up, lq ? &lq->gate_up_t : nullptr);

        // r_mid = attn_out + r_in, n2 = rmsnorm(r_mid); d_r carries the grad
        // arriving at r_mid from the residual stream
        auto g2 = rmsnorm_residual_backward(*sv.r_mid, lp.ln2_g, 1e-6f, d_n2, &d_r, c.rnd);
        grads[pre + "ln2_g"] = std::move(g2.d_gamma);
        Tensor& d_attn_out = g2.d_input; // also the residual-stream grad toward r_in

        grads[pre + "w_o"] = linear_dweight(c, d_attn_out, *sv.att, st[ForwardStats::ATT]);
        Tensor d_att = linear_dinput(c, d_attn_out, lp.w_o, lq ? &lq->o_t : nullptr);

        // attention backward per sequence, then undo the rotation
        Tensor d_qkv = Tensor::zeros({c.rows(), cfg.qkv_dim()});
        Tensor q3 = Tensor::zeros({cfg.n_heads, T, hd});
        Tensor k3 = Tensor::zeros({cfg.n_kv_heads, T, hd});
        Tensor v3 = Tensor::zeros({cfg.n_kv_heads, T, hd});
        Tensor go3 = Tensor::zeros({cfg.n_heads, T, hd});
        for (std::int64_t b = 0; b < c.batch; ++b) {
            split_heads(c, *sv.qkv, b, q3, k3, v3);
            for (std::int64_t t = 0; t < T; ++t) {
                const float* row = d_att.row(b * T + t);
                for (std::int64_t h = 0; h < cfg.n_heads; ++h)
                    for (int i = 0; i < hd; ++i) go3.data[(h * T + t) * hd + i] = row[h * hd + i];
            }
            const auto ag = sdpa_chunked_backward(q3, k3, v3, go3, attn_chunk, c.rnd);
            const std::int64_t kvd = static_cast<std::int64_t>(cfg.n_kv_heads) * hd;
            for (std::int64_t t = 0; t < T; ++t) {
                float* drow = d_qkv.row(b * T + t);
                for (std::int64_t h = 0; h < cfg.n_heads; ++h)
                    for (int i = 0; i < hd; ++i) drow[h * hd + i] = ag.dq.data[(h * T + t) * hd + i];
                for (std::int64_t h = 0; h < cfg.n_kv_heads; ++h)
                    for (int i = 0; i < hd; ++i) {
                        drow[cfg.d_model + h * hd + i] = ag.dk.data[(h * T + t) * hd + i];
                        drow[cfg.d_model + kvd + h * hd + i] = ag.dv.data[(h * T + t) * hd + i];
                    }
            }
        }
        rope_apply(c, d_qkv, true); // inverse rotation on dq|dk

        grads[pre + "w_qkv"] = linear_dweight(c, d_qkv, *sv.n1, st[ForwardStats::N1]);
        Tensor d_n1 = linear_dinput(c, d_qkv, lp.w_qkv, lq ? &lq->qkv_t : nullptr);

        // n1 = rmsnorm(r_in); residual-stream grad toward r_in rides along
        auto g1 = rmsnorm_residual_backward(sv.r_in, lp.ln1_g, 1e-6f, d_n1, &d_attn_out, c.rnd);
        grads[pre + "ln1_g"] = std::move(g1.d_gamma);
        d_r = std::move(g1.d_input);
    }

    grads["embed"] = embedding_backward_sorted(saved.tokens, d_r, cfg.vocab);
    if (c.rnd == OutRound::Bf16)
        for (auto& v : grads["embed"].data) v = bf16_round(v);
    return grads;
}

void GradAccumulator::accumulate(const GradMap& grads, std::uint64_t micro_step) {
    for (const auto& [name, g] : grads) {
        auto it = bufs_.find(name);
        if (it == bufs_.end()) {
            it = bufs_.emplace(name, Tensor::zeros(g.shape)).first;
        }
        Tensor& buf = it->second;
        if (f32_mode_) {
            for (std::size_t i = 0; i < buf.data.size(); ++i) buf.data[i] += g.data[i];
        } else {
            const std::uint64_t stream = fnv1a64("gradaccum/" + name);
            const std::uint64_t base = micro_step * static_cast<std::uint64_t>(buf.numel());
            for (std::size_t i = 0; i < buf.data.size(); ++i)
                buf.data[i] = stochastic_round_bf16(buf.data[i] + g.data[i], {seed_, stream, base + i});
        }
    }
}

GradMap GradAccumulator::take() {
    GradMap out = std::move(bufs_);
    bufs_.clear();
    return out;
}

std::vector<LmHeadEvent> schedule_lmhead_backward(int workers, int ga_steps, int n_chunks) {
    if (workers < 1 || ga_steps < 1 || n_chunks < 1)
        throw std::invalid_argument("schedule_lmhead_backward: bad arguments");
    std::vector<LmHeadEvent> ev;
    for (int step = 1; step <= ga_steps; ++step) {
        for (int chunk = 1; chunk <= n_chunks; ++chunk) {
            // weight grad first so its send can overlap the input-grad matmul
            ev.push_back({LmHeadEvent::Kind::WeightGradMatmul, step, chunk});
            const bool last = step == ga_steps && chunk == n_chunks;
            if (workers > 1 && last) ev.push_back({LmHeadEvent::Kind::GradSendStart, step, chunk});
            ev.push_back({LmHeadEvent::Kind::InputGradMatmul, step, chunk});
            if (workers > 1 && last) ev.push_back({LmHeadEvent::Kind::GradSyncDone, step, chunk});
        }
    }
    return ev;
}

} // namespace qtrain
