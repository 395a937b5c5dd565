// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0

#include "qtrain/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace qtrain {

NamedTensors named_params(ModelParams& p) {
    NamedTensors out;
    for_each_param(p, [&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
    return out;
}

void OptimState::ensure_slots(const NamedTensors& p) {
    for (const auto& [name, t] : p)
        if (!slots.count(name))
            slots.emplace(name, std::make_pair(Tensor::zeros(t->shape), Tensor::zeros(t->shape)));
}

namespace {

struct UpdateCtx {
    const AdamWHyper& h;
    bool bf16_moments;
    bool bf16_params;
    std::uint64_t seed;
    std::int64_t step; // 1-based step being applied
    float bc1, bc2;    // bias corrections
};

// elementwise update over [lo, hi); keys use global element indices so any
// sharding produces the same bits
void update_range(const UpdateCtx& c, const std::string& name, Tensor& p, Tensor& m, Tensor& v,
                  const Tensor& g, float grad_scale, std::int64_t lo, std::int64_t hi) {
    const std::uint64_t sm = fnv1a64("adamw/" + name + "/m");
    const std::uint64_t sv = fnv1a64("adamw/" + name + "/v");
    const std::uint64_t sw = fnv1a64("adamw/" + name + "/w");
    const auto numel = static_cast<std::uint64_t>(p.numel());
    const std::uint64_t base = static_cast<std::uint64_t>(c.step - 1) * numel;
    for (std::int64_t i = lo; i < hi; ++i) {
        const auto iu = static_cast<std::size_t>(i);
        const float gi = g.data[iu] * grad_scale;
        if (!std::isfinite(gi)) throw std::runtime_error("adamw_step: non-finite gradient in " + name);
        const float m_new = c.h.beta1 * m.data[iu] + (1.0f - c.h.beta1) * gi;
        const float v_new = c.h.beta2 * v.data[iu] + (1.0f - c.h.beta2) * gi * gi;
        const float mhat = m_new / c.bc1;
        const float vhat = v_new / c.bc2;
        const float upd = mhat / (std::sqrt(vhat) + c.h.eps) + c.h.weight_decay * p.data[iu];
        const float p_new = p.data[iu] - c.h.lr * upd;
        const std::uint64_t ctr = base + static_cast<std::uint64_t>(i);
        m.data[iu] = c.bf16_moments ? stochastic_round_bf16(m_new, {c.seed, sm, ctr}) : m_new;
        v.data[iu] = c.bf16_moments ? stochastic_round_bf16(v_new, {c.seed, sv, ctr}) : v_new;
        p.data[iu] = c.bf16_params ? stochastic_round_bf16(p_new, {c.seed, sw, ctr}) : p_new;
    }
}

UpdateCtx make_ctx(OptimState& st) {
    const std::int64_t step = st.step_count + 1;
    return UpdateCtx{st.hyper,
                     st.moments == MomentPrecision::BF16_SR,
                     st.params == ParamPrecision::BF16_SR,
                     st.seed,
                     step,
                     1.0f - std::pow(st.hyper.beta1, static_cast<float>(step)),
                     1.0f - std::pow(st.hyper.beta2, static_cast<float>(step))};
}

} // namespace

void adamw_step(OptimState& st, const NamedTensors& params, const GradMap& grads,
                float grad_scale) {
    st.ensure_slots(params);
    const UpdateCtx c = make_ctx(st);
    for (const auto& [name, p] : params) {
        const auto git = grads.find(name);
        if (git == grads.end()) continue;
        auto& [m, v] = st.slots.at(name);
        update_range(c, name, *p, m, v, git->second, grad_scale, 0, p->numel());
    }
    st.step_count += 1;
}

double grad_norm_block_partials(const Tensor& g, std::int64_t lo, std::int64_t hi) {
    double total = 0.0;
    for (std::int64_t b = lo; b < hi; b += kShardAlign) {
        const std::int64_t end = std::min(b + kShardAlign, hi);
        double partial = 0.0;
        for (std::int64_t i = b; i < end; ++i) {
            const double x = g.data[static_cast<std::size_t>(i)];
            partial += x * x;
        }
        total += partial;
    }
    return total;
}

double global_grad_norm(const GradMap& grads) {
    double ssq = 0.0;
    for (const auto& [name, g] : grads) ssq += grad_norm_block_partials(g, 0, g.numel());
    return std::sqrt(ssq);
}

float clip_scale(double norm, float max_norm) {
    if (max_norm <= 0.0f || norm <= static_cast<double>(max_norm)) return 1.0f;
    return static_cast<float>(static_cast<double>(max_norm) / norm);
}

void sharded_adamw_step(WorkerGroup& group, OptimState& st, const NamedTensors& params,
                        const GradMap& grads, float grad_scale, bool threaded) {
    const int W = group.size();
    if (W == 1) {
        adamw_step(st, params, grads, grad_scale);
        return;
    }
    st.ensure_slots(params);
    const UpdateCtx c = make_ctx(st);

    // collect the update plan first so workers can iterate deterministically
    struct Item {
        std::string name;
        Tensor* p;
        Tensor* m;
        Tensor* v;
        const Tensor* g;
        ShardLayout layout;
    };
    std::vector<Item> items;
    for (const auto& [name, p] : params) {
        const auto git = grads.find(name);
        if (git == grads.end()) continue;
        auto& [m, v] = st.slots.at(name);
        items.push_back({name, p, &m, &v, &git->second, shard_layout(p->numel(), W)});
    }

    // each worker updates only its slice; slices are disjoint aligned ranges
    auto update_slice = [&](int w) {
        for (auto& it : items) {
            const std::int64_t lo = std::min<std::int64_t>(w * it.layout.per_worker, it.p->numel());
            const std::int64_t hi =
                std::min<std::int64_t>((w + 1) * it.layout.per_worker, it.p->numel());
            if (lo < hi) update_range(c, it.name, *it.p, *it.m, *it.v, *it.g, grad_scale, lo, hi);
        }
    };
    if (threaded) {
        group.run(update_slice);
    } else {
        for (int w = 0; w < W; ++w) update_slice(w);
    }

    // re-broadcast: gather each worker's padded slice back into full tensors
    for (auto& it : items) {
        std::vector<Tensor> slices;
        slices.reserve(static_cast<std::size_t>(W));
        for (int w = 0; w < W; ++w) {
            Tensor s = Tensor::zeros({it.layout.per_worker});
            const std::int64_t lo = std::min<std::int64_t>(w * it.layout.per_worker, it.p->numel());
            const std::int64_t hi =
                std::min<std::int64_t>((w + 1) * it.layout.per_worker, it.p->numel());
            for (std::int64_t i = lo; i < hi; ++i)
                s.data[static_cast<std::size_t>(i - w * it.layout.per_worker)] =
                    it.p->data[static_cast<std::size_t>(i)];
            slices.push_back(std::move(s));
        }
        const auto gathered = all_gather_tensors(group, slices, threaded);
        for (int w = 1; w < W; ++w)
            if (gathered[static_cast<std::size_t>(w)].data != gathered[0].data)
                throw std::runtime_error("sharded_adamw_step: workers disagree after gather");
        for (std::int64_t i = 0; i < it.p->numel(); ++i)
            it.p->data[static_cast<std::size_t>(i)] = gathered[0].data[static_cast<std::size_t>(i)];
    }
    st.step_count += 1;
}

} // namespace qtrain
