// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0

#include "qtrain/trainer.hpp"

#include "qtrain/checkpoint.hpp"
#include "qtrain/offload.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace qtrain {

namespace {

std::vector<std::int32_t> take_batch(const Corpus& corpus, std::uint64_t microbatch_index,
                                     int micro_batch) {
    const std::size_t n_seq = corpus.train_sequences();
    std::vector<std::int32_t> out;
    out.reserve(static_cast<std::size_t>(micro_batch) * corpus.stride);
    for (int k = 0; k < micro_batch; ++k) {
        const std::size_t s =
            (microbatch_index * static_cast<std::uint64_t>(micro_batch) + k) % n_seq;
        const auto* begin = corpus.train.data() + s * static_cast<std::size_t>(corpus.stride);
        out.insert(out.end(), begin, begin + corpus.stride);
    }
    return out;
}

} // namespace

TrainResult run_training(const RunManifest& m) {
    m.model.validate();
    const Corpus corpus = make_corpus(m.corpus);
    const PrecisionMap prec = m.plan.precision;
    const ChunkSpec chunks{m.plan.lmhead_chunk_tokens, m.plan.attn_chunk_rows};
    const int W = m.workers;
    const HardwareProfile hw = load_profile(m.hardware);

    ModelParams params = init_params(m.model, m.seed);
    OptimState opt;
    opt.hyper = m.optim;
    opt.moments = m.plan.moments;
    opt.params = prec.f32_debug ? ParamPrecision::F32 : ParamPrecision::BF16_SR;
    opt.seed = m.seed;
    WorkerGroup group(W);

    const double step_seconds = estimate_step_time(m.model, m.plan, hw, W, m.tied_embeddings).total;

    // fixed eval batch: the first few validation sequences
    const int eval_seqs = std::min(m.corpus.n_val, 4);
    std::vector<std::int32_t> eval_batch(corpus.val.begin(),
                                         corpus.val.begin() +
                                             static_cast<std::size_t>(eval_seqs) * corpus.stride);

    TrainResult result;
    const float mean_scale = 1.0f / (static_cast<float>(m.plan.ga_steps) * W);
    std::int64_t tokens_seen = 0;
    float last_val = 0.0f;

    for (int step = 0; step < m.steps; ++step) {
        const StepContext sc = build_step_context(m.model, params, prec);

        // one gradient accumulator per worker; reduced in worker order below
        std::vector<GradAccumulator> accs;
        for (int w = 0; w < W; ++w)
            accs.emplace_back(prec.f32_debug, m.seed + static_cast<std::uint64_t>(w));

        double loss_sum = 0.0;
        for (int ga = 0; ga < m.plan.ga_steps; ++ga) {
            for (int w = 0; w < W; ++w) {
                const std::uint64_t mb_index =
                    (static_cast<std::uint64_t>(step) * m.plan.ga_steps + ga) * W +
                    static_cast<std::uint64_t>(w);
                const auto batch = take_batch(corpus, mb_index, m.plan.micro_batch);
                auto fwd = model_forward(m.model, params, sc, batch, m.plan.micro_batch,
                                         m.plan.recompute, prec, chunks);
                loss_sum += fwd.loss;
                auto grads =
                    model_backward(m.model, params, sc, fwd, m.plan.recompute, prec, chunks);
                accs[static_cast<std::size_t>(w)].accumulate(
                    grads, static_cast<std::uint64_t>(step) * m.plan.ga_steps + ga);
                tokens_seen += static_cast<std::int64_t>(m.plan.micro_batch) * m.corpus.seq_len;
            }
        }

        GradMap grads;
        if (W == 1) {
            grads = accs[0].take();
        } else {
            // ascending-worker reduction mirrors the collective's documented order
            grads = accs[0].take();
            for (int w = 1; w < W; ++w) {
                const auto other = accs[static_cast<std::size_t>(w)].take();
                for (auto& [name, g] : grads) {
                    const auto& o = other.at(name);
                    for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += o.data[i];
                }
            }
        }

        const double norm = global_grad_norm(grads) * mean_scale;
        const float clip = clip_scale(norm, m.max_grad_norm);
        const float scale = mean_scale * clip;
        const auto named = named_params(params);
        if (W == 1) adamw_step(opt, named, grads, scale);
        else sharded_adamw_step(group, opt, named, grads, scale, /*threaded=*/false);

        const float train_loss = static_cast<float>(loss_sum / (m.plan.ga_steps * W));
        if (!std::isfinite(train_loss))
            throw std::runtime_error("training diverged: non-finite loss at step " +
                                     std::to_string(step));
        if (step % std::max(1, m.eval_every) == 0) {
            const auto ev = model_forward(m.model, params, sc, eval_batch, eval_seqs,
                                          RecomputeSet::none(), prec, chunks, /*with_grads=*/false);
            last_val = ev.loss;
        }

        StepMetrics sm;
        sm.step = step;
        sm.tokens = tokens_seen;
        sm.train_loss = train_loss;
        sm.val_loss = last_val;
        sm.grad_norm = static_cast<float>(norm);
        sm.sim_time = step_seconds * (step + 1);
        result.metrics.push_back(sm);
        if (step == 0) result.initial_train_loss = train_loss;
    }
    result.final_train_loss = result.metrics.empty() ? 0.0f : result.metrics.back().train_loss;
    result.final_val_loss = last_val;
    result.params = std::move(params);
    result.optimizer = std::move(opt);
    return result;
}

std::string metrics_to_csv(const TrainResult& r) {
    std::string out = "step,tokens,train_loss,val_loss,grad_norm,sim_time\n";
    char line[256];
    for (const auto& m : r.metrics) {
        std::snprintf(line, sizeof(line), "%d,%lld,%.9g,%.9g,%.9g,%.6e\n", m.step,
                      static_cast<long long>(m.tokens), m.train_loss, m.val_loss, m.grad_norm,
                      m.sim_time);
        out += line;
    }
    return out;
}

TrainResult run_training_to_files(const RunManifest& m) {
    TrainResult result = run_training(m);
    {
        std::ofstream csv(m.metrics_csv, std::ios::binary | std::ios::trunc);
        if (!csv.good()) throw std::runtime_error("cannot write metrics csv: " + m.metrics_csv);
        const std::string text = metrics_to_csv(result);
        csv.write(text.data(), static_cast<std::streamsize>(text.size()));
    }
    if (!m.checkpoint_out.empty()) {
        std::vector<std::pair<std::string, const Tensor*>> tensors;
        for_each_param(result.params,
                       [&](const std::string& name, Tensor& t) { tensors.emplace_back(name, &t); });
        // optimizer state ships in the same container
        for (const auto& [name, mv] : result.optimizer.slots) {
            tensors.emplace_back("optim.m." + name, &mv.first);
            tensors.emplace_back("optim.v." + name, &mv.second);
        }
        save_checkpoint(m.checkpoint_out, tensors);
    }
    return result;
}

} // namespace qtrain
