// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0

#include "qtrain/manifest.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace qtrain {

namespace {

using nlohmann::json;

std::vector<std::string> string_list(const json& j) {
    if (j.is_string()) return {j.get<std::string>()};
    return j.get<std::vector<std::string>>();
}

PrecisionMap precision_from_json(const json& j) {
    PrecisionMap p;
    const auto mm = j.value("matmuls", std::string("fp8-e4m3"));
    if (mm == "fp8-e4m3" || mm == "fp8") p.block_matmuls = MatmulPrecision::FP8_E4M3;
    else if (mm == "bf16") p.block_matmuls = MatmulPrecision::BF16;
    else throw std::invalid_argument("manifest: unknown matmul precision " + mm);
    const auto bg = j.value("backward_grads", std::string("e4m3"));
    if (bg == "e4m3") p.backward_grads = GradPrecision::E4M3;
    else if (bg == "e5m2") p.backward_grads = GradPrecision::E5M2;
    else throw std::invalid_argument("manifest: unknown backward grad kind " + bg);
    p.f32_debug = j.value("f32_debug", false);
    return p;
}

json precision_to_json(const PrecisionMap& p) {
    return {{"matmuls", p.block_matmuls == MatmulPrecision::FP8_E4M3 ? "fp8-e4m3" : "bf16"},
            {"backward_grads", p.backward_grads == GradPrecision::E4M3 ? "e4m3" : "e5m2"},
            {"f32_debug", p.f32_debug}};
}

} // namespace

RunManifest manifest_from_json(const std::string& text) {
    const auto j = json::parse(text);
    RunManifest m;
    m.seed = j.value("seed", 0ull);

    if (j.contains("model")) {
        const auto& jm = j.at("model");
        if (jm.is_string()) {
            m.model_preset = jm.get<std::string>();
            const auto& preset = preset_by_name(m.model_preset);
            m.model = preset.cfg;
            m.tied_embeddings = preset.tied_embeddings;
        } else {
            m.model.n_layers = jm.at("n_layers").get<int>();
            m.model.d_model = jm.at("d_model").get<int>();
            m.model.d_ff = jm.at("d_ff").get<int>();
            m.model.n_heads = jm.at("n_heads").get<int>();
            m.model.n_kv_heads = jm.at("n_kv_heads").get<int>();
            m.model.vocab = jm.at("vocab").get<std::int64_t>();
            m.model.seq_len = jm.at("seq_len").get<int>();
            m.tied_embeddings = jm.value("tied_embeddings", false);
        }
        m.model.validate();
    }

    if (j.contains("precision")) m.plan.precision = precision_from_json(j.at("precision"));
    if (j.contains("plan")) {
        const auto& jp = j.at("plan");
        m.plan.micro_batch = jp.value("micro_batch", 1);
        m.plan.ga_steps = jp.value("ga_steps", 1);
        if (jp.contains("recompute")) {
            const auto names = string_list(jp.at("recompute"));
            m.plan.recompute = recompute_set_from_names(names);
        }
        if (jp.contains("offload")) {
            const auto names = string_list(jp.at("offload"));
            m.plan.offload = offload_set_from_names(names);
        }
        m.plan.shard_weights = jp.value("shard_weights", false);
        m.plan.shard_grads = jp.value("shard_grads", false);
        m.plan.lmhead_chunk_tokens = jp.value("lmhead_chunk_tokens", std::int64_t{512});
        m.plan.attn_chunk_rows = jp.value("attn_chunk_rows", std::int64_t{256});
    }

    if (j.contains("optimizer")) {
        const auto& jo = j.at("optimizer");
        m.optim.lr = jo.value("lr", 1e-3f);
        m.optim.beta1 = jo.value("beta1", 0.9f);
        m.optim.beta2 = jo.value("beta2", 0.95f);
        m.optim.eps = jo.value("eps", 1e-8f);
        m.optim.weight_decay = jo.value("weight_decay", 0.0f);
        m.max_grad_norm = jo.value("max_grad_norm", 1.0f);
        const auto mom = jo.value("moments", std::string("f32"));
        if (mom == "f32") m.plan.moments = MomentPrecision::F32;
        else if (mom == "bf16") m.plan.moments = MomentPrecision::BF16_SR;
        else throw std::invalid_argument("manifest: unknown moment precision " + mom);
    }

    if (j.contains("corpus")) {
        const auto& jc = j.at("corpus");
        m.corpus.kind = jc.value("kind", std::string("perm-walk"));
        m.corpus.vocab = jc.value("vocab", m.model.vocab);
        m.corpus.seq_len = jc.value("seq_len", m.model.seq_len);
        m.corpus.n_train = jc.value("n_train", 256);
        m.corpus.n_val = jc.value("n_val", 16);
        m.corpus.seed = jc.value("seed", m.seed);
    } else {
        m.corpus.vocab = m.model.vocab;
        m.corpus.seq_len = m.model.seq_len;
        m.corpus.seed = m.seed;
    }

    m.steps = j.value("steps", 100);
    m.eval_every = j.value("eval_every", 1);
    m.hardware = j.value("hardware", std::string("rtx4090"));
    m.workers = j.value("workers", 1);
    if (j.contains("outputs")) {
        m.metrics_csv = j.at("outputs").value("metrics_csv", std::string("metrics.csv"));
        m.checkpoint_out = j.at("outputs").value("checkpoint", std::string{});
    }
    if (m.corpus.vocab != m.model.vocab)
        throw std::invalid_argument("manifest: corpus vocab must match model vocab");
    if (m.corpus.seq_len > m.model.seq_len)
        throw std::invalid_argument("manifest: corpus sequences longer than the model context");
    return m;
}

std::string manifest_to_json(const RunManifest& m) {
    json j;
    j["seed"] = m.seed;
    if (!m.model_preset.empty()) {
        j["model"] = m.model_preset;
    } else {
        j["model"] = {{"n_layers", m.model.n_layers},   {"d_model", m.model.d_model},
                      {"d_ff", m.model.d_ff},           {"n_heads", m.model.n_heads},
                      {"n_kv_heads", m.model.n_kv_heads}, {"vocab", m.model.vocab},
                      {"seq_len", m.model.seq_len},     {"tied_embeddings", m.tied_embeddings}};
    }
    j["precision"] = precision_to_json(m.plan.precision);
    std::vector<std::string> rc;
    for (const auto& name : {"swiglu", "rmsnorm", "attention", "qkv", "ffn", "block"}) {
        RecomputeSet probe = recompute_set_from_names(std::vector<std::string>{name});
        if ((m.plan.recompute.bits & probe.bits) == probe.bits) rc.push_back(name);
    }
    std::vector<std::string> off;
    if (m.plan.offload.x) off.push_back("x");
    if (m.plan.offload.m) off.push_back("m");
    if (m.plan.offload.v) off.push_back("v");
    if (m.plan.offload.master) off.push_back("master");
    if (m.plan.offload.weights) off.push_back("weights");
    if (m.plan.offload.grads) off.push_back("grads");
    j["plan"] = {{"micro_batch", m.plan.micro_batch},
                 {"ga_steps", m.plan.ga_steps},
                 {"recompute", rc},
                 {"offload", off},
                 {"shard_weights", m.plan.shard_weights},
                 {"shard_grads", m.plan.shard_grads},
                 {"lmhead_chunk_tokens", m.plan.lmhead_chunk_tokens},
                 {"attn_chunk_rows", m.plan.attn_chunk_rows}};
    j["optimizer"] = {{"lr", m.optim.lr},
                      {"beta1", m.optim.beta1},
                      {"beta2", m.optim.beta2},
                      {"eps", m.optim.eps},
                      {"weight_decay", m.optim.weight_decay},
                      {"max_grad_norm", m.max_grad_norm},
                      {"moments", m.plan.moments == MomentPrecision::F32 ? "f32" : "bf16"}};
    j["corpus"] = {{"kind", m.corpus.kind},     {"vocab", m.corpus.vocab},
                   {"seq_len", m.corpus.seq_len}, {"n_train", m.corpus.n_train},
                   {"n_val", m.corpus.n_val},   {"seed", m.corpus.seed}};
    j["steps"] = m.steps;
    j["eval_every"] = m.eval_every;
    j["hardware"] = m.hardware;
    j["workers"] = m.workers;
    j["outputs"] = {{"metrics_csv", m.metrics_csv}, {"checkpoint", m.checkpoint_out}};
    return j.dump(2);
}

RunManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in.good()) throw std::runtime_error("cannot open manifest: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return manifest_from_json(buf.str());
}

} // namespace qtrain
