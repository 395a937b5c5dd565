// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0
//
// Run manifest: one JSON file fully determines a training run. Two runs from
// the same manifest produce byte-identical metrics and checkpoints; --seed
// inside it is the only entropy source.

#pragma once

#include "qtrain/corpus.hpp"
#include "qtrain/memplan.hpp"
#include "qtrain/optim.hpp"

#include <cstdint>
#include <string>

namespace qtrain {

struct RunManifest {
    std::uint64_t seed = 0;
    std::string model_preset; // empty when dims are given inline
    ModelConfig model = ModelConfig::toy();
    bool tied_embeddings = false;
    RunPlan plan;
    AdamWHyper optim;
    float max_grad_norm = 1.0f;
    CorpusSpec corpus;
    int steps = 100;
    int eval_every = 1;
    std::string hardware = "rtx4090";
    int workers = 1;
    std::string metrics_csv = "metrics.csv";
    std::string checkpoint_out; // empty = skip
};

RunManifest manifest_from_json(const std::string& text);
std::string manifest_to_json(const RunManifest& m);
RunManifest load_manifest(const std::string& path);

} // namespace qtrain
