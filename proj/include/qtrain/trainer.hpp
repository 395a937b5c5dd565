// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic training loop over the synthetic corpus: gradient
// accumulation, clipping, (sharded) AdamW, metrics CSV and checkpointing.
// Multi-worker runs are simulated data-parallel in lockstep; cross-worker
// gradient reduction follows the documented ascending-worker order.

#pragma once

#include "qtrain/manifest.hpp"

#include <string>
#include <vector>

namespace qtrain {

struct StepMetrics {
    int step = 0;
    std::int64_t tokens = 0; // cumulative
    float train_loss = 0.0f;
    float val_loss = 0.0f;
    float grad_norm = 0.0f;
    double sim_time = 0.0; // cumulative modeled seconds
};

struct TrainResult {
    std::vector<StepMetrics> metrics;
    float initial_train_loss = 0.0f;
    float final_train_loss = 0.0f;
    float final_val_loss = 0.0f;
    ModelParams params;  // final state, for checkpointing
    OptimState optimizer;
};

TrainResult run_training(const RunManifest& m);

/// Fixed-format CSV (deterministic bytes for a deterministic run).
std::string metrics_to_csv(const TrainResult& r);

/// Convenience wrapper: train, write the CSV and checkpoint per the manifest.
TrainResult run_training_to_files(const RunManifest& m);

} // namespace qtrain
