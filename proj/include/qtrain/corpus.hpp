// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic token corpora. "perm-walk" is the memorizable one: token t+1 is a
// fixed seeded permutation of token t, so next-token prediction reduces to a
// learnable lookup. "uniform" draws iid tokens (loss floor = ln vocab).

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace qtrain {

struct CorpusSpec {
    std::string kind = "perm-walk"; // perm-walk | uniform
    std::int64_t vocab = 512;
    int seq_len = 128;
    int n_train = 256;
    int n_val = 16;
    std::uint64_t seed = 0;
};

struct Corpus {
    // flattened sequences of (seq_len + 1) tokens: inputs plus the shifted targets
    std::vector<std::int32_t> train;
    std::vector<std::int32_t> val;
    int stride = 0; // seq_len + 1

    std::size_t train_sequences() const { return train.size() / static_cast<std::size_t>(stride); }
};

Corpus make_corpus(const CorpusSpec& spec);

} // namespace qtrain
