// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0

#include "qtrain/corpus.hpp"

#include "qtrain/numerics.hpp"

#include <numeric>
#include <stdexcept>

namespace qtrain {

namespace {

std::vector<std::int32_t> seeded_permutation(std::int64_t vocab, std::uint64_t seed) {
    std::vector<std::int32_t> perm(static_cast<std::size_t>(vocab));
    std::iota(perm.begin(), perm.end(), 0);
    const std::uint64_t stream = fnv1a64("corpus/perm");
    for (std::int64_t i = vocab - 1; i > 0; --i) {
        const auto j = static_cast<std::int64_t>(
            rng_uniform({seed, stream, static_cast<std::uint64_t>(i)}) %
            static_cast<std::uint32_t>(i + 1));
        std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    }
    return perm;
}

void fill_sequences(std::vector<std::int32_t>& out, const CorpusSpec& spec,
                    const std::vector<std::int32_t>& perm, std::uint64_t stream, int count) {
    const int stride = spec.seq_len + 1;
    out.resize(static_cast<std::size_t>(count) * stride);
    for (int s = 0; s < count; ++s) {
        std::int32_t tok;
        if (spec.kind == "perm-walk") {
            tok = static_cast<std::int32_t>(rng_uniform({spec.seed, stream, static_cast<std::uint64_t>(s)}) %
                                            static_cast<std::uint32_t>(spec.vocab));
        } else {
            tok = 0;
        }
        for (int t = 0; t < stride; ++t) {
            auto& slot = out[static_cast<std::size_t>(s) * stride + static_cast<std::size_t>(t)];
            if (spec.kind == "perm-walk") {
                slot = tok;
                tok = perm[static_cast<std::size_t>(tok)];
            } else { // uniform
                slot = static_cast<std::int32_t>(
                    rng_uniform({spec.seed, stream + 1,
                                 static_cast<std::uint64_t>(s) * static_cast<std::uint64_t>(stride) +
                                     static_cast<std::uint64_t>(t)}) %
                    static_cast<std::uint32_t>(spec.vocab));
            }
        }
    }
}

} // namespace

Corpus make_corpus(const CorpusSpec& spec) {
    if (spec.kind != "perm-walk" && spec.kind != "uniform")
        throw std::invalid_argument("unknown corpus kind: " + spec.kind);
    if (spec.vocab < 2 || spec.seq_len < 1 || spec.n_train < 1)
        throw std::invalid_argument("degenerate corpus spec");
    Corpus c;
    c.stride = spec.seq_len + 1;
    const auto perm = seeded_permutation(spec.vocab, spec.seed);
    fill_sequences(c.train, spec, perm, fnv1a64("corpus/train"), spec.n_train);
    fill_sequences(c.val, spec, perm, fnv1a64("corpus/val"), spec.n_val);
    return c;
}

} // namespace qtrain
