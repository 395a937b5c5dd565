// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major f32 tensor. Storage precision (bf16, fp8) is a property of
// the consumer, not of this type: "bf16" tensors hold f32 values restricted
// to the bf16 grid.

#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace qtrain {

struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::vector<std::int64_t> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
            throw std::invalid_argument("Tensor: shape/data mismatch");
    }

    static std::int64_t numel_of(const std::vector<std::int64_t>& s) {
        std::int64_t n = 1;
        for (const auto d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<std::int64_t> s) {
        const auto n = numel_of(s);
        return Tensor{std::move(s), std::vector<float>(static_cast<std::size_t>(n), 0.0f)};
    }

    static Tensor full(std::vector<std::int64_t> s, float v) {
        const auto n = numel_of(s);
        return Tensor{std::move(s), std::vector<float>(static_cast<std::size_t>(n), v)};
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t dim(std::size_t i) const { return shape.at(i); }
    std::size_t rank() const { return shape.size(); }

    float& at(std::int64_t r, std::int64_t c) { return data[static_cast<std::size_t>(r * shape[1] + c)]; }
    float at(std::int64_t r, std::int64_t c) const { return data[static_cast<std::size_t>(r * shape[1] + c)]; }

    float* row(std::int64_t r) { return data.data() + r * shape.back(); }
    const float* row(std::int64_t r) const { return data.data() + r * shape.back(); }

    std::span<const float> cspan() const { return {data.data(), data.size()}; }
    std::span<float> span() { return {data.data(), data.size()}; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline std::string shape_str(const std::vector<std::int64_t>& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

} // namespace qtrain
