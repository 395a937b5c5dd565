// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0

#include "qtrain/checkpoint.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace qtrain {

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

namespace {
constexpr char kMagic[8] = {'Q', 'T', 'C', 'K', 'P', 'T', '0', '1'};
}

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
    nlohmann::json manifest;
    manifest["byte_order"] = "little";
    manifest["dtype"] = "f32";
    auto& list = manifest["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        list.push_back({{"name", name},
                        {"shape", t->shape},
                        {"dtype", "f32"},
                        {"offset_elems", offset},
                        {"numel", t->numel()}});
        offset += static_cast<std::uint64_t>(t->numel());
    }
    const std::string mtext = manifest.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out.good()) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    out.write(kMagic, sizeof(kMagic));
    const std::uint64_t mlen = mtext.size();
    out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
    out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
    for (const auto& [name, t] : tensors)
        out.write(reinterpret_cast<const char*>(t->data.data()),
                  static_cast<std::streamsize>(t->data.size() * sizeof(float)));
    if (!out.good()) throw std::runtime_error("checkpoint write failed: " + path);
}

std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.good()) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in.good() || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("not a checkpoint file: " + path);
    std::uint64_t mlen = 0;
    in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
    std::string mtext(mlen, '\0');
    in.read(mtext.data(), static_cast<std::streamsize>(mlen));
    const auto manifest = nlohmann::json::parse(mtext);
    if (manifest.at("byte_order") != "little" || manifest.at("dtype") != "f32")
        throw std::runtime_error("unsupported checkpoint layout: " + path);

    std::map<std::string, Tensor> out;
    const std::streampos data_start = in.tellg();
    for (const auto& entry : manifest.at("tensors")) {
        const auto name = entry.at("name").get<std::string>();
        auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
        const auto offset = entry.at("offset_elems").get<std::uint64_t>();
        Tensor t = Tensor::zeros(std::move(shape));
        in.seekg(data_start + static_cast<std::streamoff>(offset * sizeof(float)));
        in.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        if (!in.good()) throw std::runtime_error("truncated checkpoint: " + path);
        out.emplace(name, std::move(t));
    }
    return out;
}

} // namespace qtrain
