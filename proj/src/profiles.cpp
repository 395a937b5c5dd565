// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0

#include "qtrain/profiles.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace qtrain {

double HardwareProfile::peak(const std::string& precision) const {
    if (precision == "fp8") return peak_flops_fp8;
    if (precision == "bf16") return peak_flops_bf16;
    if (precision == "f32") return peak_flops_f32;
    throw std::invalid_argument("unknown precision in flop breakdown: " + precision);
}

const std::vector<HardwareProfile>& builtin_profiles() {
    static const std::vector<HardwareProfile> profiles = {
        // 16 GiB mid-range card; tensor peaks ~1/3 of the 4090, same PCIe
        {"rtx5060ti", 16ull << 30, 128000000000ull, 94.9e12, 47.4e12, 23.7e12, 448e9, 32e9, false, 1.08, 0.3,
         0.9},
        // 24 GiB gaming flagship
        {"rtx4090", 24ull << 30, 256000000000ull, 330.4e12, 165.2e12, 82.6e12, 1008e9, 32e9, false, 1.03, 0.3,
         0.9},
        // workstation card: p2p capable, zero-copy works well instead
        {"l40s", 48ull << 30, 256000000000ull, 733e12, 362.1e12, 91.6e12, 864e9, 32e9, true, 0.75, 0.9, 0.7},
        // datacenter reference point
        {"h100", 80ull << 30, 1024000000000ull, 1978.9e12, 989.4e12, 66.9e12, 3350e9, 450e9, true, 1.0, 0.9,
         0.9},
        // unified-memory desk box: one 128 GB pool, low bandwidth
        {"dgx_spark", 128000000000ull, 128000000000ull, 250e12, 125e12, 31e12, 300e9, 300e9, false,
         0.7, 0.9, 0.9},
    };
    return profiles;
}

const HardwareProfile& profile_by_name(const std::string& name) {
    for (const auto& p : builtin_profiles())
        if (p.name == name) return p;
    std::ostringstream os;
    os << "unknown hardware profile '" << name << "'; available:";
    for (const auto& p : builtin_profiles()) os << " " << p.name;
    throw std::invalid_argument(os.str());
}

std::string profile_to_json(const HardwareProfile& p) {
    nlohmann::json j;
    j["name"] = p.name;
    j["device_bytes"] = p.device_bytes;
    j["host_bytes"] = p.host_bytes;
    j["peak_flops"] = {{"fp8", p.peak_flops_fp8}, {"bf16", p.peak_flops_bf16}, {"f32", p.peak_flops_f32}};
    j["mem_bandwidth"] = p.mem_bandwidth;
    j["link_bandwidth"] = p.link_bandwidth;
    j["p2p"] = p.p2p;
    j["attainable_fraction"] = p.attainable_fraction;
    j["zero_copy_efficiency"] = p.zero_copy_efficiency;
    j["double_buffer_efficiency"] = p.double_buffer_efficiency;
    return j.dump(2);
}

HardwareProfile profile_from_json(const std::string& json_text) {
    const auto j = nlohmann::json::parse(json_text);
    HardwareProfile p;
    p.name = j.at("name").get<std::string>();
    p.device_bytes = j.at("device_bytes").get<std::uint64_t>();
    p.host_bytes = j.at("host_bytes").get<std::uint64_t>();
    p.peak_flops_fp8 = j.at("peak_flops").at("fp8").get<double>();
    p.peak_flops_bf16 = j.at("peak_flops").at("bf16").get<double>();
    p.peak_flops_f32 = j.at("peak_flops").at("f32").get<double>();
    p.mem_bandwidth = j.at("mem_bandwidth").get<double>();
    p.link_bandwidth = j.at("link_bandwidth").get<double>();
    p.p2p = j.at("p2p").get<bool>();
    p.attainable_fraction = j.at("attainable_fraction").get<double>();
    p.zero_copy_efficiency = j.value("zero_copy_efficiency", 1.0);
    p.double_buffer_efficiency = j.value("double_buffer_efficiency", 1.0);
    return p;
}

HardwareProfile load_profile(const std::string& name_or_path) {
    if (name_or_path.find('/') == std::string::npos &&
        name_or_path.find(".json") == std::string::npos) {
        return profile_by_name(name_or_path);
    }
    std::ifstream in(name_or_path);
    if (!in.good()) throw std::runtime_error("cannot open hardware profile: " + name_or_path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return profile_from_json(buf.str());
}

} // namespace qtrain
