// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0
//
// Hardware profiles: device capacities, per-precision peak rates, link
// characteristics. Shipped both as builtin presets and as JSON files under
// profiles/.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace qtrain {

struct HardwareProfile {
    std::string name;
    std::uint64_t device_bytes = 0;
    std::uint64_t host_bytes = 0;
    double peak_flops_fp8 = 0.0;  // dense, FLOP/s
    double peak_flops_bf16 = 0.0;
    double peak_flops_f32 = 0.0;
    double mem_bandwidth = 0.0;  // device memory, bytes/s
    double link_bandwidth = 0.0; // host link, bytes/s per direction
    bool p2p = false;
    // measured fraction of the spec-sheet peak a real matmul reaches
    double attainable_fraction = 1.0;
    // offload-path efficiency factors; consumer boards favour explicit double
    // buffering, workstation boards favour zero-copy
    double zero_copy_efficiency = 1.0;
    double double_buffer_efficiency = 1.0;

    double peak(const std::string& precision) const; // "fp8" | "bf16" | "f32"
};

/// Profiles for the cards the planner models. Peaks are spec-sheet dense
/// rates; attainable fractions come from matmul microbenchmarks.
const std::vector<HardwareProfile>& builtin_profiles();

/// Exact name match against the builtins; throws with the list of available
/// names otherwise.
const HardwareProfile& profile_by_name(const std::string& name);

std::string profile_to_json(const HardwareProfile& p);
HardwareProfile profile_from_json(const std::string& json_text);
HardwareProfile load_profile(const std::string& name_or_path);

} // namespace qtrain
