// Copyright (c) 2026, the qtrain authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container: little-endian file of named f32 tensors behind a JSON
// manifest. Layout: 8-byte magic "QTCKPT01", u64 LE manifest length, the
// manifest (names, shapes, dtype, element offsets), then raw f32 data.

#pragma once

#include "qtrain/tensor.hpp"

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace qtrain {

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors);

std::map<std::string, Tensor> load_checkpoint(const std::string& path);

} // namespace qtrain
