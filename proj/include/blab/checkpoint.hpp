#pragma once

#include <string>
#include <utility>
#include <vector>

#include "blab/tensor.hpp"

namespace blab {

// Binary checkpoint, little-endian:
//   magic "BLAB", version u32, parameter count u32, then per parameter:
//   name length u16 + UTF-8 name, rank u8, extents u32 each, raw f64 data.
// Batch-norm running statistics travel as entries named with the "rs."
// prefix.
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, const Tensor*>>& entries);

std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path);

}  // namespace blab
