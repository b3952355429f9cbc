#pragma once

#include <cstdint>
#include <string>

#include "promuse/params.hpp"

namespace promuse {

// Binary checkpoint layout (all integers little-endian):
//   magic        7 bytes  "PMUSE1\0"
//   count        u64
//   per entry:
//     name_len   u64
//     name       name_len bytes, UTF-8
//     rank       u64
//     extents    rank x u64
//     trainable  u8
//     values     numel x f64
void save_checkpoint(const ParameterSet& params, const std::string& path);
ParameterSet load_checkpoint(const std::string& path);

// Free-form JSON manifest stored beside a checkpoint (config, seed, hashes).
// Callers build the JSON; these helpers only fix the path convention.
std::string manifest_path_for(const std::string& checkpoint_path);

}  // namespace promuse
