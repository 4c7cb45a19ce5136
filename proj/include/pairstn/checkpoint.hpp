#pragma once

#include <cstdint>
#include <string>

#include "pairstn/ranker.hpp"

namespace pairstn {

// Checkpoint layout (little-endian):
//   magic "VNET1"
//   u32 length of the JSON metadata block
//   JSON metadata: variant, dims, epoch, seed, tensor directory
//                  (name / shape / byte offset into the payload)
//   float32 tensor payloads in directory order
// Serialization is canonical: save -> load -> save is byte-identical.
void save_checkpoint(const ScoringNet& net, const std::string& path, int epoch,
                     std::uint64_t seed);

struct LoadedCheckpoint {
  ScoringNet net;
  int epoch = 0;
  std::uint64_t seed = 0;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

// Standalone category-classifier checkpoints use the same container with
// variant "category".
void save_category_checkpoint(const CategoryNet& net, const std::string& path, int epoch,
                              std::uint64_t seed);
CategoryNet load_category_checkpoint(const std::string& path);

}  // namespace pairstn
