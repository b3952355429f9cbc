#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "promuse/tensor.hpp"

namespace promuse {

struct ParamEntry {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

// Named parameter collection. Registration order is preserved and is the
// order used by the optimizer, the checkpoint writer and all hashes, so a
// given construction sequence is fully deterministic.
class ParameterSet {
 public:
  Tensor add(const std::string& name, Tensor t, bool trainable);
  bool has(const std::string& name) const;
  Tensor get(const std::string& name) const;
  const ParamEntry& entry(const std::string& name) const;
  void set_trainable(const std::string& name, bool trainable);

  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  // Marks every parameter whose name starts with `prefix`.
  void set_trainable_by_prefix(const std::string& prefix, bool trainable);

  std::vector<std::string> names_with_prefix(const std::string& prefix) const;
  std::vector<std::string> trainable_names() const;
  std::vector<std::string> frozen_names() const;
  std::int64_t trainable_count() const;  // number of scalar parameters

  // FNV-1a over the raw bytes of the selected tensors, in registration order.
  std::uint64_t hash_frozen() const;
  std::uint64_t hash_trainable() const;
  std::uint64_t hash_all() const;

  void drop_all_grads();

 private:
  std::vector<ParamEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace promuse
