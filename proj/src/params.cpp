#include "promuse/params.hpp"

#include "promuse/errors.hpp"

namespace promuse {

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

Tensor ParameterSet::add(const std::string& name, Tensor t, bool trainable) {
  if (index_.count(name))
    throw ValueError("ParameterSet: duplicate parameter name '" + name + "'");
  if (!t.defined()) throw ValueError("ParameterSet: undefined tensor for '" + name + "'");
  t.set_requires_grad(trainable);
  index_[name] = entries_.size();
  entries_.push_back(ParamEntry{name, t, trainable});
  return t;
}

bool ParameterSet::has(const std::string& name) const { return index_.count(name) > 0; }

Tensor ParameterSet::get(const std::string& name) const { return entry(name).tensor; }

const ParamEntry& ParameterSet::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end())
    throw ValueError("ParameterSet: unknown parameter '" + name + "'");
  return entries_[it->second];
}

void ParameterSet::set_trainable(const std::string& name, bool trainable) {
  auto it = index_.find(name);
  if (it == index_.end())
    throw ValueError("ParameterSet: unknown parameter '" + name + "'");
  auto& e = entries_[it->second];
  e.trainable = trainable;
  e.tensor.set_requires_grad(trainable);
  if (!trainable) e.tensor.drop_grad();
}

void ParameterSet::set_trainable_by_prefix(const std::string& prefix, bool trainable) {
  for (auto& e : entries_) {
    if (e.name.rfind(prefix, 0) == 0) {
      e.trainable = trainable;
      e.tensor.set_requires_grad(trainable);
      if (!trainable) e.tensor.drop_grad();
    }
  }
}

std::vector<std::string> ParameterSet::names_with_prefix(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& e : entries_)
    if (e.name.rfind(prefix, 0) == 0) out.push_back(e.name);
  return out;
}

std::vector<std::string> ParameterSet::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_)
    if (e.trainable) out.push_back(e.name);
  return out;
}

std::vector<std::string> ParameterSet::frozen_names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_)
    if (!e.trainable) out.push_back(e.name);
  return out;
}

std::int64_t ParameterSet::trainable_count() const {
  std::int64_t n = 0;
  for (const auto& e : entries_)
    if (e.trainable) n += e.tensor.numel();
  return n;
}

namespace {
std::uint64_t hash_entries(const std::vector<ParamEntry>& entries, int mode) {
  // mode: 0 frozen, 1 trainable, 2 all
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& e : entries) {
    if (mode == 0 && e.trainable) continue;
    if (mode == 1 && !e.trainable) continue;
    h = fnv1a64(e.name.data(), e.name.size(), h);
    const auto& v = e.tensor.values();
    h = fnv1a64(v.data(), v.size() * sizeof(double), h);
  }
  return h;
}
}  // namespace

std::uint64_t ParameterSet::hash_frozen() const { return hash_entries(entries_, 0); }
std::uint64_t ParameterSet::hash_trainable() const { return hash_entries(entries_, 1); }
std::uint64_t ParameterSet::hash_all() const { return hash_entries(entries_, 2); }

void ParameterSet::drop_all_grads() {
  for (auto& e : entries_) e.tensor.drop_grad();
}

}  // namespace promuse
