#pragma once

#include "cpgg/nn.hpp"

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace cpgg {

// "CPGW" | version u32 | tensor count u32 | per tensor: name length u16,
// name, rank u8, extents u32[rank], f32 data | metadata count u32 | per
// entry: key length u16, key, value length u32, value. Little-endian.

inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  std::map<std::string, std::string> metadata;

  bool has(const std::string& name) const;
  const Tensor<float>& tensor(const std::string& name) const;
  void put(const std::string& name, Tensor<float> value);
};

void write_checkpoint(std::ostream& os, const Checkpoint& ck);
Checkpoint read_checkpoint(std::istream& is);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Parameter values under their store names, prefixed.
void store_params(Checkpoint& ck, const ParamStore<float>& params, const std::string& prefix = "");
/// Copies every parameter back; a missing name or shape mismatch throws.
void restore_params(const Checkpoint& ck, ParamStore<float>& params, const std::string& prefix = "");

/// Adam moments as "adam.m/<name>" and "adam.v/<name>" plus the step count.
void store_optimizer(Checkpoint& ck, AdamW<float>& opt, const ParamStore<float>& params);
void restore_optimizer(const Checkpoint& ck, AdamW<float>& opt, const ParamStore<float>& params);

}  // namespace cpgg
