#include "cpgg/checkpoint.hpp"

#include "cpgg/binary_io.hpp"
#include "cpgg/csv.hpp"

#include <fstream>
#include <limits>
#include <stdexcept>

namespace cpgg {

using namespace binio;

namespace {

std::string shape_string(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

std::string read_string(std::istream& is, size_t n) {
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw std::runtime_error("checkpoint: truncated");
  return s;
}

}  // namespace

bool Checkpoint::has(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.first == name) return true;
  return false;
}

const Tensor<float>& Checkpoint::tensor(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.first == name) return t.second;
  throw std::runtime_error("checkpoint has no tensor '" + name + "'");
}

void Checkpoint::put(const std::string& name, Tensor<float> value) {
  for (auto& t : tensors) {
    if (t.first == name) {
      t.second = std::move(value);
      return;
    }
  }
  tensors.emplace_back(name, std::move(value));
}

void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  put_magic(os, "CPGW");
  put_le<uint32_t>(os, kCheckpointVersion);
  put_le<uint32_t>(os, static_cast<uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    if (name.size() > std::numeric_limits<uint16_t>::max()) throw std::invalid_argument("tensor name too long");
    put_le<uint16_t>(os, static_cast<uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_le<uint8_t>(os, static_cast<uint8_t>(t.rank()));
    for (Index e : t.shape()) put_le<uint32_t>(os, static_cast<uint32_t>(e));
    for (Index i = 0; i < t.size(); ++i) put_f32(os, t[i]);
  }
  put_le<uint32_t>(os, static_cast<uint32_t>(ck.metadata.size()));
  for (const auto& [k, v] : ck.metadata) {
    put_le<uint16_t>(os, static_cast<uint16_t>(k.size()));
    os.write(k.data(), static_cast<std::streamsize>(k.size()));
    put_le<uint32_t>(os, static_cast<uint32_t>(v.size()));
    os.write(v.data(), static_cast<std::streamsize>(v.size()));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed");
}

Checkpoint read_checkpoint(std::istream& is) {
  expect_magic(is, "CPGW", "checkpoint");
  const auto version = get_le<uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                             std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  const auto count = get_le<uint32_t>(is);
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = read_string(is, get_le<uint16_t>(is));
    const auto rank = get_le<uint8_t>(is);
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<Index>(get_le<uint32_t>(is));
    Tensor<float> t(shape);
    for (Index j = 0; j < t.size(); ++j) t[j] = get_f32(is);
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  const auto meta = get_le<uint32_t>(is);
  for (uint32_t i = 0; i < meta; ++i) {
    std::string k = read_string(is, get_le<uint16_t>(is));
    ck.metadata[k] = read_string(is, get_le<uint32_t>(is));
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  auto out = open_for_write(path, std::ios::binary | std::ios::trunc);
  write_checkpoint(out, ck);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  try {
    return read_checkpoint(in);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void store_params(Checkpoint& ck, const ParamStore<float>& params, const std::string& prefix) {
  for (const auto& [name, v] : params.entries()) ck.put(prefix + name, v.value());
}

void restore_params(const Checkpoint& ck, ParamStore<float>& params, const std::string& prefix) {
  for (auto& [name, v] : params.entries()) {
    const Tensor<float>& t = ck.tensor(prefix + name);
    if (t.shape() != v.shape()) {
      throw std::runtime_error("checkpoint tensor '" + prefix + name + "' has shape " + shape_string(t.shape()) +
                               ", model expects " + shape_string(v.shape()));
    }
    v.mutable_value() = t;
  }
}

void store_optimizer(Checkpoint& ck, AdamW<float>& opt, const ParamStore<float>& params) {
  const auto& entries = params.entries();
  for (size_t i = 0; i < entries.size(); ++i) {
    ck.put("adam.m/" + entries[i].first, opt.first_moments()[i]);
    ck.put("adam.v/" + entries[i].first, opt.second_moments()[i]);
  }
  ck.metadata["adam.step"] = std::to_string(opt.step_count());
}

void restore_optimizer(const Checkpoint& ck, AdamW<float>& opt, const ParamStore<float>& params) {
  const auto& entries = params.entries();
  for (size_t i = 0; i < entries.size(); ++i) {
    opt.first_moments()[i] = ck.tensor("adam.m/" + entries[i].first);
    opt.second_moments()[i] = ck.tensor("adam.v/" + entries[i].first);
  }
  auto it = ck.metadata.find("adam.step");
  if (it == ck.metadata.end()) throw std::runtime_error("checkpoint has no optimizer step count");
  opt.set_step_count(std::stoll(it->second));
}

}  // namespace cpgg
