#pragma once

#include "cpgg/phantom.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace cpgg {

// ---- CPGC cine container -------------------------------------------------
// "CPGC" | version u32 | C,T,H,W u32 | dtype u8 (0 = f32) | voxels, all LE.

inline constexpr uint32_t kCineContainerVersion = 1;

void write_cine(std::ostream& os, const Tensor<float>& voxels);
Tensor<float> read_cine(std::istream& is);
/// Every record of a file of concatenated containers, with byte offsets.
std::vector<std::pair<uint64_t, Tensor<float>>> read_cine_file(const std::filesystem::path& path);
/// Writes records back to back; returns each record's starting offset.
std::vector<uint64_t> write_cine_file(const std::filesystem::path& path, const std::vector<Tensor<float>>& records);

// ---- phantom dataset -----------------------------------------------------

enum class Split { kTrain, kVal, kTest };
const char* split_name(Split s);
Split parse_split(const std::string& s);

struct ManifestRow {
  Index id = 0;
  Split split = Split::kTrain;
  int label = 0;  // 1 = reduced EF, 0 = preserved, -1 = invalid measurement
  std::string file;
  uint64_t offset = 0;
};

struct Dataset {
  FrameSize size;
  std::vector<Cine> cines;
  std::vector<std::vector<double>> phenotypes;  // physical units, measured
  std::vector<ManifestRow> manifest;
  Normalization norm;                       // fitted on the train split
  std::vector<Index> classification_ids;    // balanced reduced-EF subset

  std::vector<Index> ids_in(Split s) const;
};

struct DatasetOptions {
  Index n = 500;
  uint64_t seed = 0;
  FrameSize size{};
};

/// Renders and measures n phantoms; sample i uses the stream derived from
/// (seed, i), so the result does not depend on the thread count.
Dataset build_dataset(const DatasetOptions& options);

/// Writes cines.cpgc, phenotypes.csv, manifest.csv, normalization.csv and
/// classification.csv under dir.
void write_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

/// Equal-size positive/negative subset of valid samples, chosen by a
/// seeded hash of the id.
std::vector<Index> balanced_subset(const std::vector<ManifestRow>& manifest, uint64_t seed);

}  // namespace cpgg
