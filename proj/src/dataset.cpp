#include "cpgg/dataset.hpp"

#include "cpgg/binary_io.hpp"
#include "cpgg/csv.hpp"
#include "cpgg/parallel.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>

namespace cpgg {

namespace fs = std::filesystem;

void write_cine(std::ostream& os, const Tensor<float>& voxels) {
  if (voxels.rank() != 4) throw ShapeError("cine container needs (C,T,H,W), got " + shape_str(voxels.shape()));
  binio::put_magic(os, "CPGC");
  binio::put_le<uint32_t>(os, kCineContainerVersion);
  for (int a = 0; a < 4; ++a) binio::put_le<uint32_t>(os, static_cast<uint32_t>(voxels.dim(a)));
  binio::put_le<uint8_t>(os, 0);
  for (float v : voxels.values()) binio::put_f32(os, v);
}

Tensor<float> read_cine(std::istream& is) {
  binio::expect_magic(is, "CPGC", "cine container");
  const auto version = binio::get_le<uint32_t>(is);
  if (version != kCineContainerVersion) {
    throw std::runtime_error("cine container version " + std::to_string(version) + " unsupported (expected " +
                             std::to_string(kCineContainerVersion) + ")");
  }
  Shape shape(4);
  for (auto& e : shape) e = binio::get_le<uint32_t>(is);
  const auto dtype = binio::get_le<uint8_t>(is);
  if (dtype != 0) throw std::runtime_error("cine container dtype " + std::to_string(dtype) + " unsupported");
  Tensor<float> t(shape);
  for (auto& v : t.values()) v = binio::get_f32(is);
  return t;
}

std::vector<std::pair<uint64_t, Tensor<float>>> read_cine_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::pair<uint64_t, Tensor<float>>> out;
  while (in.peek() != std::char_traits<char>::eof()) {
    const auto offset = static_cast<uint64_t>(in.tellg());
    out.emplace_back(offset, read_cine(in));
  }
  return out;
}

std::vector<uint64_t> write_cine_file(const fs::path& path, const std::vector<Tensor<float>>& records) {
  auto out = open_for_write(path, std::ios::out | std::ios::trunc | std::ios::binary);
  std::vector<uint64_t> offsets;
  for (const auto& r : records) {
    offsets.push_back(static_cast<uint64_t>(out.tellp()));
    write_cine(out, r);
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
  return offsets;
}

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw std::runtime_error("unknown split '" + s + "'");
}

std::vector<Index> Dataset::ids_in(Split s) const {
  std::vector<Index> ids;
  for (const auto& r : manifest)
    if (r.split == s && r.label >= 0) ids.push_back(r.id);
  return ids;
}

std::vector<Index> balanced_subset(const std::vector<ManifestRow>& manifest, uint64_t seed) {
  Rng key(seed, 0xC1A55);
  std::vector<std::pair<uint64_t, Index>> pos, neg;
  for (const auto& r : manifest) {
    if (r.label < 0) continue;
    Rng h = key.derive(static_cast<uint64_t>(r.id));
    (r.label == 1 ? pos : neg).emplace_back(h.next_u64(), r.id);
  }
  std::sort(pos.begin(), pos.end());
  std::sort(neg.begin(), neg.end());
  const size_t k = std::min(pos.size(), neg.size());
  std::vector<Index> ids;
  for (size_t i = 0; i < k; ++i) {
    ids.push_back(pos[i].second);
    ids.push_back(neg[i].second);
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

Dataset build_dataset(const DatasetOptions& options) {
  if (options.n < 10) throw std::invalid_argument("n must be ≥ 10");
  const auto n = static_cast<size_t>(options.n);
  Dataset data;
  data.size = options.size;
  data.cines.resize(n);
  data.phenotypes.resize(n);
  std::vector<int> valid(n, 0);
  const Rng root(options.seed);
  parallel_for(n, [&](size_t i) {
    Rng rng = root.derive(i);
    PhantomParams p = sample_params(rng, options.size);
    Rng noise = rng.derive(1);
    data.cines[i] = render_cine(p, options.size, noise);
    Measurement m = measure_phenotypes(data.cines[i]);
    data.phenotypes[i] = m.values;
    valid[i] = m.valid ? 1 : 0;
  });

  std::vector<Index> perm(n);
  std::iota(perm.begin(), perm.end(), Index{0});
  Rng split_rng = root.derive(0x5B117);
  split_rng.shuffle(perm);
  const size_t n_train = n * 8 / 10, n_val = n / 10;
  std::vector<Split> split(n);
  for (size_t k = 0; k < n; ++k) {
    split[static_cast<size_t>(perm[k])] = k < n_train ? Split::kTrain : (k < n_train + n_val ? Split::kVal : Split::kTest);
  }

  const uint64_t record_bytes = 25 + 4 * static_cast<uint64_t>(options.size.t * options.size.h * options.size.w);
  std::vector<std::vector<double>> train_rows;
  for (size_t i = 0; i < n; ++i) {
    ManifestRow row;
    row.id = static_cast<Index>(i);
    row.split = split[i];
    row.label = valid[i] ? (data.phenotypes[i][kEfArea] < kReducedEfThreshold ? 1 : 0) : -1;
    row.file = "cines.cpgc";
    row.offset = record_bytes * i;
    data.manifest.push_back(row);
    if (row.split == Split::kTrain && valid[i]) train_rows.push_back(data.phenotypes[i]);
  }
  data.norm = Normalization::fit(train_rows);
  data.classification_ids = balanced_subset(data.manifest, options.seed);
  return data;
}

void write_dataset(const Dataset& data, const fs::path& dir) {
  fs::create_directories(dir);
  std::vector<Tensor<float>> records;
  for (const auto& c : data.cines) records.push_back(c.voxels);
  const auto offsets = write_cine_file(dir / "cines.cpgc", records);

  {
    auto out = open_for_write(dir / "phenotypes.csv");
    out << "id";
    for (const auto& name : phenotype_names()) out << ',' << name;
    out << '\n';
    for (size_t i = 0; i < data.phenotypes.size(); ++i) {
      out << i;
      for (double v : data.phenotypes[i]) out << ',' << format_number(v);
      out << '\n';
    }
  }
  {
    auto out = open_for_write(dir / "manifest.csv");
    out << "id,split,label,file,offset\n";
    for (size_t i = 0; i < data.manifest.size(); ++i) {
      const auto& r = data.manifest[i];
      if (r.offset != offsets[i]) throw std::logic_error("manifest offset disagrees with container layout");
      out << r.id << ',' << split_name(r.split) << ',' << r.label << ',' << r.file << ',' << r.offset << '\n';
    }
  }
  {
    auto out = open_for_write(dir / "normalization.csv");
    out << "name,mean,std\n";
    for (size_t j = 0; j < data.norm.dim(); ++j) {
      out << phenotype_names()[j] << ',' << format_number(data.norm.mean[j]) << ',' << format_number(data.norm.std[j])
          << '\n';
    }
  }
  {
    auto out = open_for_write(dir / "classification.csv");
    out << "id,label\n";
    for (Index id : data.classification_ids) out << id << ',' << data.manifest[static_cast<size_t>(id)].label << '\n';
  }
}

Dataset load_dataset(const fs::path& dir) {
  Dataset data;
  const CsvTable manifest = read_csv(dir / "manifest.csv");
  const size_t c_id = manifest.column("id"), c_split = manifest.column("split"), c_label = manifest.column("label"),
               c_file = manifest.column("file"), c_off = manifest.column("offset");
  for (const auto& row : manifest.rows) {
    ManifestRow r;
    r.id = std::stoll(row[c_id]);
    r.split = parse_split(row[c_split]);
    r.label = std::stoi(row[c_label]);
    r.file = row[c_file];
    r.offset = std::stoull(row[c_off]);
    data.manifest.push_back(r);
  }

  std::map<std::string, std::map<uint64_t, Tensor<float>>> files;
  for (const auto& r : data.manifest) {
    if (!files.count(r.file)) {
      auto& slot = files[r.file];
      for (auto& [off, t] : read_cine_file(dir / r.file)) slot.emplace(off, std::move(t));
    }
    auto& slot = files[r.file];
    auto it = slot.find(r.offset);
    if (it == slot.end()) throw std::runtime_error("manifest offset " + std::to_string(r.offset) + " not a record start");
    data.cines.emplace_back(it->second);
  }
  if (data.cines.empty()) throw std::runtime_error("empty dataset at " + dir.string());
  data.size = data.cines.front().size();

  const CsvTable ph = read_csv(dir / "phenotypes.csv");
  data.phenotypes.resize(data.manifest.size());
  for (const auto& row : ph.rows) {
    const auto id = static_cast<size_t>(std::stoll(row[0]));
    if (id >= data.phenotypes.size()) throw std::runtime_error("phenotype id out of range");
    for (size_t j = 1; j < row.size(); ++j) data.phenotypes[id].push_back(std::stod(row[j]));
  }

  const CsvTable norm = read_csv(dir / "normalization.csv");
  for (const auto& row : norm.rows) {
    data.norm.mean.push_back(std::stod(row[1]));
    data.norm.std.push_back(std::stod(row[2]));
  }
  const CsvTable cls = read_csv(dir / "classification.csv");
  for (const auto& row : cls.rows) data.classification_ids.push_back(std::stoll(row[0]));
  return data;
}

}  // namespace cpgg
