#pragma once

#include "cpgg/rng.hpp"
#include "cpgg/tensor.hpp"

#include <array>
#include <string>
#include <vector>

namespace cpgg {

struct FrameSize {
  Index t = 8;
  Index h = 32;
  Index w = 32;
};

/// One cardiac cycle, shape (1, T, H, W), values in [0, 1].
struct Cine {
  Tensor<float> voxels;

  Cine() = default;
  explicit Cine(Tensor<float> v);
  Index frames() const { return voxels.dim(1); }
  Index height() const { return voxels.dim(2); }
  Index width() const { return voxels.dim(3); }
  FrameSize size() const { return {frames(), height(), width()}; }
  float at(Index t, Index y, Index x) const { return voxels[(t * height() + y) * width() + x]; }
};

/// Geometry and appearance of a single-ventricle phantom (units: pixels).
struct PhantomParams {
  double r_ed = 10;   // end-diastolic blood-pool radius
  double r_es = 8;    // end-systolic blood-pool radius
  double wall = 2.5;  // myocardial ring thickness
  double cx = 16, cy = 16;
  double blood = 0.5;
  double myocardium = 0.9;
  double noise = 0.0;  // Gaussian sigma before clipping
  double phase = 0.0;  // cycle phase offset, radians

  double ef_area() const { return 1.0 - (r_es * r_es) / (r_ed * r_ed); }
  bool fits(const FrameSize& size) const;
};

inline constexpr double kBackgroundIntensity = 0.05;
/// Intensity band that classifies a voxel as blood pool.
inline constexpr double kBloodBandLow = 0.3;
inline constexpr double kBloodBandHigh = 0.7;
/// Reduced-ejection-fraction threshold defining the binary label.
inline constexpr double kReducedEfThreshold = 0.45;

PhantomParams sample_params(Rng& rng, const FrameSize& size);

/// Blood-pool radius of frame t: r_ed at phase 0, r_es half a cycle later.
double blood_pool_radius(const PhantomParams& p, Index t, Index frames);

Cine render_cine(const PhantomParams& p, const FrameSize& size, Rng& noise_rng);

inline constexpr int kPhenotypeCount = 8;
const std::array<std::string, kPhenotypeCount>& phenotype_names();
enum PhenotypeIndex { kEda = 0, kEsa, kEfArea, kWall, kCenterX, kCenterY, kNoise, kPhase };

struct Measurement {
  std::vector<double> values;  // ordered as phenotype_names()
  bool valid = false;
  std::vector<Index> frame_areas;
};

/// Segments the blood pool in every frame by flood-filling the intensity
/// band from inside the bright ring, then derives the phenotype vector.
Measurement measure_phenotypes(const Cine& cine);

/// Per-dimension z-score statistics.
struct Normalization {
  std::vector<double> mean, std;

  static Normalization fit(const std::vector<std::vector<double>>& rows);
  std::vector<double> normalize(const std::vector<double>& x) const;
  std::vector<double> denormalize(const std::vector<double>& z) const;
  size_t dim() const { return mean.size(); }
};

}  // namespace cpgg
