#pragma once

#include "cpgg/cine_vae.hpp"
#include "cpgg/mar.hpp"
#include "cpgg/pheno_vae.hpp"

#include <vector>

namespace cpgg {

/// Cumulative known-token counts of a K-step cosine decode.
/// keep[0] = 0, keep[K] = N, and keep[k] = ceil(N (1 - cos(pi k / 2K)))
/// clamped so each step reveals at least one token and leaves at least
/// one for every later step.
struct DecodeSchedule {
  Index tokens = 0;
  std::vector<Index> keep;

  Index steps() const { return static_cast<Index>(keep.size()) - 1; }
  /// Tokens revealed at step k (1-based), n_1..n_K.
  std::vector<Index> counts() const;
};

DecodeSchedule build_decode_schedule(Index tokens, Index steps);

struct GenerationOptions {
  Index decode_steps = 16;
  double cfg_scale = 3.0;
  Index inference_steps = 50;
  /// Clamp on the per-token clean estimate in standardized latent units;
  /// <= 0 disables.
  double x0_clip = 4.0;
};

struct GenerationStats {
  long long mar_passes = 0;
  long long denoiser_evals = 0;
  std::vector<Index> known_after_step;
  std::vector<std::vector<Index>> step_sets;  // token indices revealed per step
};

/// K-step parallel decode of one standardized latent grid. Positions are
/// revealed uniformly at random among the still-masked ones; revealed
/// tokens stay frozen. Everything is keyed on `seed`: the reveal order on
/// one stream and each position's diffusion chain on its own stream.
Tensor<float> generate_latent(const Mar<float>& mar, const std::vector<double>& cond, const GenerationOptions& options,
                              uint64_t seed, GenerationStats* stats = nullptr);

/// The trained pieces needed to go from phenotypes to pixels.
struct Generator {
  const PhenoVae<float>* pheno = nullptr;
  const Normalization* norm = nullptr;
  const CineVae<float>* vae = nullptr;
  const LatentStats* latent_stats = nullptr;
  const Mar<float>* mar = nullptr;
};

struct GeneratedCine {
  Cine cine;
  std::vector<double> phenotypes;  // physical units; the synthetic label
};

/// With `phenotypes` null a condition is drawn from the phenotype VAE.
GeneratedCine generate_cine(const Generator& gen, const std::vector<double>* phenotypes,
                            const GenerationOptions& options, uint64_t seed, GenerationStats* stats = nullptr);

/// Cine i uses seed + i and conditions[i] (or a sampled condition when
/// `conditions` is empty). Runs in parallel; output is thread-count
/// independent.
std::vector<GeneratedCine> generate_cines(const Generator& gen, const std::vector<std::vector<double>>& conditions,
                                          size_t count, const GenerationOptions& options, uint64_t seed);

struct DecodeCost {
  long long mar_passes = 0;
  long long denoiser_evals = 0;
};

/// Expected per-cine counts for N tokens, K decode steps, S diffusion
/// steps and a guidance scale.
DecodeCost expected_decode_cost(Index tokens, Index decode_steps, Index inference_steps, double cfg_scale);

struct BenchRow {
  Index decode_steps = 0;
  long long mar_passes = 0;
  long long denoiser_evals = 0;
  double wall_ms_per_cine = 0;
};

/// Generates `cines` latents per K and reports the measured per-cine
/// counts and wall time.
std::vector<BenchRow> bench_decode(const Mar<float>& mar, const std::vector<Index>& decode_steps,
                                   const GenerationOptions& options, size_t cines, uint64_t seed);

}  // namespace cpgg
