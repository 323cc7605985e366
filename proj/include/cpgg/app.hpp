#pragma once

#include "cpgg/cine_vae.hpp"
#include "cpgg/config.hpp"
#include "cpgg/downstream.hpp"
#include "cpgg/mar.hpp"
#include "cpgg/pheno_vae.hpp"
#include "cpgg/sampler.hpp"

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

// Command implementations behind the cpgg tool. Each writes its outputs
// plus a <command>.log (resolved config and input hashes) under `out`.
// Bad arguments throw UsageError; everything else throws runtime errors.

namespace cpgg::app {

namespace fs = std::filesystem;

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Defaults overlaid with an optional config file.
RunConfig load_config(const std::optional<fs::path>& file);

PhenoVaeConfig pheno_vae_config(const RunConfig& c);
CineVaeConfig cine_vae_config(const RunConfig& c);
MarConfig mar_config(const RunConfig& c, const Shape& latent_shape);
GenerationOptions generation_options(const RunConfig& c);
MaeConfig mae_config(const RunConfig& c, FrameSize size);
PretrainOptions pretrain_options(const RunConfig& c);
FinetuneOptions finetune_options(const RunConfig& c);

inline constexpr const char* kPhenoVaeFile = "pheno_vae.cpgw";
inline constexpr const char* kCineVaeFile = "cine_vae.cpgw";
inline constexpr const char* kMarFile = "mar.cpgw";

/// Progress lines go here; null silences them.
void set_progress_stream(std::ostream* os);

void gen_data(const RunConfig& cfg, Index n, uint64_t seed, const fs::path& out);

/// Trains to the configured epoch count. With `resume` the checkpoint in
/// `out` is loaded and training continues from its epoch and step.
void train_pheno_vae(const RunConfig& cfg, const fs::path& data, const fs::path& out, bool resume = false);
void train_cine_vae(const RunConfig& cfg, const fs::path& data, const fs::path& out, bool resume = false);
/// Needs cine_vae.cpgw in `out`; encoder means are cached in latents.cpgc.
void train_mar(const RunConfig& cfg, const fs::path& data, const fs::path& out, bool resume = false);

/// The three trained models loaded from a directory.
struct Models {
  Normalization norm;
  LatentStats latent_stats;
  std::unique_ptr<PhenoVae<float>> pheno;
  std::unique_ptr<CineVae<float>> vae;
  std::unique_ptr<Mar<float>> mar;
  Generator generator() const { return {pheno.get(), &norm, vae.get(), &latent_stats, mar.get()}; }
};
/// Missing checkpoints are named in the error. `need_pheno` = false skips
/// the phenotype model.
Models load_models(const fs::path& dir, bool need_pheno = true);

struct SampleRequest {
  size_t count = 4;
  std::optional<double> cfg_scale;  // overrides sampler.cfg
  uint64_t seed = 0;
  std::optional<fs::path> pheno_file;
  bool gif = false;
  bool pgm = false;
};
/// cines.cpgc, phenotypes.csv, optional gif/ and pgm/ exports.
void sample(const RunConfig& cfg, const fs::path& models, const SampleRequest& request, const fs::path& out);

struct EvalGenReport {
  double fd_gen_real = 0, fd_noise_real = 0, fd_half_half = 0;
  std::vector<double> w1;  // per phenotype, measured generated vs measured real
  double pearson_ef = 0;
  std::vector<double> bucket_cond, bucket_measured;  // 3 EF terciles
  bool monotone = false;
  size_t generated = 0, invalid = 0;
};
/// Generates n cines from sampled conditions and compares them with the
/// real validation split. Writes eval_gen.csv.
EvalGenReport eval_gen(const RunConfig& cfg, const fs::path& data, const fs::path& models, size_t n, uint64_t seed,
                       const fs::path& out);

/// Writes downstream.csv and downstream_summary.txt.
std::vector<SweepRow> downstream(const RunConfig& cfg, const fs::path& data, const fs::path& models,
                                 const std::vector<Index>& rhos, bool mix_star, const std::vector<uint64_t>& seeds,
                                 const fs::path& out);

/// Writes bench.csv; wall time is the only nondeterministic column.
std::vector<BenchRow> bench(const RunConfig& cfg, const fs::path& models, const std::vector<Index>& decode_steps,
                            size_t cines, const fs::path& out);

/// Pooled cine-VAE encoder means: per latent channel and latent frame, the
/// spatial mean.
Eigen::VectorXd latent_features(const CineVae<float>& vae, const Tensor<float>& cine);

}  // namespace cpgg::app
