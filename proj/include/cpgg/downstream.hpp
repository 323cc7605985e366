#pragma once

#include "cpgg/dataset.hpp"
#include "cpgg/nn.hpp"
#include "cpgg/sampler.hpp"

#include <string>
#include <vector>

namespace cpgg {

/// Masked autoencoder over 2D patches with the frames stacked as channels.
struct MaeConfig {
  Index frames = 8, height = 32, width_px = 32;
  Index patch = 8;
  double mask_ratio = 0.75;
  Index width = 64;
  Index depth = 2;
  int heads = 4;
  Index mlp_ratio = 4;
  Index decoder_width = 32;
  Index decoder_depth = 1;

  Index patch_count() const;
  Index patch_dim() const;  // frames * patch * patch
  void validate() const;
};

/// (1, T, H, W) -> (H/p * W/p, T p p), patches in raster order, each laid
/// out as (t, dy, dx).
template <typename S>
Tensor<S> patchify_frames(const Tensor<S>& cine, Index patch);

template <typename S>
class Mae {
 public:
  /// head_out > 0 adds a linear head on the pooled features.
  Mae(const MaeConfig& config, Rng& init_rng, Index head_out = 0);

  /// Normalized encoder output for the visible patches (mask 1 = hidden).
  Var<S> encode(const Tensor<S>& patches, const std::vector<uint8_t>& mask) const;
  /// Reconstruction of every patch, (P, patch_dim).
  Var<S> reconstruct(const Tensor<S>& patches, const std::vector<uint8_t>& mask) const;
  /// MSE over the hidden patches only.
  Var<S> loss(const Tensor<S>& patches, const Var<S>& targets, const std::vector<uint8_t>& mask) const;
  /// Mean-pooled unmasked encoder features, (1, width).
  Var<S> features(const Tensor<S>& patches) const;
  /// head(features), (1, head_out).
  Var<S> predict(const Tensor<S>& patches) const;

  /// Copies every parameter that exists here under the same name.
  void load_shared(const Mae& other);

  const MaeConfig& config() const { return config_; }
  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }

 private:
  MaeConfig config_;
  ParamStore<S> params_;
  Linear<S> embed_, dec_in_, dec_out_, head_;
  Var<S> pos_, dec_pos_, mask_token_;
  std::vector<TransformerBlock<S>> encoder_, decoder_;
  LayerNorm<S> norm_, dec_norm_;
  Index head_out_;
};

struct PretrainOptions {
  Index epochs = 20;
  Index batch = 16;
  double lr = 5e-4;
  uint64_t seed = 0;
};

struct PretrainResult {
  std::vector<double> epoch_loss;
};

/// Trains `mae` in place on shuffled minibatches with fresh masks.
PretrainResult mae_pretrain(Mae<float>& mae, const std::vector<const Tensor<float>*>& cines,
                            const PretrainOptions& options);

/// Hidden-patch MSE with masks drawn from `seed`, averaged over cines.
double mae_masked_mse(const Mae<float>& mae, const std::vector<const Tensor<float>*>& cines, uint64_t seed);

struct FinetuneOptions {
  Index epochs = 20;
  Index batch = 16;
  double lr = 5e-4;
  Index folds = 5;
  uint64_t seed = 0;
};

/// Stratified folds: within each class, ids are ordered by a hash of
/// (seed, id) and dealt round-robin. Returns the fold of each input.
std::vector<Index> stratified_folds(const std::vector<Index>& ids, const std::vector<int>& labels, Index folds,
                                    uint64_t seed);

struct FoldMetrics {
  Index fold = 0;
  double acc = 0, auc = 0;
};

/// Full-model fine-tuning of copies of `pretrained` with a logistic head,
/// k-fold cross-validated.
std::vector<FoldMetrics> finetune_classify(const Mae<float>& pretrained, const std::vector<const Tensor<float>*>& cines,
                                           const std::vector<Index>& ids, const std::vector<int>& labels,
                                           const FinetuneOptions& options);

struct RegressionReport {
  std::vector<double> mae;       // physical units, per phenotype
  std::vector<double> r2;        // NaN where the test target is constant
  double mean_r2 = 0;            // over phenotypes with defined R^2
  std::vector<size_t> excluded;  // phenotypes left out of mean_r2
};

struct LabeledCine {
  const Tensor<float>* cine;
  const std::vector<double>* phenotypes;  // physical units
};

/// Fine-tunes a copy of `pretrained` on z-scored phenotypes and scores it
/// on `test`.
RegressionReport finetune_regress(const Mae<float>& pretrained, const std::vector<LabeledCine>& train,
                                  const std::vector<LabeledCine>& test, const Normalization& norm,
                                  const FinetuneOptions& options);

struct SweepOptions {
  std::vector<Index> rhos{0, 1, 3};
  bool mix_star = true;
  std::vector<uint64_t> seeds{0};
  PretrainOptions pretrain;
  FinetuneOptions finetune;
  GenerationOptions generation;
  uint64_t generation_seed = 0;
};

struct SweepRow {
  std::string task;  // "classification" or "regression"
  Index rho = 0;
  bool mix_star = false;
  uint64_t seed = 0;
  Index fold = 0;
  std::string metric;
  double value = 0;
};

/// For each rho: pretrain on the real train split plus rho * N_train
/// generated cines, then fine-tune for classification (CV over the
/// balanced real subset) and regression (real test split). With mix_star,
/// rho > 0 also gets a regression run that adds the generated
/// (cine, condition) pairs to the labeled training set.
std::vector<SweepRow> mixing_sweep(const Dataset& real, const Generator& generator, const MaeConfig& mae_config,
                                   const SweepOptions& options);

/// Report CSV with header task,rho,mix_star,seed,fold,metric,value.
std::string sweep_csv(const std::vector<SweepRow>& rows);

/// Mean of `metric` over folds and seeds for one (task, rho, mix_star) cell.
double sweep_mean(const std::vector<SweepRow>& rows, const std::string& task, Index rho, bool mix_star,
                  const std::string& metric);

/// Text table: one line per (task, rho, mix_star) with mean +- std.
std::string sweep_summary(const std::vector<SweepRow>& rows);

}  // namespace cpgg
