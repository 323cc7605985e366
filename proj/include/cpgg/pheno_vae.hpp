#pragma once

#include "cpgg/nn.hpp"
#include "cpgg/phantom.hpp"

#include <functional>
#include <optional>
#include <vector>

namespace cpgg {

struct PhenoVaeConfig {
  Index input_dim = kPhenotypeCount;
  std::vector<Index> hidden{64, 32};
  Index latent_dim = 6;
  double leaky_slope = 0.01;
  double beta = 0.01;
};

/// Fully connected VAE over z-scored phenotype vectors: stacked
/// linear + LeakyReLU layers, Gaussian latent with diagonal covariance.
template <typename S>
class PhenoVae {
 public:
  struct Latent {
    Var<S> mu, logvar;
  };

  PhenoVae(const PhenoVaeConfig& config, Rng& init_rng);

  /// x is (B, P) in normalized units.
  Latent encode(const Var<S>& x) const;
  Var<S> decode(const Var<S>& z) const;
  /// z = mu + exp(logvar / 2) * eps, eps ~ N(0, I).
  Var<S> reparameterize(const Latent& latent, Rng& rng) const;

  const PhenoVaeConfig& config() const { return config_; }
  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }

 private:
  Var<S> mlp(const std::vector<Linear<S>>& layers, Var<S> h) const;

  PhenoVaeConfig config_;
  ParamStore<S> params_;
  std::vector<Linear<S>> encoder_, decoder_;
  Linear<S> mu_head_, logvar_head_, output_;
};

/// -1/2 sum(1 + logvar - mu^2 - exp(logvar)), averaged over the batch.
template <typename S>
Var<S> kl_divergence(const typename PhenoVae<S>::Latent& latent);

/// Mean squared reconstruction error plus beta * KL.
template <typename S>
Var<S> elbo_loss(const Var<S>& x, const Var<S>& recon, const typename PhenoVae<S>::Latent& latent, double beta);

/// One pass over the rows in shuffled mini-batches; returns the mean loss.
double train_pheno_vae_epoch(PhenoVae<float>& model, AdamW<float>& opt, const std::vector<std::vector<double>>& rows,
                             Index batch, Rng& rng);

/// Index of the first physically impossible dimension, if any.
std::optional<size_t> phenotype_violation(const std::vector<double>& physical);

/// Draws z ~ N(0, I), decodes and de-normalizes; invalid draws are
/// resampled up to 100 times per sample. Sample i uses rng.derive(i).
std::vector<std::vector<double>> sample_phenotypes(const PhenoVae<float>& model, const Normalization& norm, size_t n,
                                                   const Rng& rng);

}  // namespace cpgg
