#pragma once

#include "cpgg/nn.hpp"
#include "cpgg/phantom.hpp"

#include <vector>

namespace cpgg {

struct CineVaeConfig {
  Index in_channels = 1;
  Index latent_channels = 4;
  /// One entry per downsampling stage; widths[i] is that stage's output.
  std::vector<Index> widths{8, 16, 16};
  std::vector<Triple> strides{{1, 2, 2}, {1, 2, 2}, {2, 1, 1}};
  double beta = 1e-4;

  /// Product of the stage strides along (T, H, W).
  Triple factors() const;
  /// (latent_channels, T/f_t, H/f_s, W/f_s); throws naming the factors
  /// when the input does not divide.
  Shape latent_shape(const Shape& cine_shape) const;
};

/// Convolutional VAE over (C, T, H, W) cines. Each encoder stage is a
/// strided 3x3x3 conv + GroupNorm + SiLU; the decoder mirrors it with
/// nearest upsampling and ends in a sigmoid.
template <typename S>
class CineVae {
 public:
  struct Latent {
    Var<S> mu, logvar;  // (latent_channels, T', H', W')
  };

  CineVae(const CineVaeConfig& config, Rng& init_rng);

  Latent encode(const Var<S>& cine) const;
  Var<S> decode(const Var<S>& latent) const;
  Var<S> reparameterize(const Latent& latent, Rng& rng) const;

  const CineVaeConfig& config() const { return config_; }
  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }

 private:
  struct Block {
    Var<S> w, b, gamma, beta;
    Triple stride;
    int groups;
  };
  Block make_block(const std::string& name, Index in, Index out, Triple stride, Rng& rng);
  Var<S> run_block(const Block& b, const Var<S>& x) const;

  CineVaeConfig config_;
  ParamStore<S> params_;
  Var<S> in_w_, in_b_, out_w_, out_b_;          // encoder stem / mu-logvar head
  Var<S> dec_in_w_, dec_in_b_, dec_out_w_, dec_out_b_;
  std::vector<Block> down_, up_;
};

/// Per-voxel MSE plus beta times the KL averaged over latent elements.
template <typename S>
Var<S> cine_vae_loss(const Var<S>& cine, const Var<S>& recon, const typename CineVae<S>::Latent& latent, double beta);

double train_cine_vae_epoch(CineVae<float>& model, AdamW<float>& opt, const std::vector<const Tensor<float>*>& cines,
                            Index batch, Rng& rng);

/// Mean per-voxel MSE of decode(mu(encode(c))) over the given cines.
double reconstruction_mse(const CineVae<float>& model, const std::vector<const Tensor<float>*>& cines);

/// Per-channel affine map between raw VAE means and unit-scale tokens.
struct LatentStats {
  std::vector<double> mean, std;

  static LatentStats fit(const std::vector<Tensor<float>>& latents);
  Tensor<float> standardize(const Tensor<float>& latent) const;
  Tensor<float> destandardize(const Tensor<float>& latent) const;
};

/// Encoder means of each cine, (latent_channels, T', H', W') each.
std::vector<Tensor<float>> encode_means(const CineVae<float>& model, const std::vector<const Tensor<float>*>& cines);

}  // namespace cpgg
