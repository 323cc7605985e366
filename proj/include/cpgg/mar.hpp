#pragma once

#include "cpgg/token_diffusion.hpp"

#include <cstdint>
#include <vector>

namespace cpgg {

struct MarConfig {
  Shape latent_shape{4, 4, 8, 8};  // (C, T', H', W') from the cine VAE
  Triple patch{2, 2, 2};
  Index cond_dim = 8;
  Index width = 64;
  Index encoder_depth = 2;
  Index decoder_depth = 2;
  int heads = 4;
  Index mlp_ratio = 4;
  double mask_lo = 0.7;
  double mask_hi = 1.0;
  double p_drop = 0.1;
  Index head_width = 128;
  Index head_blocks = 2;
  Index diffusion_steps = 200;
  int n_rep = 1;

  /// Token grid (T'/p_t, H'/p_s, W'/p_s); throws if the latent does not divide.
  Triple grid() const;
  Index token_count() const;
  Index token_dim() const;
  void validate() const;
};

/// Flattened latent patches. Row i of `tokens` holds the patch at
/// positions[i] as (channel, dt, dh, dw) in row-major order.
template <typename S>
struct TokenSequence {
  Tensor<S> tokens;              // (N, D_tok)
  std::vector<Triple> positions;  // (it, ih, iw)
};

template <typename S>
TokenSequence<S> patchify(const Tensor<S>& latent, Triple patch);
template <typename S>
Tensor<S> unpatchify(const TokenSequence<S>& seq, const Shape& latent_shape, Triple patch);

/// ceil(ratio * n), tolerant of ratio * n landing a hair above an integer.
Index masked_count(double ratio, Index n);

/// 1 = masked. The ratio is drawn from U[lo, hi]; exactly masked_count
/// positions are chosen uniformly without replacement.
std::vector<uint8_t> sample_mask(Index n, Rng& rng, double lo, double hi);

/// Throws unless the step sets are pairwise disjoint and cover 0..n-1.
void factorization_check(const std::vector<std::vector<Index>>& steps, Index n);

/// Masked autoregressive backbone: an encoder over the condition token and
/// the visible tokens, a decoder over the full sequence with a learned
/// mask embedding, and the per-token diffusion head.
template <typename S>
class Mar {
 public:
  Mar(const MarConfig& config, Rng& init_rng);

  /// Condition vectors z (N, width). `cond` is a normalized phenotype
  /// vector, or nullptr for the learned null condition.
  Var<S> forward(const Tensor<S>& tokens, const std::vector<Triple>& positions, const std::vector<uint8_t>& mask,
                 const std::vector<double>* cond) const;

  /// Diffusion loss on the masked rows only. `targets` is normally
  /// constant(tokens); the visible-token input is never differentiated.
  Var<S> loss(const Tensor<S>& tokens, const Var<S>& targets, const std::vector<Triple>& positions,
              const std::vector<uint8_t>& mask, const std::vector<double>* cond, Rng& rng) const;

  EpsPredictor<S> eps_predictor() const;
  const Denoiser<S>& head() const { return head_; }
  const NoiseSchedule& train_schedule() const { return schedule_; }
  const MarConfig& config() const { return config_; }
  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }

 private:
  Var<S> positional(const std::vector<Var<S>>& tables, const std::vector<Triple>& positions) const;

  MarConfig config_;
  ParamStore<S> params_;
  Linear<S> token_in_, cond_proj_, dec_in_;
  Var<S> null_cond_, mask_token_;
  std::vector<Var<S>> enc_pos_, dec_pos_;  // per-axis tables
  std::vector<TransformerBlock<S>> encoder_, decoder_;
  LayerNorm<S> enc_norm_, dec_norm_;
  Denoiser<S> head_;
  NoiseSchedule schedule_;
};

struct MarSample {
  const TokenSequence<float>* seq;
  const std::vector<double>* cond;  // normalized phenotypes
};

/// One optimizer step over a batch: per sample a fresh mask, condition
/// dropout with probability p_drop, masked-token diffusion loss. Returns
/// the batch-mean loss; a non-finite loss throws with the step number.
double mar_train_step(Mar<float>& model, AdamW<float>& opt, const std::vector<MarSample>& batch, Rng& rng);

}  // namespace cpgg
