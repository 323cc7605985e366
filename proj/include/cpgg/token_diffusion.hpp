#pragma once

#include "cpgg/nn.hpp"

#include <functional>
#include <span>
#include <type_traits>
#include <vector>

namespace cpgg {

/// Discrete cosine noise schedule. Index 0 is the clean signal
/// (alpha_bar = 1); index j >= 1 is a noising step. A respaced schedule
/// keeps a strided subset of the training steps and remembers which
/// training timestep each index corresponds to.
struct NoiseSchedule {
  std::vector<double> alpha_bar;    // size steps() + 1
  std::vector<Index> model_step;    // training timestep fed to the denoiser

  Index steps() const { return static_cast<Index>(alpha_bar.size()) - 1; }
  Index training_steps() const { return model_step.back(); }
  double alpha(Index j) const { return alpha_bar[j] / alpha_bar[j - 1]; }
  /// Posterior standard deviation; 0 at j = 1.
  double sigma(Index j) const;
};

/// alpha_bar_t = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1 + s)) pi/2) with
/// s = 0.008. Per-step betas are clipped at 0.999 so alpha_bar_T > 0.
NoiseSchedule build_schedule(Index steps);

/// Evenly strided sub-schedule of `steps` training timesteps, always
/// containing the first and the last.
NoiseSchedule respace(const NoiseSchedule& train, Index steps);

/// x_t = sqrt(alpha_bar) x + sqrt(1 - alpha_bar) eps, row-wise step j.
template <typename S>
Tensor<S> add_noise(const Tensor<S>& x, std::span<const Index> steps, const Tensor<S>& eps, const NoiseSchedule& sched);

/// One ancestral step from index j to j - 1:
/// (x - (1 - a)/sqrt(1 - abar) eps) / sqrt(a) + sigma_j delta,
/// delta for row r drawn from rngs[r]. sigma_scale = 0 gives the
/// deterministic mean update. With x0_clip > 0 the clean estimate implied
/// by eps is clamped to [-x0_clip, x0_clip] first; near-zero alpha at the
/// end of a respaced cosine chain otherwise amplifies eps error enormously.
template <typename S>
Tensor<S> reverse_step(const Tensor<S>& x_t, Index j, const Tensor<S>& eps, const NoiseSchedule& sched,
                       std::span<Rng> rngs, double sigma_scale = 1.0, double x0_clip = 0.0);

template <typename S>
Tensor<S> cfg_combine(const Tensor<S>& eps_cond, const Tensor<S>& eps_null, double scale);

struct DenoiserConfig {
  Index token_dim = 32;
  Index cond_dim = 64;
  Index width = 128;
  Index blocks = 2;
  Index time_embed_dim = 64;
};

/// Small residual MLP predicting eps from (x_t, t, z). The condition
/// c = time_embedding(t) + proj(z) is added to the input of every block.
template <typename S>
class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(ParamStore<S>& store, const std::string& name, const DenoiserConfig& config, Rng& rng);

  /// x_t (B, D), z (B, cond_dim), training timestep per row.
  Var<S> operator()(const Var<S>& x_t, std::span<const Index> steps, const Var<S>& z) const;
  const DenoiserConfig& config() const { return config_; }

 private:
  struct Block {
    LayerNorm<S> norm;
    Linear<S> fc1, fc2;
  };
  DenoiserConfig config_;
  Linear<S> input_, time_, cond_, output_;
  std::vector<Block> blocks_;
  LayerNorm<S> final_norm_;
};

/// sin/cos features of the timestep, (B, dim).
template <typename S>
Tensor<S> timestep_embedding(std::span<const Index> steps, Index dim);

template <typename S>
using EpsPredictor = std::function<Var<S>(const Var<S>& x_t, std::span<const Index> steps, const Var<S>& z)>;

/// Per-token diffusion loss: each row of x is noised n_rep times at a
/// uniform t in 1..T with fresh eps; returns the squared eps error summed
/// over the token dimension and averaged over rows and repeats. x is
/// differentiable so callers can verify which targets receive gradient.
template <typename S>
Var<S> diffusion_loss(const EpsPredictor<S>& predict, const Var<S>& x, const Var<S>& z, const NoiseSchedule& sched,
                      Rng& rng, int n_rep = 1);

struct TokenSampleStats {
  long long denoiser_evals = 0;  // per-token evaluations, counted per step
};

/// Starts each row from N(0, I) drawn from rngs[r] and runs the reverse
/// chain over every index of `sched`.
/// With cfg_scale != 1 the null condition z_null is evaluated alongside
/// (batched as extra rows) and the two predictions are combined.
template <typename S>
Tensor<S> sample_tokens(const EpsPredictor<S>& predict, Index token_dim, const Tensor<S>& z_cond,
                        std::type_identity_t<const Tensor<S>*> z_null, const NoiseSchedule& sched, double cfg_scale, std::span<Rng> rngs,
                        TokenSampleStats* stats = nullptr, double x0_clip = 0.0);

}  // namespace cpgg
