#include "cpgg/token_diffusion.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace cpgg {

double NoiseSchedule::sigma(Index j) const {
  if (j < 1 || j > steps()) throw std::out_of_range("schedule index " + std::to_string(j) + " out of range");
  const double a = alpha(j);
  return std::sqrt((1.0 - alpha_bar[j - 1]) / (1.0 - alpha_bar[j]) * (1.0 - a));
}

NoiseSchedule build_schedule(Index steps) {
  if (steps < 2) throw std::invalid_argument("noise schedule needs at least 2 steps");
  constexpr double s = 0.008;
  const auto f = [&](Index t) {
    const double c = std::cos((static_cast<double>(t) / static_cast<double>(steps) + s) / (1.0 + s) * std::numbers::pi / 2);
    return c * c;
  };
  NoiseSchedule out;
  out.alpha_bar.resize(static_cast<size_t>(steps) + 1);
  out.model_step.resize(static_cast<size_t>(steps) + 1);
  out.alpha_bar[0] = 1.0;
  const double f0 = f(0);
  double prev_ratio = 1.0;
  for (Index t = 1; t <= steps; ++t) {
    const double ratio = f(t) / f0;
    const double beta = std::min(1.0 - ratio / prev_ratio, 0.999);
    out.alpha_bar[t] = out.alpha_bar[t - 1] * (1.0 - beta);
    prev_ratio = ratio;
  }
  for (Index t = 0; t <= steps; ++t) out.model_step[t] = t;
  return out;
}

NoiseSchedule respace(const NoiseSchedule& train, Index steps) {
  const Index total = train.steps();
  if (steps < 2 || steps > total) {
    throw std::invalid_argument("cannot respace " + std::to_string(total) + " steps to " + std::to_string(steps));
  }
  NoiseSchedule out;
  out.alpha_bar.push_back(1.0);
  out.model_step.push_back(0);
  for (Index j = 0; j < steps; ++j) {
    const Index t = 1 + static_cast<Index>(std::llround(static_cast<double>(j) * static_cast<double>(total - 1) /
                                                        static_cast<double>(steps - 1)));
    out.alpha_bar.push_back(train.alpha_bar[t]);
    out.model_step.push_back(train.model_step[t]);
  }
  return out;
}

template <typename S>
Tensor<S> add_noise(const Tensor<S>& x, std::span<const Index> steps, const Tensor<S>& eps, const NoiseSchedule& sched) {
  if (x.shape() != eps.shape()) throw ShapeError("add_noise: x " + shape_str(x.shape()) + " vs eps " + shape_str(eps.shape()));
  if (static_cast<Index>(steps.size()) != x.rows()) throw ShapeError("add_noise: one step per row required");
  Tensor<S> out(x.shape());
  for (Index r = 0; r < x.rows(); ++r) {
    const Index t = steps[static_cast<size_t>(r)];
    if (t < 0 || t > sched.steps()) throw std::out_of_range("add_noise: step " + std::to_string(t) + " out of range");
    const S a = static_cast<S>(std::sqrt(sched.alpha_bar[t]));
    const S b = static_cast<S>(std::sqrt(1.0 - sched.alpha_bar[t]));
    out.mat().row(r) = a * x.mat().row(r) + b * eps.mat().row(r);
  }
  return out;
}

template <typename S>
Tensor<S> reverse_step(const Tensor<S>& x_t, Index j, const Tensor<S>& eps, const NoiseSchedule& sched,
                       std::span<Rng> rngs, double sigma_scale, double x0_clip) {
  if (j < 1 || j > sched.steps()) throw std::out_of_range("reverse_step: index " + std::to_string(j) + " out of range");
  if (x_t.shape() != eps.shape()) throw ShapeError("reverse_step: x " + shape_str(x_t.shape()) + " vs eps " + shape_str(eps.shape()));
  const double a = sched.alpha(j);
  const S inv_sqrt_a = static_cast<S>(1.0 / std::sqrt(a));
  const S eps_coef = static_cast<S>((1.0 - a) / std::sqrt(1.0 - sched.alpha_bar[j]));
  const double sigma = sigma_scale * sched.sigma(j);
  Tensor<S> out(x_t.shape());
  if (x0_clip > 0) {
    // Replace eps by the one implied by the clamped clean estimate.
    const S sa = static_cast<S>(std::sqrt(sched.alpha_bar[j])), sb = static_cast<S>(std::sqrt(1.0 - sched.alpha_bar[j]));
    const S lim = static_cast<S>(x0_clip);
    const auto x0 = ((x_t.vec() - sb * eps.vec()) / sa).cwiseMax(-lim).cwiseMin(lim);
    const auto eff = ((x_t.vec() - sa * x0) / sb).eval();
    out.vec() = inv_sqrt_a * (x_t.vec() - eps_coef * eff);
  } else {
    out.vec() = inv_sqrt_a * (x_t.vec() - eps_coef * eps.vec());
  }
  if (sigma > 0) {
    if (static_cast<Index>(rngs.size()) != x_t.rows()) throw ShapeError("reverse_step: one rng per row required");
    const Index d = x_t.row_size();
    for (Index r = 0; r < x_t.rows(); ++r)
      for (Index k = 0; k < d; ++k) out[r * d + k] += static_cast<S>(sigma * rngs[static_cast<size_t>(r)].normal());
  }
  return out;
}

template <typename S>
Tensor<S> cfg_combine(const Tensor<S>& eps_cond, const Tensor<S>& eps_null, double scale) {
  if (eps_cond.shape() != eps_null.shape()) throw ShapeError("cfg_combine: shape mismatch");
  if (scale == 1.0) return eps_cond;
  Tensor<S> out(eps_cond.shape());
  out.vec() = eps_null.vec() + static_cast<S>(scale) * (eps_cond.vec() - eps_null.vec());
  return out;
}

template <typename S>
Tensor<S> timestep_embedding(std::span<const Index> steps, Index dim) {
  const Index half = dim / 2;
  Tensor<S> out({static_cast<Index>(steps.size()), dim});
  for (size_t r = 0; r < steps.size(); ++r)
    for (Index k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
      const double arg = static_cast<double>(steps[r]) * freq;
      out[static_cast<Index>(r) * dim + k] = static_cast<S>(std::sin(arg));
      out[static_cast<Index>(r) * dim + half + k] = static_cast<S>(std::cos(arg));
    }
  return out;
}

template <typename S>
Denoiser<S>::Denoiser(ParamStore<S>& store, const std::string& name, const DenoiserConfig& config, Rng& rng)
    : config_(config) {
  input_ = Linear<S>(store, name + ".in", config.token_dim, config.width, rng);
  time_ = Linear<S>(store, name + ".time", config.time_embed_dim, config.width, rng);
  cond_ = Linear<S>(store, name + ".cond", config.cond_dim, config.width, rng);
  for (Index b = 0; b < config.blocks; ++b) {
    const std::string p = name + ".block" + std::to_string(b);
    blocks_.push_back({LayerNorm<S>(store, p + ".norm", config.width),
                       Linear<S>(store, p + ".fc1", config.width, config.width, rng),
                       Linear<S>(store, p + ".fc2", config.width, config.width, rng)});
  }
  final_norm_ = LayerNorm<S>(store, name + ".final_norm", config.width);
  output_ = Linear<S>(store, name + ".out", config.width, config.token_dim, rng);
}

template <typename S>
Var<S> Denoiser<S>::operator()(const Var<S>& x_t, std::span<const Index> steps, const Var<S>& z) const {
  if (x_t.shape().size() != 2 || x_t.shape()[1] != config_.token_dim) {
    throw ShapeError("denoiser expects (B," + std::to_string(config_.token_dim) + ") tokens, got " + shape_str(x_t.shape()));
  }
  const Var<S> c = add(time_(constant(timestep_embedding<S>(steps, config_.time_embed_dim))), cond_(z));
  Var<S> h = input_(x_t);
  for (const auto& b : blocks_) h = add(h, b.fc2(silu(b.fc1(add(b.norm(h), c)))));
  return output_(final_norm_(h));
}

template <typename S>
Var<S> diffusion_loss(const EpsPredictor<S>& predict, const Var<S>& x, const Var<S>& z, const NoiseSchedule& sched,
                      Rng& rng, int n_rep) {
  if (n_rep < 1 || n_rep > 4) throw std::invalid_argument("n_rep must be in 1..4");
  if (x.value().rank() != 2 || z.value().rank() != 2 || x.value().rows() != z.value().rows()) {
    throw ShapeError("diffusion_loss: x " + shape_str(x.shape()) + " and z " + shape_str(z.shape()) +
                     " need matching rows");
  }
  const Index rows = x.value().rows(), d = x.value().row_size(), total = rows * n_rep;
  Tensor<S> eps({total, d}), noise_part({total, d});
  std::vector<S> signal(static_cast<size_t>(total));
  std::vector<Index> model_steps(static_cast<size_t>(total));
  for (Index row = 0; row < total; ++row) {
    const Index t = 1 + static_cast<Index>(rng.below(static_cast<uint64_t>(sched.steps())));
    model_steps[static_cast<size_t>(row)] = sched.model_step[t];
    signal[static_cast<size_t>(row)] = static_cast<S>(std::sqrt(sched.alpha_bar[t]));
    const S b = static_cast<S>(std::sqrt(1.0 - sched.alpha_bar[t]));
    for (Index k = 0; k < d; ++k) {
      eps[row * d + k] = static_cast<S>(rng.normal());
      noise_part[row * d + k] = b * eps[row * d + k];
    }
  }
  const Var<S> xs = n_rep == 1 ? x : concat_rows(std::vector<Var<S>>(static_cast<size_t>(n_rep), x));
  const Var<S> zs = n_rep == 1 ? z : concat_rows(std::vector<Var<S>>(static_cast<size_t>(n_rep), z));
  const Var<S> x_t = add(scale_rows(xs, std::span<const S>(signal)), constant(std::move(noise_part)));
  return row_sq_dist_mean(predict(x_t, model_steps, zs), constant(std::move(eps)));
}

template <typename S>
Tensor<S> sample_tokens(const EpsPredictor<S>& predict, Index token_dim, const Tensor<S>& z_cond,
                        std::type_identity_t<const Tensor<S>*> z_null, const NoiseSchedule& sched, double cfg_scale, std::span<Rng> rngs,
                        TokenSampleStats* stats, double x0_clip) {
  NoGradGuard no_grad;
  const Index rows = z_cond.rows();
  if (static_cast<Index>(rngs.size()) != rows) throw ShapeError("sample_tokens: one rng per row required");
  const bool guided = cfg_scale != 1.0;
  if (guided && (!z_null || z_null->shape() != z_cond.shape())) {
    throw std::invalid_argument("sample_tokens: guidance needs a null condition of matching shape");
  }
  const Index factor = guided ? 2 : 1;
  const Var<S> z_batch = guided ? concat_rows<S>({constant(z_cond), constant(*z_null)}) : constant(z_cond);
  Tensor<S> x({rows, token_dim});
  for (Index r = 0; r < rows; ++r)
    for (Index k = 0; k < token_dim; ++k) x[r * token_dim + k] = static_cast<S>(rngs[static_cast<size_t>(r)].normal());

  for (Index j = sched.steps(); j >= 1; --j) {
    const std::vector<Index> steps(static_cast<size_t>(rows * factor), sched.model_step[j]);
    const Var<S> x_in = guided ? concat_rows<S>({constant(x), constant(x)}) : constant(x);
    Tensor<S> eps = predict(x_in, steps, z_batch).value();
    if (stats) stats->denoiser_evals += rows * factor;
    if (guided) {
      Tensor<S> cond({rows, token_dim}), null({rows, token_dim});
      cond.mat() = eps.mat().topRows(rows);
      null.mat() = eps.mat().bottomRows(rows);
      eps = cfg_combine(cond, null, cfg_scale);
    }
    x = reverse_step(x, j, eps, sched, rngs, 1.0, x0_clip);
  }
  return x;
}

#define CPGG_INSTANTIATE(S)                                                                                         \
  template Tensor<S> add_noise<S>(const Tensor<S>&, std::span<const Index>, const Tensor<S>&, const NoiseSchedule&); \
  template Tensor<S> reverse_step<S>(const Tensor<S>&, Index, const Tensor<S>&, const NoiseSchedule&, std::span<Rng>, \
                               double, double);                                                                             \
  template Tensor<S> cfg_combine<S>(const Tensor<S>&, const Tensor<S>&, double);                                    \
  template Tensor<S> timestep_embedding<S>(std::span<const Index>, Index);                                          \
  template class Denoiser<S>;                                                                                       \
  template Var<S> diffusion_loss<S>(const EpsPredictor<S>&, const Var<S>&, const Var<S>&, const NoiseSchedule&,  \
                                    Rng&, int);                                                                     \
  template Tensor<S> sample_tokens<S>(const EpsPredictor<S>&, Index, const Tensor<S>&, const Tensor<S>*,             \
                                      const NoiseSchedule&, double, std::span<Rng>, TokenSampleStats*, double);

CPGG_INSTANTIATE(float)
CPGG_INSTANTIATE(double)

}  // namespace cpgg
