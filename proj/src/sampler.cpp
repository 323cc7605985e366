#include "cpgg/sampler.hpp"

#include "cpgg/parallel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace cpgg {

std::vector<Index> DecodeSchedule::counts() const {
  std::vector<Index> out;
  for (size_t k = 1; k < keep.size(); ++k) out.push_back(keep[k] - keep[k - 1]);
  return out;
}

DecodeSchedule build_decode_schedule(Index tokens, Index steps) {
  if (steps < 1 || steps > tokens) {
    throw std::invalid_argument("decode steps K=" + std::to_string(steps) + " must lie in 1..N=" + std::to_string(tokens));
  }
  DecodeSchedule s;
  s.tokens = tokens;
  s.keep.assign(static_cast<size_t>(steps) + 1, 0);
  for (Index k = 1; k < steps; ++k) {
    const double frac = 1.0 - std::cos(std::numbers::pi * static_cast<double>(k) / (2.0 * static_cast<double>(steps)));
    const auto raw = static_cast<Index>(std::ceil(static_cast<double>(tokens) * frac - 1e-9));
    s.keep[static_cast<size_t>(k)] = std::clamp(raw, s.keep[static_cast<size_t>(k) - 1] + 1, tokens - (steps - k));
  }
  s.keep[static_cast<size_t>(steps)] = tokens;
  return s;
}

Tensor<float> generate_latent(const Mar<float>& mar, const std::vector<double>& cond, const GenerationOptions& options,
                              uint64_t seed, GenerationStats* stats) {
  NoGradGuard no_grad;
  if (options.cfg_scale < 0) throw std::invalid_argument("cfg scale must be >= 0");
  const MarConfig& cfg = mar.config();
  const Index n = cfg.token_count(), d = cfg.token_dim();
  if (static_cast<Index>(cond.size()) != cfg.cond_dim) {
    throw std::invalid_argument("condition has " + std::to_string(cond.size()) + " values; model expects " +
                                std::to_string(cfg.cond_dim));
  }
  const DecodeSchedule schedule = build_decode_schedule(n, options.decode_steps);
  const NoiseSchedule diffusion = respace(mar.train_schedule(), options.inference_steps);
  const bool guided = options.cfg_scale != 1.0;
  const EpsPredictor<float> predict = mar.eps_predictor();

  const Rng root(seed);
  Rng order_rng = root.derive(0);
  const Rng token_root = root.derive(1);

  TokenSequence<float> seq;
  {
    // Positions in raster order; values start at zero and are never read while masked.
    seq = patchify(Tensor<float>(cfg.latent_shape), cfg.patch);
  }
  std::vector<uint8_t> mask(static_cast<size_t>(n), 1);
  std::vector<Index> pending(static_cast<size_t>(n));
  for (Index i = 0; i < n; ++i) pending[static_cast<size_t>(i)] = i;

  const std::vector<Index> counts = schedule.counts();
  for (size_t k = 0; k < counts.size(); ++k) {
    const Var<float> z = mar.forward(seq.tokens, seq.positions, mask, &cond);
    Var<float> z_null;
    if (guided) z_null = mar.forward(seq.tokens, seq.positions, mask, nullptr);
    if (stats) stats->mar_passes += guided ? 2 : 1;

    // Random retention: pick this step's positions among the pending ones.
    order_rng.shuffle(pending);
    std::vector<Index> chosen(pending.end() - counts[k], pending.end());
    pending.resize(pending.size() - static_cast<size_t>(counts[k]));
    std::sort(chosen.begin(), chosen.end());

    const Tensor<float> zc = gather_rows(z, std::span<const Index>(chosen)).value();
    Tensor<float> zn;
    if (guided) zn = gather_rows(z_null, std::span<const Index>(chosen)).value();
    std::vector<Rng> rngs;
    for (Index i : chosen) rngs.push_back(token_root.derive(static_cast<uint64_t>(i)));
    TokenSampleStats ts;
    const Tensor<float> sampled =
        sample_tokens(predict, d, zc, guided ? &zn : nullptr, diffusion, options.cfg_scale, rngs, &ts, options.x0_clip);
    for (size_t r = 0; r < chosen.size(); ++r) {
      seq.tokens.mat().row(chosen[r]) = sampled.mat().row(static_cast<Index>(r));
      mask[static_cast<size_t>(chosen[r])] = 0;
    }
    if (stats) {
      stats->denoiser_evals += ts.denoiser_evals;
      stats->known_after_step.push_back(schedule.keep[k + 1]);
      stats->step_sets.push_back(chosen);
    }
  }
  return unpatchify(seq, cfg.latent_shape, cfg.patch);
}

GeneratedCine generate_cine(const Generator& gen, const std::vector<double>* phenotypes,
                            const GenerationOptions& options, uint64_t seed, GenerationStats* stats) {
  if (!gen.mar || !gen.vae || !gen.latent_stats || !gen.norm) throw std::invalid_argument("generator is incomplete");
  GeneratedCine out;
  if (phenotypes) {
    out.phenotypes = *phenotypes;
  } else {
    if (!gen.pheno) throw std::invalid_argument("no phenotype model to draw a condition from");
    out.phenotypes = sample_phenotypes(*gen.pheno, *gen.norm, 1, Rng(seed).derive(2)).front();
  }
  const Tensor<float> latent = generate_latent(*gen.mar, gen.norm->normalize(out.phenotypes), options, seed, stats);
  NoGradGuard no_grad;
  out.cine = Cine(gen.vae->decode(constant(gen.latent_stats->destandardize(latent))).value());
  return out;
}

std::vector<GeneratedCine> generate_cines(const Generator& gen, const std::vector<std::vector<double>>& conditions,
                                          size_t count, const GenerationOptions& options, uint64_t seed) {
  if (!conditions.empty() && conditions.size() != count) {
    throw std::invalid_argument("need one condition per cine or none");
  }
  std::vector<GeneratedCine> out(count);
  parallel_for(count, [&](size_t i) {
    out[i] = generate_cine(gen, conditions.empty() ? nullptr : &conditions[i], options, seed + i);
  });
  return out;
}

DecodeCost expected_decode_cost(Index tokens, Index decode_steps, Index inference_steps, double cfg_scale) {
  const long long branches = cfg_scale != 1.0 ? 2 : 1;
  return {decode_steps * branches, tokens * inference_steps * branches};
}

std::vector<BenchRow> bench_decode(const Mar<float>& mar, const std::vector<Index>& decode_steps,
                                   const GenerationOptions& options, size_t cines, uint64_t seed) {
  if (cines == 0) throw std::invalid_argument("bench needs at least one cine");
  const std::vector<double> cond(static_cast<size_t>(mar.config().cond_dim), 0.0);
  std::vector<BenchRow> rows;
  for (Index k : decode_steps) {
    GenerationOptions o = options;
    o.decode_steps = k;
    GenerationStats stats;
    const auto t0 = std::chrono::steady_clock::now();
    for (size_t i = 0; i < cines; ++i) generate_latent(mar, cond, o, seed + i, &stats);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    const auto c = static_cast<long long>(cines);
    rows.push_back({k, stats.mar_passes / c, stats.denoiser_evals / c, ms / static_cast<double>(cines)});
  }
  return rows;
}

}  // namespace cpgg
