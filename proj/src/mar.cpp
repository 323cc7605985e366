#include "cpgg/mar.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace cpgg {

Triple MarConfig::grid() const {
  if (latent_shape.size() != 4) throw ShapeError("MAR latent shape must be (C,T,H,W), got " + shape_str(latent_shape));
  Triple g{};
  for (int a = 0; a < 3; ++a) {
    if (patch[a] <= 0 || latent_shape[a + 1] % patch[a]) {
      throw ShapeError("latent " + shape_str(latent_shape) + " not divisible by patch (" + std::to_string(patch[0]) +
                       "," + std::to_string(patch[1]) + "," + std::to_string(patch[2]) + ")");
    }
    g[a] = latent_shape[a + 1] / patch[a];
  }
  return g;
}

Index MarConfig::token_count() const {
  const Triple g = grid();
  return g[0] * g[1] * g[2];
}

Index MarConfig::token_dim() const { return latent_shape[0] * patch[0] * patch[1] * patch[2]; }

void MarConfig::validate() const {
  grid();
  if (!(0.0 <= mask_lo && mask_lo <= mask_hi && mask_hi <= 1.0)) {
    throw std::invalid_argument("mask range must satisfy 0 <= lo <= hi <= 1");
  }
  if (width % heads) throw std::invalid_argument("MAR width must be divisible by heads");
  if (p_drop < 0 || p_drop > 1) throw std::invalid_argument("p_drop must lie in [0,1]");
}

template <typename S>
TokenSequence<S> patchify(const Tensor<S>& latent, Triple patch) {
  MarConfig shape_only;
  shape_only.latent_shape = latent.shape();
  shape_only.patch = patch;
  const Triple g = shape_only.grid();
  const Index c = latent.dim(0), t = latent.dim(1), h = latent.dim(2), w = latent.dim(3);
  TokenSequence<S> seq;
  seq.tokens = Tensor<S>({g[0] * g[1] * g[2], shape_only.token_dim()});
  Index row = 0;
  for (Index it = 0; it < g[0]; ++it)
    for (Index ih = 0; ih < g[1]; ++ih)
      for (Index iw = 0; iw < g[2]; ++iw, ++row) {
        seq.positions.push_back({it, ih, iw});
        Index k = row * seq.tokens.row_size();
        for (Index ch = 0; ch < c; ++ch)
          for (Index dt = 0; dt < patch[0]; ++dt)
            for (Index dh = 0; dh < patch[1]; ++dh)
              for (Index dw = 0; dw < patch[2]; ++dw) {
                const Index tt = it * patch[0] + dt, hh = ih * patch[1] + dh, ww = iw * patch[2] + dw;
                seq.tokens[k++] = latent[((ch * t + tt) * h + hh) * w + ww];
              }
      }
  return seq;
}

template <typename S>
Tensor<S> unpatchify(const TokenSequence<S>& seq, const Shape& latent_shape, Triple patch) {
  MarConfig shape_only;
  shape_only.latent_shape = latent_shape;
  shape_only.patch = patch;
  shape_only.grid();
  if (seq.tokens.rank() != 2 || seq.tokens.row_size() != shape_only.token_dim() ||
      seq.tokens.rows() != shape_only.token_count() ||
      static_cast<Index>(seq.positions.size()) != seq.tokens.rows()) {
    throw ShapeError("unpatchify: tokens " + shape_str(seq.tokens.shape()) + " do not match latent " +
                     shape_str(latent_shape));
  }
  const Index c = latent_shape[0], t = latent_shape[1], h = latent_shape[2], w = latent_shape[3];
  Tensor<S> out(latent_shape);
  for (Index row = 0; row < seq.tokens.rows(); ++row) {
    const Triple p = seq.positions[static_cast<size_t>(row)];
    Index k = row * seq.tokens.row_size();
    for (Index ch = 0; ch < c; ++ch)
      for (Index dt = 0; dt < patch[0]; ++dt)
        for (Index dh = 0; dh < patch[1]; ++dh)
          for (Index dw = 0; dw < patch[2]; ++dw) {
            const Index tt = p[0] * patch[0] + dt, hh = p[1] * patch[1] + dh, ww = p[2] * patch[2] + dw;
            out[((ch * t + tt) * h + hh) * w + ww] = seq.tokens[k++];
          }
  }
  return out;
}

Index masked_count(double ratio, Index n) {
  const double m = std::ceil(ratio * static_cast<double>(n) - 1e-9);
  return std::clamp<Index>(static_cast<Index>(m), 0, n);
}

std::vector<uint8_t> sample_mask(Index n, Rng& rng, double lo, double hi) {
  if (!(0.0 <= lo && lo <= hi && hi <= 1.0)) throw std::invalid_argument("mask range must satisfy 0 <= lo <= hi <= 1");
  const Index k = masked_count(rng.uniform(lo, hi), n);
  std::vector<Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  rng.shuffle(order);
  std::vector<uint8_t> mask(static_cast<size_t>(n), 0);
  for (Index i = 0; i < k; ++i) mask[static_cast<size_t>(order[static_cast<size_t>(i)])] = 1;
  return mask;
}

void factorization_check(const std::vector<std::vector<Index>>& steps, Index n) {
  std::vector<int> seen(static_cast<size_t>(n), -1);
  for (size_t k = 0; k < steps.size(); ++k)
    for (Index i : steps[k]) {
      if (i < 0 || i >= n) throw std::invalid_argument("decode step " + std::to_string(k) + " has token " + std::to_string(i) + " outside 0.." + std::to_string(n - 1));
      if (seen[static_cast<size_t>(i)] >= 0) {
        throw std::invalid_argument("token " + std::to_string(i) + " decoded at steps " +
                                    std::to_string(seen[static_cast<size_t>(i)]) + " and " + std::to_string(k));
      }
      seen[static_cast<size_t>(i)] = static_cast<int>(k);
    }
  for (Index i = 0; i < n; ++i)
    if (seen[static_cast<size_t>(i)] < 0) throw std::invalid_argument("token " + std::to_string(i) + " never decoded");
}

template <typename S>
Mar<S>::Mar(const MarConfig& config, Rng& rng) : config_(config) {
  config.validate();
  const Index w = config.width, d = config.token_dim();
  const Triple g = config.grid();
  token_in_ = Linear<S>(params_, "mar.token_in", d, w, rng);
  cond_proj_ = Linear<S>(params_, "mar.cond_proj", config.cond_dim, w, rng);
  null_cond_ = params_.add("mar.null_cond", normal_init<S>({1, w}, 0.02, rng));
  const char* axes[3] = {"t", "h", "w"};
  for (int a = 0; a < 3; ++a) enc_pos_.push_back(params_.add(std::string("mar.enc_pos.") + axes[a], normal_init<S>({g[a], w}, 0.02, rng)));
  for (Index b = 0; b < config.encoder_depth; ++b)
    encoder_.emplace_back(params_, "mar.enc" + std::to_string(b), w, config.heads, config.mlp_ratio, rng);
  enc_norm_ = LayerNorm<S>(params_, "mar.enc_norm", w);
  dec_in_ = Linear<S>(params_, "mar.dec_in", w, w, rng);
  mask_token_ = params_.add("mar.mask_token", normal_init<S>({1, w}, 0.02, rng));
  for (int a = 0; a < 3; ++a) dec_pos_.push_back(params_.add(std::string("mar.dec_pos.") + axes[a], normal_init<S>({g[a], w}, 0.02, rng)));
  for (Index b = 0; b < config.decoder_depth; ++b)
    decoder_.emplace_back(params_, "mar.dec" + std::to_string(b), w, config.heads, config.mlp_ratio, rng);
  dec_norm_ = LayerNorm<S>(params_, "mar.dec_norm", w);
  head_ = Denoiser<S>(params_, "head",
                      {.token_dim = d, .cond_dim = w, .width = config.head_width, .blocks = config.head_blocks,
                       .time_embed_dim = 64},
                      rng);
  schedule_ = build_schedule(config.diffusion_steps);
}

template <typename S>
Var<S> Mar<S>::positional(const std::vector<Var<S>>& tables, const std::vector<Triple>& positions) const {
  Var<S> out;
  for (int a = 0; a < 3; ++a) {
    std::vector<Index> idx;
    idx.reserve(positions.size());
    for (const auto& p : positions) idx.push_back(p[a]);
    Var<S> part = gather_rows(tables[static_cast<size_t>(a)], std::span<const Index>(idx));
    out = a == 0 ? part : add(out, part);
  }
  return out;
}

template <typename S>
Var<S> Mar<S>::forward(const Tensor<S>& tokens, const std::vector<Triple>& positions, const std::vector<uint8_t>& mask,
                       const std::vector<double>* cond) const {
  const Index n = tokens.rows();
  if (tokens.rank() != 2 || tokens.row_size() != config_.token_dim() || static_cast<Index>(positions.size()) != n ||
      static_cast<Index>(mask.size()) != n) {
    throw ShapeError("MAR forward: tokens " + shape_str(tokens.shape()) + ", " + std::to_string(positions.size()) +
                     " positions, " + std::to_string(mask.size()) + " mask entries");
  }
  const Triple g = config_.grid();
  for (const auto& p : positions)
    for (int a = 0; a < 3; ++a)
      if (p[a] < 0 || p[a] >= g[a]) throw ShapeError("MAR forward: token position outside the grid");

  Var<S> cls;
  if (cond) {
    if (static_cast<Index>(cond->size()) != config_.cond_dim) {
      throw ShapeError("MAR condition has " + std::to_string(cond->size()) + " values, expected " +
                       std::to_string(config_.cond_dim));
    }
    Tensor<S> c({1, config_.cond_dim});
    for (Index j = 0; j < config_.cond_dim; ++j) c[j] = static_cast<S>((*cond)[static_cast<size_t>(j)]);
    cls = cond_proj_(constant(std::move(c)));
  } else {
    cls = null_cond_;
  }

  std::vector<Index> visible;
  std::vector<Triple> visible_pos;
  for (Index i = 0; i < n; ++i)
    if (!mask[static_cast<size_t>(i)]) {
      visible.push_back(i);
      visible_pos.push_back(positions[static_cast<size_t>(i)]);
    }

  Var<S> h = cls;
  if (!visible.empty()) {
    Tensor<S> vis({static_cast<Index>(visible.size()), tokens.row_size()});
    for (size_t r = 0; r < visible.size(); ++r) vis.mat().row(static_cast<Index>(r)) = tokens.mat().row(visible[r]);
    Var<S> emb = add(token_in_(constant(std::move(vis))), positional(enc_pos_, visible_pos));
    h = concat_rows<S>({cls, emb});
  }
  for (const auto& b : encoder_) h = b(h);
  h = dec_in_(enc_norm_(h));

  // Decoder rows: [CLS, token 0..n-1]; masked tokens read the mask row.
  const Index mask_row = h.value().rows();
  Var<S> pool = concat_rows<S>({h, mask_token_});
  std::vector<Index> order{0};
  Index next_visible = 1;
  for (Index i = 0; i < n; ++i) order.push_back(mask[static_cast<size_t>(i)] ? mask_row : next_visible++);
  Var<S> seq = gather_rows(pool, std::span<const Index>(order));
  Var<S> pos = concat_rows<S>({constant(Tensor<S>({1, config_.width})), positional(dec_pos_, positions)});
  seq = add(seq, pos);
  for (const auto& b : decoder_) seq = b(seq);
  return slice_rows(dec_norm_(seq), 1, n);
}

template <typename S>
EpsPredictor<S> Mar<S>::eps_predictor() const {
  const Denoiser<S>* head = &head_;
  return [head](const Var<S>& x_t, std::span<const Index> steps, const Var<S>& z) { return (*head)(x_t, steps, z); };
}

template <typename S>
Var<S> Mar<S>::loss(const Tensor<S>& tokens, const Var<S>& targets, const std::vector<Triple>& positions,
                    const std::vector<uint8_t>& mask, const std::vector<double>* cond, Rng& rng) const {
  if (targets.shape() != tokens.shape()) throw ShapeError("MAR loss: targets must match tokens");
  std::vector<Index> masked;
  for (size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) masked.push_back(static_cast<Index>(i));
  if (masked.empty()) throw std::invalid_argument("MAR loss needs at least one masked token");
  const Var<S> z = forward(tokens, positions, mask, cond);
  const std::span<const Index> rows(masked);
  return diffusion_loss(eps_predictor(), gather_rows(targets, rows), gather_rows(z, rows), schedule_, rng,
                        config_.n_rep);
}

double mar_train_step(Mar<float>& model, AdamW<float>& opt, const std::vector<MarSample>& batch, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("empty MAR batch");
  const MarConfig& cfg = model.config();
  Var<float> total;
  for (size_t i = 0; i < batch.size(); ++i) {
    const auto& s = *batch[i].seq;
    const auto mask = sample_mask(s.tokens.rows(), rng, cfg.mask_lo, cfg.mask_hi);
    const bool drop = rng.bernoulli(cfg.p_drop);
    Var<float> l = model.loss(s.tokens, constant(s.tokens), s.positions, mask, drop ? nullptr : batch[i].cond, rng);
    total = i == 0 ? l : add(total, l);
  }
  total = scale(total, 1.0f / static_cast<float>(batch.size()));
  const double value = total.value()[0];
  if (!std::isfinite(value)) {
    throw std::runtime_error("non-finite MAR loss at optimizer step " + std::to_string(opt.step_count() + 1) +
                             " (batch of " + std::to_string(batch.size()) + ")");
  }
  backward(total);
  opt.step();
  return value;
}

#define CPGG_INSTANTIATE_MAR(S)                                                            \
  template TokenSequence<S> patchify<S>(const Tensor<S>&, Triple);                          \
  template Tensor<S> unpatchify<S>(const TokenSequence<S>&, const Shape&, Triple);          \
  template class Mar<S>;

CPGG_INSTANTIATE_MAR(float)
CPGG_INSTANTIATE_MAR(double)

}  // namespace cpgg
