#include "cpgg/cine_vae.hpp"

#include "cpgg/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace cpgg {

namespace {

constexpr Triple kUnit{1, 1, 1};
constexpr Triple kPad{1, 1, 1};

template <typename S>
Var<S> conv_weight(ParamStore<S>& store, const std::string& name, Index in, Index out, Rng& rng) {
  return store.add(name, xavier_uniform<S>(in * 27, out * 27, {out, in, 3, 3, 3}, rng));
}

template <typename S>
Var<S> zeros(ParamStore<S>& store, const std::string& name, Index n) {
  return store.add(name, Tensor<S>({n}));
}

template <typename S>
Var<S> ones(ParamStore<S>& store, const std::string& name, Index n) {
  Tensor<S> t({n});
  for (auto& v : t.values()) v = S(1);
  return store.add(name, std::move(t));
}

}  // namespace

Triple CineVaeConfig::factors() const {
  Triple f{1, 1, 1};
  for (const auto& s : strides)
    for (int a = 0; a < 3; ++a) f[a] *= s[a];
  return f;
}

Shape CineVaeConfig::latent_shape(const Shape& cine) const {
  if (cine.size() != 4 || cine[0] != in_channels) {
    throw ShapeError("cine VAE expects (" + std::to_string(in_channels) + ",T,H,W), got " + shape_str(cine));
  }
  const Triple f = factors();
  if (cine[1] % f[0] || cine[2] % f[1] || cine[3] % f[2]) {
    throw ShapeError("cine " + shape_str(cine) + " not divisible by factors f_t=" + std::to_string(f[0]) +
                     ", f_s=" + std::to_string(f[1]) + "x" + std::to_string(f[2]));
  }
  return {latent_channels, cine[1] / f[0], cine[2] / f[1], cine[3] / f[2]};
}

template <typename S>
typename CineVae<S>::Block CineVae<S>::make_block(const std::string& name, Index in, Index out, Triple stride,
                                                   Rng& rng) {
  Block b;
  b.w = conv_weight(params_, name + ".w", in, out, rng);
  b.b = zeros(params_, name + ".b", out);
  b.gamma = ones(params_, name + ".gn.gamma", out);
  b.beta = zeros(params_, name + ".gn.beta", out);
  b.stride = stride;
  b.groups = static_cast<int>(std::min<Index>(8, out));
  while (out % b.groups) --b.groups;
  return b;
}

template <typename S>
Var<S> CineVae<S>::run_block(const Block& b, const Var<S>& x) const {
  return silu(group_norm(conv3d(x, b.w, b.b, b.stride, kPad), b.gamma, b.beta, b.groups));
}

template <typename S>
CineVae<S>::CineVae(const CineVaeConfig& config, Rng& rng) : config_(config) {
  if (config.widths.empty() || config.widths.size() != config.strides.size()) {
    throw std::invalid_argument("cine VAE needs one width per stride stage");
  }
  for (Index w : config.widths)
    if (w <= 0) throw std::invalid_argument("cine VAE widths must be positive");
  const auto& w = config.widths;
  const size_t n = w.size();
  in_w_ = conv_weight(params_, "enc.in.w", config.in_channels, w[0], rng);
  in_b_ = zeros(params_, "enc.in.b", w[0]);
  for (size_t i = 0; i < n; ++i)
    down_.push_back(make_block("enc.down" + std::to_string(i), i == 0 ? w[0] : w[i - 1], w[i], config.strides[i], rng));
  out_w_ = conv_weight(params_, "enc.out.w", w[n - 1], 2 * config.latent_channels, rng);
  out_b_ = zeros(params_, "enc.out.b", 2 * config.latent_channels);

  dec_in_w_ = conv_weight(params_, "dec.in.w", config.latent_channels, w[n - 1], rng);
  dec_in_b_ = zeros(params_, "dec.in.b", w[n - 1]);
  // up_[k] undoes down_[n-1-k]: upsample by its stride, conv back to its input width.
  for (size_t k = 0; k < n; ++k) {
    const size_t i = n - 1 - k;
    up_.push_back(make_block("dec.up" + std::to_string(k), w[i], i == 0 ? w[0] : w[i - 1], config.strides[i], rng));
  }
  dec_out_w_ = conv_weight(params_, "dec.out.w", w[0], config.in_channels, rng);
  dec_out_b_ = zeros(params_, "dec.out.b", config.in_channels);
}

template <typename S>
typename CineVae<S>::Latent CineVae<S>::encode(const Var<S>& cine) const {
  config_.latent_shape(cine.shape());
  Var<S> h = conv3d(cine, in_w_, in_b_, kUnit, kPad);
  for (const auto& b : down_) h = run_block(b, h);
  h = conv3d(h, out_w_, out_b_, kUnit, kPad);
  const Index l = config_.latent_channels;
  // Channels are the leading axis, so mu / logvar are row slices.
  return {slice_rows(h, 0, l), slice_rows(h, l, l)};
}

template <typename S>
Var<S> CineVae<S>::decode(const Var<S>& latent) const {
  if (latent.shape().size() != 4 || latent.shape()[0] != config_.latent_channels) {
    throw ShapeError("cine VAE decode expects (" + std::to_string(config_.latent_channels) + ",T',H',W'), got " +
                     shape_str(latent.shape()));
  }
  Var<S> h = conv3d(latent, dec_in_w_, dec_in_b_, kUnit, kPad);
  for (const auto& b : up_) {
    h = upsample_nearest(h, b.stride);
    Block same = b;
    same.stride = kUnit;
    h = run_block(same, h);
  }
  return sigmoid(conv3d(h, dec_out_w_, dec_out_b_, kUnit, kPad));
}

template <typename S>
Var<S> CineVae<S>::reparameterize(const Latent& latent, Rng& rng) const {
  Tensor<S> eps(latent.mu.shape());
  for (auto& e : eps.values()) e = static_cast<S>(rng.normal());
  return add(latent.mu, mul(exp(scale(latent.logvar, S(0.5))), constant(std::move(eps))));
}

template <typename S>
Var<S> cine_vae_loss(const Var<S>& cine, const Var<S>& recon, const typename CineVae<S>::Latent& latent, double beta) {
  Var<S> kl = sub(add(mul(latent.mu, latent.mu), exp(latent.logvar)), add_scalar(latent.logvar, S(1)));
  return add(mse(recon, cine), scale(mean(kl), static_cast<S>(0.5 * beta)));
}

double train_cine_vae_epoch(CineVae<float>& model, AdamW<float>& opt, const std::vector<const Tensor<float>*>& cines,
                            Index batch, Rng& rng) {
  std::vector<size_t> order(cines.size());
  std::iota(order.begin(), order.end(), size_t{0});
  rng.shuffle(order);
  double total = 0;
  size_t batches = 0;
  for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch)) {
    const size_t end = std::min(order.size(), start + static_cast<size_t>(batch));
    Var<float> loss;
    for (size_t k = start; k < end; ++k) {
      const Var<float> x = constant(*cines[order[k]]);
      auto latent = model.encode(x);
      Var<float> l = cine_vae_loss<float>(x, model.decode(model.reparameterize(latent, rng)), latent, model.config().beta);
      loss = k == start ? l : add(loss, l);
    }
    loss = scale(loss, 1.0f / static_cast<float>(end - start));
    if (!std::isfinite(loss.value()[0])) throw std::runtime_error("cine VAE loss is not finite");
    backward(loss);
    opt.step();
    total += loss.value()[0];
    ++batches;
  }
  return total / static_cast<double>(batches);
}

double reconstruction_mse(const CineVae<float>& model, const std::vector<const Tensor<float>*>& cines) {
  std::vector<double> err(cines.size());
  parallel_for(cines.size(), [&](size_t i) {
    NoGradGuard no_grad;
    const Var<float> x = constant(*cines[i]);
    err[i] = mse(model.decode(model.encode(x).mu), x).value()[0];
  });
  return std::accumulate(err.begin(), err.end(), 0.0) / static_cast<double>(err.size());
}

std::vector<Tensor<float>> encode_means(const CineVae<float>& model, const std::vector<const Tensor<float>*>& cines) {
  std::vector<Tensor<float>> out(cines.size());
  parallel_for(cines.size(), [&](size_t i) {
    NoGradGuard no_grad;
    out[i] = model.encode(constant(*cines[i])).mu.value();
  });
  return out;
}

LatentStats LatentStats::fit(const std::vector<Tensor<float>>& latents) {
  if (latents.empty()) throw std::invalid_argument("LatentStats::fit: no latents");
  const Index c = latents[0].dim(0), per = latents[0].size() / c;
  LatentStats s;
  s.mean.assign(static_cast<size_t>(c), 0.0);
  s.std.assign(static_cast<size_t>(c), 0.0);
  const double n = static_cast<double>(latents.size() * static_cast<size_t>(per));
  for (const auto& l : latents)
    for (Index ch = 0; ch < c; ++ch)
      for (Index k = 0; k < per; ++k) s.mean[static_cast<size_t>(ch)] += l[ch * per + k] / n;
  for (const auto& l : latents)
    for (Index ch = 0; ch < c; ++ch)
      for (Index k = 0; k < per; ++k) {
        const double d = l[ch * per + k] - s.mean[static_cast<size_t>(ch)];
        s.std[static_cast<size_t>(ch)] += d * d / n;
      }
  for (auto& v : s.std) v = std::sqrt(std::max(v, 1e-12));
  return s;
}

Tensor<float> LatentStats::standardize(const Tensor<float>& latent) const {
  Tensor<float> out(latent.shape());
  const Index c = latent.dim(0), per = latent.size() / c;
  for (Index ch = 0; ch < c; ++ch)
    for (Index k = 0; k < per; ++k)
      out[ch * per + k] = static_cast<float>((latent[ch * per + k] - mean[static_cast<size_t>(ch)]) /
                                             std[static_cast<size_t>(ch)]);
  return out;
}

Tensor<float> LatentStats::destandardize(const Tensor<float>& latent) const {
  Tensor<float> out(latent.shape());
  const Index c = latent.dim(0), per = latent.size() / c;
  for (Index ch = 0; ch < c; ++ch)
    for (Index k = 0; k < per; ++k)
      out[ch * per + k] =
          static_cast<float>(latent[ch * per + k] * std[static_cast<size_t>(ch)] + mean[static_cast<size_t>(ch)]);
  return out;
}

template class CineVae<float>;
template class CineVae<double>;
template Var<float> cine_vae_loss<float>(const Var<float>&, const Var<float>&, const CineVae<float>::Latent&, double);
template Var<double> cine_vae_loss<double>(const Var<double>&, const Var<double>&, const CineVae<double>::Latent&,
                                           double);

}  // namespace cpgg
