#include "cpgg/pheno_vae.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace cpgg {

template <typename S>
PhenoVae<S>::PhenoVae(const PhenoVaeConfig& config, Rng& rng) : config_(config) {
  if (config.latent_dim >= config.input_dim) throw std::invalid_argument("pheno VAE latent dim must be < input dim");
  Index in = config.input_dim;
  for (size_t i = 0; i < config.hidden.size(); ++i) {
    encoder_.emplace_back(params_, "enc." + std::to_string(i), in, config.hidden[i], rng);
    in = config.hidden[i];
  }
  mu_head_ = Linear<S>(params_, "enc.mu", in, config.latent_dim, rng);
  logvar_head_ = Linear<S>(params_, "enc.logvar", in, config.latent_dim, rng);
  in = config.latent_dim;
  for (size_t i = config.hidden.size(); i-- > 0;) {
    decoder_.emplace_back(params_, "dec." + std::to_string(decoder_.size()), in, config.hidden[i], rng);
    in = config.hidden[i];
  }
  output_ = Linear<S>(params_, "dec.out", in, config.input_dim, rng);
}

template <typename S>
Var<S> PhenoVae<S>::mlp(const std::vector<Linear<S>>& layers, Var<S> h) const {
  for (const auto& l : layers) h = leaky_relu(l(h), static_cast<S>(config_.leaky_slope));
  return h;
}

template <typename S>
typename PhenoVae<S>::Latent PhenoVae<S>::encode(const Var<S>& x) const {
  if (x.value().rank() != 2 || x.shape()[1] != config_.input_dim) {
    throw ShapeError("pheno VAE expects (B," + std::to_string(config_.input_dim) + ") input, got " +
                     shape_str(x.shape()));
  }
  Var<S> h = mlp(encoder_, x);
  return {mu_head_(h), logvar_head_(h)};
}

template <typename S>
Var<S> PhenoVae<S>::decode(const Var<S>& z) const {
  if (z.value().rank() != 2 || z.shape()[1] != config_.latent_dim) {
    throw ShapeError("pheno VAE decode expects (B," + std::to_string(config_.latent_dim) + "), got " +
                     shape_str(z.shape()));
  }
  return output_(mlp(decoder_, z));
}

template <typename S>
Var<S> PhenoVae<S>::reparameterize(const Latent& latent, Rng& rng) const {
  Tensor<S> eps(latent.mu.shape());
  for (auto& e : eps.values()) e = static_cast<S>(rng.normal());
  Var<S> stddev = exp(scale(latent.logvar, S(0.5)));
  return add(latent.mu, mul(stddev, constant(std::move(eps))));
}

template <typename S>
Var<S> kl_divergence(const typename PhenoVae<S>::Latent& latent) {
  const S batch = static_cast<S>(latent.mu.value().rows());
  // 1/2 sum(mu^2 + exp(logvar) - logvar - 1) / B
  Var<S> terms = sub(add(mul(latent.mu, latent.mu), exp(latent.logvar)), add_scalar(latent.logvar, S(1)));
  return scale(sum(terms), S(0.5) / batch);
}

template <typename S>
Var<S> elbo_loss(const Var<S>& x, const Var<S>& recon, const typename PhenoVae<S>::Latent& latent, double beta) {
  return add(mse(recon, x), scale(kl_divergence<S>(latent), static_cast<S>(beta)));
}

double train_pheno_vae_epoch(PhenoVae<float>& model, AdamW<float>& opt, const std::vector<std::vector<double>>& rows,
                             Index batch, Rng& rng) {
  std::vector<size_t> order(rows.size());
  std::iota(order.begin(), order.end(), size_t{0});
  rng.shuffle(order);
  const Index p = model.config().input_dim;
  double total = 0;
  size_t batches = 0;
  for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch)) {
    const size_t end = std::min(order.size(), start + static_cast<size_t>(batch));
    Tensor<float> x({static_cast<Index>(end - start), p});
    for (size_t r = start; r < end; ++r)
      for (Index j = 0; j < p; ++j) x[static_cast<Index>(r - start) * p + j] = static_cast<float>(rows[order[r]][j]);
    Var<float> xv = constant(std::move(x));
    auto latent = model.encode(xv);
    Var<float> z = model.reparameterize(latent, rng);
    Var<float> loss = elbo_loss<float>(xv, model.decode(z), latent, model.config().beta);
    if (!std::isfinite(loss.value()[0])) throw std::runtime_error("pheno VAE loss is not finite");
    backward(loss);
    opt.step();
    total += loss.value()[0];
    ++batches;
  }
  return total / static_cast<double>(batches);
}

std::optional<size_t> phenotype_violation(const std::vector<double>& x) {
  if (!(x[kEda] > 0)) return kEda;
  if (!(x[kEsa] > 0)) return kEsa;
  if (!(x[kEfArea] > 0 && x[kEfArea] < 1)) return kEfArea;
  if (!(x[kWall] > 0)) return kWall;
  if (!(x[kNoise] >= 0)) return kNoise;
  for (size_t j = 0; j < x.size(); ++j)
    if (!std::isfinite(x[j])) return j;
  return std::nullopt;
}

std::vector<std::vector<double>> sample_phenotypes(const PhenoVae<float>& model, const Normalization& norm, size_t n,
                                                   const Rng& rng) {
  NoGradGuard no_grad;
  const Index latent = model.config().latent_dim;
  std::vector<std::vector<double>> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    Rng stream = rng.derive(i);
    std::optional<size_t> violated;
    bool accepted = false;
    for (int attempt = 0; attempt < 100 && !accepted; ++attempt) {
      Tensor<float> z({1, latent});
      for (auto& v : z.values()) v = static_cast<float>(stream.normal());
      Var<float> decoded = model.decode(constant(std::move(z)));
      std::vector<double> normalized(decoded.value().values().begin(), decoded.value().values().end());
      std::vector<double> physical = norm.denormalize(normalized);
      violated = phenotype_violation(physical);
      if (!violated) {
        out.push_back(std::move(physical));
        accepted = true;
      }
    }
    if (!accepted) {
      throw std::runtime_error("sample_phenotypes: 100 rejected draws, last violation in '" +
                               phenotype_names()[*violated] + "'");
    }
  }
  return out;
}

template class PhenoVae<float>;
template class PhenoVae<double>;
template Var<float> kl_divergence<float>(const PhenoVae<float>::Latent&);
template Var<double> kl_divergence<double>(const PhenoVae<double>::Latent&);
template Var<float> elbo_loss<float>(const Var<float>&, const Var<float>&, const PhenoVae<float>::Latent&, double);
template Var<double> elbo_loss<double>(const Var<double>&, const Var<double>&, const PhenoVae<double>::Latent&, double);

}  // namespace cpgg
