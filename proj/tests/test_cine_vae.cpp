#include "doctest.h"

#include "cpgg/cine_vae.hpp"
#include "cpgg/dataset.hpp"
#include "support/grad_check.hpp"

#include <cmath>

using namespace cpgg;
using testing::grad_check;
using testing::random_tensor;

namespace {

CineVaeConfig tiny_config() {
  CineVaeConfig c;
  c.latent_channels = 2;
  c.widths = {2, 3};
  c.strides = {{1, 2, 2}, {2, 1, 1}};
  return c;
}

}  // namespace

TEST_CASE("latent shape law") {
  const CineVaeConfig desk;
  CHECK(desk.factors() == Triple{2, 4, 4});
  CHECK(desk.latent_shape({1, 8, 32, 32}) == Shape{4, 4, 8, 8});
  CHECK_THROWS_WITH_AS(desk.latent_shape({1, 7, 32, 32}), doctest::Contains("f_t=2"), ShapeError);
  CHECK_THROWS_WITH_AS(desk.latent_shape({1, 8, 30, 32}), doctest::Contains("f_s=4x4"), ShapeError);

  Rng init(1);
  CineVae<float> vae(desk, init);
  Var<float> x = constant(Tensor<float>({1, 8, 32, 32}));
  auto latent = vae.encode(x);
  CHECK(latent.mu.shape() == Shape{4, 4, 8, 8});
  CHECK(latent.logvar.shape() == Shape{4, 4, 8, 8});
  for (float v : latent.mu.value().values()) CHECK(std::isfinite(v));
  for (float v : latent.logvar.value().values()) CHECK(std::isfinite(v));
  Var<float> y = vae.decode(latent.mu);
  CHECK(y.shape() == Shape{1, 8, 32, 32});
  for (float v : y.value().values()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  CHECK_THROWS_AS(vae.decode(constant(Tensor<float>({3, 4, 8, 8}))), ShapeError);
}

TEST_CASE("published-scale factors: (1,50,96,96) -> (16,25,12,12)") {
  CineVaeConfig paper;
  paper.latent_channels = 16;
  paper.widths = {2, 2, 2, 2};
  paper.strides = {{1, 2, 2}, {1, 2, 2}, {1, 2, 2}, {2, 1, 1}};
  CHECK(paper.factors() == Triple{2, 8, 8});
  Rng init(2);
  CineVae<float> vae(paper, init);
  NoGradGuard no_grad;
  Rng data(3);
  Tensor<float> x({1, 50, 96, 96});
  for (auto& v : x.values()) v = static_cast<float>(data.uniform());
  auto latent = vae.encode(constant(x));
  CHECK(latent.mu.shape() == Shape{16, 25, 12, 12});
  CHECK(vae.decode(latent.mu).shape() == Shape{1, 50, 96, 96});
}

TEST_CASE("VAE loss") {
  Rng rng(4);
  Tensor<double> c({1, 2, 4, 4});
  for (auto& v : c.values()) v = rng.uniform();
  const CineVae<double>::Latent zero{constant(Tensor<double>({2, 1, 2, 2})), constant(Tensor<double>({2, 1, 2, 2}))};
  CHECK(cine_vae_loss<double>(constant(c), constant(c), zero, 1e-4).value()[0] == 0.0);

  for (int trial = 0; trial < 20; ++trial) {
    const CineVae<double>::Latent l{constant(random_tensor({2, 1, 2, 2}, rng, 2.0)),
                                    constant(random_tensor({2, 1, 2, 2}, rng, 2.0))};
    // With identical recon and target only the KL term remains.
    CHECK(cine_vae_loss<double>(constant(c), constant(c), l, 1.0).value()[0] >= 0.0);
  }
}

TEST_CASE("gradient check on a tiny config") {
  Rng init(5);
  CineVae<double> vae(tiny_config(), init);
  Rng data(6);
  Tensor<double> x({1, 4, 4, 4});
  for (auto& v : x.values()) v = data.uniform();
  std::vector<Var<double>> params;
  for (auto& e : vae.params().entries()) params.push_back(e.second);
  const double err = grad_check(params, [&](std::vector<Var<double>>&) {
    Rng eps(7);
    auto l = vae.encode(constant(x));
    return cine_vae_loss<double>(constant(x), vae.decode(vae.reparameterize(l, eps)), l, 0.1);
  });
  CHECK(err < 1e-4);
}

TEST_CASE("latent statistics") {
  Rng rng(8);
  std::vector<Tensor<float>> latents;
  for (int i = 0; i < 40; ++i) {
    Tensor<float> t({3, 2, 4, 4});
    for (Index c = 0; c < 3; ++c)
      for (Index k = 0; k < 32; ++k) t[c * 32 + k] = static_cast<float>(2.0 * c - 1.0 + (0.5 + c) * rng.normal());
    latents.push_back(std::move(t));
  }
  const LatentStats stats = LatentStats::fit(latents);
  std::vector<double> s(3, 0), s2(3, 0);
  for (const auto& l : latents) {
    const Tensor<float> z = stats.standardize(l);
    for (Index c = 0; c < 3; ++c)
      for (Index k = 0; k < 32; ++k) {
        s[static_cast<size_t>(c)] += z[c * 32 + k];
        s2[static_cast<size_t>(c)] += z[c * 32 + k] * z[c * 32 + k];
      }
    const Tensor<float> back = stats.destandardize(z);
    for (Index i = 0; i < l.size(); ++i) CHECK(std::abs(back[i] - l[i]) < 1e-6 * std::max(1.0f, std::abs(l[i])));
  }
  const double n = 40 * 32;
  for (size_t c = 0; c < 3; ++c) {
    CHECK(std::abs(s[c] / n) < 1e-3);
    CHECK(std::sqrt(s2[c] / n) == doctest::Approx(1.0).epsilon(0.05));
  }
}

TEST_CASE("training reduces validation reconstruction error tenfold") {
  DatasetOptions opts;
  opts.n = 80;
  opts.seed = 31;
  Dataset d = build_dataset(opts);
  std::vector<const Tensor<float>*> train, val;
  for (const auto& r : d.manifest) (r.split == Split::kTrain ? train : val).push_back(&d.cines[static_cast<size_t>(r.id)].voxels);

  Rng init(1);
  CineVae<float> vae(CineVaeConfig{}, init);
  AdamW<float> opt(vae.params(), {.lr = 2e-3});
  const double before = reconstruction_mse(vae, val);
  Rng rng(2);
  for (int e = 0; e < 8; ++e) train_cine_vae_epoch(vae, opt, train, 8, rng);
  const double after = reconstruction_mse(vae, val);
  CHECK(after * 10 < before);
}
