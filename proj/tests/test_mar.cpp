#include "doctest.h"

#include "cpgg/cine_vae.hpp"
#include "cpgg/dataset.hpp"
#include "cpgg/mar.hpp"
#include "support/grad_check.hpp"

#include <cmath>
#include <numeric>

using namespace cpgg;
using testing::grad_check;
using testing::random_tensor;

namespace {

MarConfig tiny_config() {
  MarConfig c;
  c.latent_shape = {2, 2, 4, 4};
  c.patch = {1, 2, 2};
  c.cond_dim = 3;
  c.width = 8;
  c.heads = 2;
  c.encoder_depth = 1;
  c.decoder_depth = 1;
  c.mlp_ratio = 2;
  c.head_width = 8;
  c.head_blocks = 1;
  c.diffusion_steps = 20;
  return c;
}

}  // namespace

TEST_CASE("patchify shape law and round trip") {
  Rng rng(1);
  const Tensor<double> desk = random_tensor({4, 4, 8, 8}, rng);
  const auto seq = patchify(desk, Triple{2, 2, 2});
  CHECK(seq.tokens.shape() == Shape{32, 32});
  CHECK(seq.positions.size() == 32);
  const Tensor<double> back = unpatchify(seq, desk.shape(), Triple{2, 2, 2});
  for (Index i = 0; i < desk.size(); ++i) CHECK(back[i] == desk[i]);

  const Tensor<float> paper({16, 25, 12, 12});
  const auto big = patchify(paper, Triple{5, 2, 2});
  CHECK(big.tokens.shape() == Shape{180, 320});

  // Positions are unique and cover the grid.
  std::vector<int> hit(32, 0);
  for (const auto& p : seq.positions) ++hit[static_cast<size_t>((p[0] * 4 + p[1]) * 4 + p[2])];
  for (int h : hit) CHECK(h == 1);

  // Token content: first token is the (0,0,0) 2x2x2 corner of every channel.
  CHECK(seq.tokens[0] == desk[0]);
  CHECK(seq.tokens[1] == desk[1]);
  CHECK(seq.tokens[2] == desk[8]);
  CHECK(seq.tokens[8] == desk[4 * 8 * 8]);

  CHECK_THROWS_AS(patchify(random_tensor({4, 3, 8, 8}, rng), Triple{2, 2, 2}), ShapeError);
}

TEST_CASE("mask sampling") {
  CHECK(masked_count(0.75, 32) == 24);
  CHECK(masked_count(1.0, 32) == 32);
  CHECK(masked_count(0.7, 10) == 7);
  CHECK(masked_count(0.71, 10) == 8);

  Rng rng(2);
  auto all = sample_mask(32, rng, 1.0, 1.0);
  CHECK(std::accumulate(all.begin(), all.end(), 0) == 32);
  for (int k = 0; k < 100; ++k) {
    auto m = sample_mask(32, rng, 0.75, 0.75);
    CHECK(std::accumulate(m.begin(), m.end(), 0) == 24);
  }

  // Monte-Carlo ratio mean; the ceiling bias is O(1/N) so use a long sequence.
  const Index n = 256;
  double total = 0;
  for (int k = 0; k < 10000; ++k) {
    auto m = sample_mask(n, rng, 0.7, 1.0);
    const int c = std::accumulate(m.begin(), m.end(), 0);
    CHECK(c >= masked_count(0.7, n));
    total += static_cast<double>(c) / static_cast<double>(n);
  }
  CHECK(std::abs(total / 10000 - 0.85) < 0.01);

  // At N = 32 compare with the exact expectation of ceil(mN)/N.
  double expect = 0;
  const int grid = 300000;
  for (int g = 0; g < grid; ++g) expect += static_cast<double>(masked_count(0.7 + 0.3 * (g + 0.5) / grid, 32)) / 32 / grid;
  double small = 0;
  for (int k = 0; k < 10000; ++k) {
    auto m = sample_mask(32, rng, 0.7, 1.0);
    small += std::accumulate(m.begin(), m.end(), 0) / 32.0;
  }
  CHECK(std::abs(small / 10000 - expect) < 0.005);

  // Selection is uniform: every position is masked about equally often.
  std::vector<int> freq(32, 0);
  for (int k = 0; k < 8000; ++k) {
    auto m = sample_mask(32, rng, 0.5, 0.5);
    for (size_t i = 0; i < 32; ++i) freq[i] += m[i];
  }
  for (int f : freq) CHECK(std::abs(f / 8000.0 - 0.5) < 0.03);
  CHECK_THROWS(sample_mask(32, rng, 0.8, 0.7));
}

TEST_CASE("factorization check") {
  std::vector<Index> every(8);
  std::iota(every.begin(), every.end(), Index{0});
  CHECK_NOTHROW(factorization_check({every}, 8));
  std::vector<std::vector<Index>> singles;
  for (Index i = 7; i >= 0; --i) singles.push_back({i});
  CHECK_NOTHROW(factorization_check(singles, 8));
  CHECK_THROWS_WITH(factorization_check({{0, 1, 2}, {2, 3, 4, 5, 6, 7}}, 8), doctest::Contains("token 2"));
  CHECK_THROWS_WITH(factorization_check({{0, 1, 2}, {3, 4, 5, 6}}, 8), doctest::Contains("never decoded"));
  CHECK_THROWS(factorization_check({{0, 1, 2, 3, 4, 5, 6, 8}}, 8));
}

TEST_CASE("forward pass") {
  Rng init(3);
  const MarConfig cfg = tiny_config();
  Mar<double> mar(cfg, init);
  Rng rng(4);
  const auto seq = patchify(random_tensor(cfg.latent_shape, rng), cfg.patch);
  const Index n = cfg.token_count();
  const std::vector<double> cond{0.5, -1.0, 2.0}, other{-0.3, 0.8, 0.1};
  std::vector<uint8_t> mask{1, 0, 1, 1, 0, 0, 1, 1};

  const Var<double> z = mar.forward(seq.tokens, seq.positions, mask, &cond);
  CHECK(z.shape() == Shape{n, cfg.width});

  SUBCASE("all masked is legal") {
    const std::vector<uint8_t> full(static_cast<size_t>(n), 1);
    CHECK(mar.forward(seq.tokens, seq.positions, full, nullptr).shape() == Shape{n, cfg.width});
  }

  SUBCASE("permutation equivariance") {
    const std::vector<Index> perm{5, 2, 7, 0, 3, 1, 6, 4};
    TokenSequence<double> shuffled;
    shuffled.tokens = Tensor<double>(seq.tokens.shape());
    std::vector<uint8_t> pmask;
    for (size_t r = 0; r < perm.size(); ++r) {
      shuffled.tokens.mat().row(static_cast<Index>(r)) = seq.tokens.mat().row(perm[r]);
      shuffled.positions.push_back(seq.positions[static_cast<size_t>(perm[r])]);
      pmask.push_back(mask[static_cast<size_t>(perm[r])]);
    }
    const Var<double> zp = mar.forward(shuffled.tokens, shuffled.positions, pmask, &cond);
    for (size_t r = 0; r < perm.size(); ++r)
      for (Index k = 0; k < cfg.width; ++k)
        CHECK(zp.value()[static_cast<Index>(r) * cfg.width + k] ==
              doctest::Approx(z.value()[perm[r] * cfg.width + k]).epsilon(1e-10));
  }

  SUBCASE("condition and null condition change z") {
    const Var<double> z2 = mar.forward(seq.tokens, seq.positions, mask, &other);
    const Var<double> zn = mar.forward(seq.tokens, seq.positions, mask, nullptr);
    CHECK((z.value().vec() - z2.value().vec()).norm() > 1e-6);
    CHECK((z.value().vec() - zn.value().vec()).norm() > 1e-6);
  }

  CHECK_THROWS_AS(mar.forward(seq.tokens, seq.positions, std::vector<uint8_t>(3, 1), &cond), ShapeError);
  const std::vector<double> wrong{1.0};
  CHECK_THROWS_AS(mar.forward(seq.tokens, seq.positions, mask, &wrong), ShapeError);
}

TEST_CASE("masked-only loss") {
  Rng init(5);
  const MarConfig cfg = tiny_config();
  Mar<double> mar(cfg, init);
  Rng data(6);
  const auto seq = patchify(random_tensor(cfg.latent_shape, data), cfg.patch);
  const std::vector<double> cond{0.1, 0.2, -0.4};
  const std::vector<uint8_t> mask{0, 1, 1, 0, 1, 0, 1, 1};

  Var<double> targets(seq.tokens, true);
  Rng rng(7);
  Var<double> l = mar.loss(seq.tokens, targets, seq.positions, mask, &cond, rng);
  CHECK(std::isfinite(l.value()[0]));
  backward(l);
  const Index d = cfg.token_dim();
  for (Index i = 0; i < cfg.token_count(); ++i) {
    double norm = 0;
    for (Index k = 0; k < d; ++k) norm += std::abs(targets.grad()[i * d + k]);
    if (mask[static_cast<size_t>(i)]) {
      CHECK(norm > 0.0);
    } else {
      CHECK(norm == 0.0);
    }
  }

  std::vector<Var<double>> params;
  for (auto& e : mar.params().entries()) params.push_back(e.second);
  const double err = grad_check(params, [&](std::vector<Var<double>>&) {
    Rng r(8);
    return mar.loss(seq.tokens, constant(seq.tokens), seq.positions, mask, &cond, r);
  });
  CHECK(err < 1e-4);

  CHECK_THROWS(mar.loss(seq.tokens, targets, seq.positions, std::vector<uint8_t>(8, 0), &cond, rng));
}

TEST_CASE("200 steps on phantom latents reduce the smoothed loss by 30%") {
  DatasetOptions opts;
  opts.n = 64;
  opts.seed = 41;
  Dataset d = build_dataset(opts);
  std::vector<const Tensor<float>*> cines;
  for (const auto& c : d.cines) cines.push_back(&c.voxels);
  Rng vae_init(1);
  CineVae<float> vae(CineVaeConfig{}, vae_init);
  AdamW<float> vae_opt(vae.params(), {.lr = 2e-3});
  Rng vae_rng(2);
  train_cine_vae_epoch(vae, vae_opt, cines, 8, vae_rng);
  const auto latents = encode_means(vae, cines);
  const LatentStats stats = LatentStats::fit(latents);

  std::vector<TokenSequence<float>> seqs;
  std::vector<std::vector<double>> conds;
  for (size_t i = 0; i < latents.size(); ++i) {
    seqs.push_back(patchify(stats.standardize(latents[i]), Triple{2, 2, 2}));
    conds.push_back(d.norm.normalize(d.phenotypes[i]));
  }
  Rng init(3);
  Mar<float> mar(MarConfig{}, init);
  AdamW<float> opt(mar.params(), {.lr = 1e-3});
  Rng rng(4);
  std::vector<double> losses;
  for (int step = 0; step < 200; ++step) {
    std::vector<MarSample> batch;
    for (int k = 0; k < 16; ++k) {
      const size_t i = rng.below(seqs.size());
      batch.push_back({&seqs[i], &conds[i]});
    }
    losses.push_back(mar_train_step(mar, opt, batch, rng));
    REQUIRE(std::isfinite(losses.back()));
  }
  const double first = std::accumulate(losses.begin(), losses.begin() + 20, 0.0) / 20;
  const double last = std::accumulate(losses.end() - 20, losses.end(), 0.0) / 20;
  CHECK(last < 0.7 * first);
}
