#include "doctest.h"
#include "support/grad_check.hpp"

#include "cpgg/nn.hpp"

#include <cmath>

using namespace cpgg;
using cpgg::testing::grad_check;
using cpgg::testing::probe;
using cpgg::testing::random_param;
using cpgg::testing::random_tensor;
using cpgg::testing::VarD;

namespace {

constexpr double kGradTol = 1e-4;

// Direct correlation over every output voxel and kernel tap.
Tensor<double> naive_conv3d(const Tensor<double>& x, const Tensor<double>& w, Triple st, Triple pd) {
  const Index ci = x.dim(0), t = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index co = w.dim(0), kt = w.dim(2), kh = w.dim(3), kw = w.dim(4);
  const Index ot = (t + 2 * pd[0] - kt) / st[0] + 1;
  const Index oh = (h + 2 * pd[1] - kh) / st[1] + 1;
  const Index ow = (wd + 2 * pd[2] - kw) / st[2] + 1;
  Tensor<double> y({co, ot, oh, ow});
  for (Index o = 0; o < co; ++o)
    for (Index a = 0; a < ot; ++a)
      for (Index b = 0; b < oh; ++b)
        for (Index c = 0; c < ow; ++c) {
          double acc = 0;
          for (Index i = 0; i < ci; ++i)
            for (Index dt = 0; dt < kt; ++dt)
              for (Index dh = 0; dh < kh; ++dh)
                for (Index dw = 0; dw < kw; ++dw) {
                  Index it = a * st[0] - pd[0] + dt, ih = b * st[1] - pd[1] + dh, iw = c * st[2] - pd[2] + dw;
                  if (it < 0 || ih < 0 || iw < 0 || it >= t || ih >= h || iw >= wd) continue;
                  acc += x[((i * t + it) * h + ih) * wd + iw] * w[(((o * ci + i) * kt + dt) * kh + dh) * kw + dw];
                }
          y[((o * ot + a) * oh + b) * ow + c] = acc;
        }
  return y;
}

Tensor<double> naive_attention(const Tensor<double>& q, const Tensor<double>& k, const Tensor<double>& v,
                               int heads) {
  const Index n = q.dim(0), m = k.dim(0), d = q.dim(1), dh = d / heads;
  Tensor<double> out({n, d});
  for (int h = 0; h < heads; ++h)
    for (Index i = 0; i < n; ++i) {
      std::vector<double> s(static_cast<size_t>(m));
      double mx = -1e300;
      for (Index j = 0; j < m; ++j) {
        double dot = 0;
        for (Index c = 0; c < dh; ++c) dot += q[i * d + h * dh + c] * k[j * d + h * dh + c];
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (Index c = 0; c < dh; ++c) {
        double acc = 0;
        for (Index j = 0; j < m; ++j) acc += s[j] / z * v[j * d + h * dh + c];
        out[i * d + h * dh + c] = acc;
      }
    }
  return out;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape() == b.shape());
  return (a.vec() - b.vec()).cwiseAbs().maxCoeff();
}

}  // namespace

TEST_CASE("matmul examples and shape errors") {
  Tensor<double> a({2, 2}, {1, 2, 3, 4});
  Tensor<double> b({2, 1}, {5, 6});
  auto y = matmul(constant(a), constant(b));
  CHECK(y.shape() == Shape{2, 1});
  CHECK(y.value()[0] == 17);
  CHECK(y.value()[1] == 39);

  Rng rng(1);
  Tensor<double> eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto m = random_tensor({3, 5}, rng);
  CHECK(max_abs_diff(matmul(constant(eye), constant(m)).value(), m) == 0.0);

  CHECK(matmul(constant(random_tensor({2, 3}, rng)), constant(random_tensor({3, 4}, rng))).shape() ==
        Shape{2, 4});
  try {
    matmul(constant(random_tensor({2, 3}, rng)), constant(random_tensor({4, 4}, rng)));
    FAIL("expected shape error");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("(2,3)") != std::string::npos);
    CHECK(msg.find("(4,4)") != std::string::npos);
  }
  CHECK_THROWS_AS(add(constant(random_tensor({2, 3}, rng)), constant(random_tensor({3, 2}, rng))), ShapeError);
}

TEST_CASE("conv3d matches naive correlation and shape law") {
  Rng rng(2);
  // Identity 1x1x1 kernel.
  auto x = random_tensor({2, 3, 4, 5}, rng);
  Tensor<double> w({2, 2, 1, 1, 1}, {1, 0, 0, 1});
  CHECK(max_abs_diff(conv3d(constant(x), constant(w), {1, 1, 1}, {0, 0, 0}).value(), x) == 0.0);

  // Shape law.
  {
    Tensor<float> big({1, 8, 32, 32});
    Tensor<float> k({8, 1, 3, 3, 3});
    auto y = conv3d(constant(big), constant(k), {1, 2, 2}, {1, 1, 1});
    CHECK(y.shape() == Shape{8, 8, 16, 16});
  }

  for (Triple st : {Triple{1, 1, 1}, Triple{1, 2, 2}, Triple{2, 1, 1}, Triple{2, 2, 3}}) {
    auto xi = random_tensor({3, 5, 7, 6}, rng);
    auto wi = random_tensor({4, 3, 3, 2, 3}, rng);
    auto y = conv3d(constant(xi), constant(wi), st, {1, 1, 1}).value();
    CHECK(max_abs_diff(y, naive_conv3d(xi, wi, st, {1, 1, 1})) < 1e-10);
  }

  CHECK_THROWS_AS(conv3d(constant(random_tensor({1, 2, 2, 2}, rng)), constant(random_tensor({1, 1, 5, 1, 1}, rng)),
                         {1, 1, 1}, {1, 1, 1}),
                  ShapeError);
}

TEST_CASE("attention examples") {
  Rng rng(3);
  SUBCASE("single token returns its value row") {
    auto q = random_tensor({1, 4}, rng), k = random_tensor({1, 4}, rng), v = random_tensor({1, 4}, rng);
    CHECK(max_abs_diff(attention(constant(q), constant(k), constant(v), 2).value(), v) < 1e-15);
  }
  SUBCASE("identical tokens average the values") {
    auto row = random_tensor({1, 4}, rng);
    Tensor<double> qk({2, 4});
    qk.mat().row(0) = row.mat().row(0);
    qk.mat().row(1) = row.mat().row(0);
    auto v = random_tensor({2, 4}, rng);
    auto y = attention(constant(qk), constant(qk), constant(v), 2).value();
    for (Index r = 0; r < 2; ++r)
      for (Index c = 0; c < 4; ++c) CHECK(y.mat()(r, c) == doctest::Approx(0.5 * (v.mat()(0, c) + v.mat()(1, c))));
  }
  SUBCASE("random inputs match per-head loops") {
    auto q = random_tensor({4, 8}, rng), k = random_tensor({4, 8}, rng), v = random_tensor({4, 8}, rng);
    CHECK(max_abs_diff(attention(constant(q), constant(k), constant(v), 2).value(), naive_attention(q, k, v, 2)) <
          1e-10);
  }
  CHECK_THROWS_AS(attention(constant(random_tensor({2, 6}, rng)), constant(random_tensor({2, 6}, rng)),
                            constant(random_tensor({2, 6}, rng)), 4),
                  ShapeError);
}

TEST_CASE("activation and normalization examples") {
  auto y = leaky_relu(constant(Tensor<double>({1}, {-1.0})), 0.01);
  CHECK(y.value()[0] == doctest::Approx(-0.01));

  auto s = softmax_rows(constant(Tensor<double>({1, 5}, 3.0)));
  for (double v : s.value().values()) CHECK(v == doctest::Approx(0.2));

  Rng rng(4);
  auto x = random_tensor({3, 16}, rng, 5.0);
  auto ln = layernorm(constant(x), constant(Tensor<double>({16}, 1.0)), constant(Tensor<double>({16})));
  for (Index r = 0; r < 3; ++r) {
    auto row = ln.value().mat().row(r);
    double mu = row.mean();
    double var = (row.array() - mu).square().mean();
    CHECK(std::abs(mu) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("backward examples") {
  Rng rng(5);
  auto x = random_param({3, 4}, rng);
  backward(sum(x));
  for (double g : x.grad().values()) CHECK(g == 1.0);

  x.zero_grad();
  backward(sum(mul(x, x)));
  CHECK(max_abs_diff(x.grad(), [&] {
          Tensor<double> t = x.value();
          t.vec() *= 2.0;
          return t;
        }()) < 1e-15);

  // Repeated calls accumulate.
  x.zero_grad();
  auto loss = sum(x);
  backward(loss);
  backward(loss);
  for (double g : x.grad().values()) CHECK(g == 2.0);

  CHECK_THROWS_AS(backward(mul(x, x)), ShapeError);
}

TEST_CASE("gradient check: every differentiable op") {
  Rng rng(6);
  using Fn = std::function<VarD(std::vector<VarD>&)>;
  auto check = [&](const char* name, std::vector<VarD> in, Fn f) {
    double err = grad_check(std::move(in), f);
    INFO(name << " rel err " << err);
    CHECK(err < kGradTol);
  };

  check("add/sub/mul", {random_param({3, 4}, rng), random_param({3, 4}, rng)},
        [](auto& v) { return probe(mul(add(v[0], v[1]), sub(v[0], v[1]))); });
  check("scale/add_scalar", {random_param({5}, rng)},
        [](auto& v) { return probe(add_scalar(scale(v[0], 1.7), -0.3)); });
  check("scale_rows", {random_param({3, 2}, rng)}, [](auto& v) {
    std::vector<double> f{0.5, -2.0, 3.0};
    return probe(scale_rows(v[0], std::span<const double>(f)));
  });
  check("leaky_relu", {random_param({4, 4}, rng)}, [](auto& v) { return probe(leaky_relu(v[0], 0.1)); });
  check("silu", {random_param({4, 4}, rng)}, [](auto& v) { return probe(silu(v[0])); });
  check("sigmoid", {random_param({4, 4}, rng)}, [](auto& v) { return probe(sigmoid(v[0])); });
  check("exp", {random_param({4, 4}, rng, 0.5)}, [](auto& v) { return probe(exp(v[0])); });
  check("matmul", {random_param({3, 4}, rng), random_param({4, 2}, rng)},
        [](auto& v) { return probe(matmul(v[0], v[1])); });
  check("linear", {random_param({3, 4}, rng), random_param({4, 5}, rng), random_param({5}, rng)},
        [](auto& v) { return probe(linear(v[0], v[1], v[2])); });
  check("softmax_rows", {random_param({3, 5}, rng)}, [](auto& v) { return probe(softmax_rows(v[0])); });
  check("attention", {random_param({4, 8}, rng), random_param({5, 8}, rng), random_param({5, 8}, rng)},
        [](auto& v) { return probe(attention(v[0], v[1], v[2], 2)); });
  check("layernorm", {random_param({3, 6}, rng), random_param({6}, rng), random_param({6}, rng)},
        [](auto& v) { return probe(layernorm(v[0], v[1], v[2])); });
  check("group_norm", {random_param({4, 2, 3, 3}, rng), random_param({4}, rng), random_param({4}, rng)},
        [](auto& v) { return probe(group_norm(v[0], v[1], v[2], 2)); });
  check("conv3d", {random_param({2, 4, 5, 4}, rng), random_param({3, 2, 3, 3, 3}, rng), random_param({3}, rng)},
        [](auto& v) { return probe(conv3d(v[0], v[1], v[2], {2, 2, 1}, {1, 1, 1})); });
  check("upsample_nearest", {random_param({2, 2, 3, 2}, rng)},
        [](auto& v) { return probe(upsample_nearest(v[0], {2, 2, 3})); });
  check("reshape/gather/concat/slice", {random_param({4, 3}, rng), random_param({2, 3}, rng)}, [](auto& v) {
    std::vector<Index> idx{3, 0, 0, 5};
    auto cat = concat_rows<double>({v[0], v[1]});
    return probe(reshape(add(gather_rows(cat, std::span<const Index>(idx)), slice_rows(cat, 1, 4)), {2, 6}));
  });
  check("mean_rows", {random_param({4, 3}, rng)}, [](auto& v) { return probe(mean_rows(v[0])); });
  check("sum/mean", {random_param({4, 3}, rng)}, [](auto& v) { return add(sum(v[0]), scale(mean(v[0]), 3.0)); });
  check("mse", {random_param({4, 3}, rng), random_param({4, 3}, rng)}, [](auto& v) { return mse(v[0], v[1]); });
  check("row_sq_dist_mean", {random_param({4, 3}, rng), random_param({4, 3}, rng)},
        [](auto& v) { return row_sq_dist_mean(v[0], v[1]); });
  check("bce_with_logits", {random_param({6}, rng)}, [](auto& v) {
    std::vector<double> y{1, 0, 1, 1, 0, 0};
    return bce_with_logits(v[0], std::span<const double>(y));
  });

  // A composite graph reusing intermediate nodes.
  check("composite", {random_param({3, 8}, rng), random_param({8, 8}, rng), random_param({8}, rng)}, [](auto& v) {
    auto h = silu(linear(v[0], v[1], v[2]));
    auto a = attention(h, h, h, 4);
    return probe(add(mean_rows(a), mean_rows(mul(h, h))));
  });
}

TEST_CASE("AdamW") {
  SUBCASE("zero gradient and no decay leave the parameter unchanged") {
    ParamStore<double> store;
    auto p = store.add("p", Tensor<double>({3}, {1.0, -2.0, 0.5}));
    AdamW<double> opt(store, {.lr = 0.1});
    p.mutable_grad();
    opt.step();
    CHECK(p.value()[0] == 1.0);
    CHECK(p.value()[1] == -2.0);
    CHECK(opt.step_count() == 1);
  }
  SUBCASE("single bias-corrected step moves by ~lr") {
    ParamStore<double> store;
    auto p = store.add("p", Tensor<double>({1}, {1.0}));
    AdamW<double> opt(store, {.lr = 0.1, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.0});
    p.mutable_grad()[0] = 1.0;
    opt.step();
    // m_hat = v_hat = 1 after correction, so the update is lr / (1 + eps).
    CHECK(p.value()[0] == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-12));
  }
  SUBCASE("generative-model default learning rate") {
    AdamW<float>::Options opts;
    CHECK(opts.lr == doctest::Approx(8e-4));
  }
  SUBCASE("decoupled weight decay shrinks matrices only") {
    ParamStore<double> store;
    auto w = store.add("w", Tensor<double>({1, 1}, {2.0}));
    auto b = store.add("b", Tensor<double>({1}, {2.0}));
    AdamW<double> opt(store, {.lr = 0.1, .weight_decay = 0.5});
    w.mutable_grad();
    b.mutable_grad();
    opt.step();
    CHECK(w.value()[0] == doctest::Approx(2.0 * (1 - 0.05)));
    CHECK(b.value()[0] == 2.0);
  }
  SUBCASE("non-finite gradient names the parameter") {
    ParamStore<double> store;
    store.add("ok", Tensor<double>({1}));
    auto bad = store.add("blocks.0.w", Tensor<double>({1}));
    bad.mutable_grad()[0] = std::nan("");
    AdamW<double> opt(store, {});
    try {
      opt.step();
      FAIL("expected abort");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("blocks.0.w") != std::string::npos);
    }
  }
}

TEST_CASE("determinism: identical seeds give bit-identical outputs") {
  auto run = [] {
    Rng rng(42);
    ParamStore<float> store;
    TransformerBlock<float> block(store, "b", 16, 4, 2, rng);
    Tensor<float> x({5, 16});
    for (auto& v : x.values()) v = static_cast<float>(rng.normal());
    return block(constant(x)).value();
  };
  auto a = run(), b = run();
  CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
}

TEST_CASE("rng streams") {
  Rng a(7), b(7);
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(7);
  CHECK(c.derive(1).next_u64() != c.derive(2).next_u64());
  CHECK(c.state().counter == 0);
  double mean = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double z = c.normal();
    mean += z;
    sq += z * z;
  }
  mean /= n;
  CHECK(std::abs(mean) < 0.03);
  CHECK(sq / n == doctest::Approx(1.0).epsilon(0.03));
}
