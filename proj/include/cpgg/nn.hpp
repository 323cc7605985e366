#pragma once

#include "cpgg/ops.hpp"
#include "cpgg/rng.hpp"

#include <string>
#include <utility>
#include <vector>

namespace cpgg {

/// Ordered, named collection of trainable tensors. Names are the keys used
/// by checkpoints, so they must be unique and stable.
template <typename S>
class ParamStore {
 public:
  using Entry = std::pair<std::string, Var<S>>;

  Var<S> add(const std::string& name, Tensor<S> init);

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  const Var<S>& at(const std::string& name) const;
  Index scalar_count() const;
  void zero_grad();
  /// Copies values by name from another store with identical layout.
  void copy_values_from(const ParamStore& other);

 private:
  std::vector<Entry> entries_;
};

template <typename S>
Tensor<S> xavier_uniform(Index fan_in, Index fan_out, Shape shape, Rng& rng);
template <typename S>
Tensor<S> normal_init(Shape shape, double stddev, Rng& rng);

template <typename S>
struct Linear {
  Var<S> w, b;
  Linear() = default;
  Linear(ParamStore<S>& store, const std::string& name, Index in, Index out, Rng& rng, double gain = 1.0);
  Var<S> operator()(const Var<S>& x) const { return linear(x, w, b); }
};

template <typename S>
struct LayerNorm {
  Var<S> gamma, beta;
  LayerNorm() = default;
  LayerNorm(ParamStore<S>& store, const std::string& name, Index width);
  Var<S> operator()(const Var<S>& x) const { return layernorm(x, gamma, beta); }
};

/// Pre-norm transformer block with bidirectional self-attention and a SiLU MLP.
template <typename S>
struct TransformerBlock {
  LayerNorm<S> ln1, ln2;
  Linear<S> wq, wk, wv, wo, fc1, fc2;
  int heads = 1;

  TransformerBlock() = default;
  TransformerBlock(ParamStore<S>& store, const std::string& name, Index width, int heads, Index mlp_ratio,
                   Rng& rng);
  Var<S> operator()(const Var<S>& x) const;
};

/// Decoupled-weight-decay Adam. Moments are kept per parameter name so the
/// state round-trips through checkpoints.
template <typename S>
class AdamW {
 public:
  struct Options {
    double lr = 8e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    /// Global L2 clip on the gradient; <= 0 disables.
    double clip_norm = 0.0;
  };

  AdamW(ParamStore<S>& params, Options options);

  /// Applies one update using the accumulated gradients, then clears them.
  /// Throws if any gradient is non-finite, naming the parameter.
  void step();

  long long step_count() const { return step_; }
  void set_step_count(long long s) { step_ = s; }
  Options& options() { return options_; }
  std::vector<Tensor<S>>& first_moments() { return m_; }
  std::vector<Tensor<S>>& second_moments() { return v_; }

 private:
  ParamStore<S>* params_;
  Options options_;
  std::vector<Tensor<S>> m_, v_;
  long long step_ = 0;
};

}  // namespace cpgg
