#include "cpgg/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace cpgg {

template <typename S>
Var<S> ParamStore<S>::add(const std::string& name, Tensor<S> init) {
  for (const auto& e : entries_) {
    if (e.first == name) throw std::logic_error("duplicate parameter name: " + name);
  }
  Var<S> v(std::move(init), true);
  entries_.emplace_back(name, v);
  return v;
}

template <typename S>
const Var<S>& ParamStore<S>::at(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.first == name) return e.second;
  }
  throw std::out_of_range("no parameter named " + name);
}

template <typename S>
Index ParamStore<S>::scalar_count() const {
  Index n = 0;
  for (const auto& e : entries_) n += e.second.size();
  return n;
}

template <typename S>
void ParamStore<S>::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

template <typename S>
void ParamStore<S>::copy_values_from(const ParamStore& other) {
  if (other.entries_.size() != entries_.size()) throw std::logic_error("parameter layouts differ");
  for (size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].first != other.entries_[i].first ||
        entries_[i].second.shape() != other.entries_[i].second.shape()) {
      throw std::logic_error("parameter layouts differ at " + entries_[i].first);
    }
    entries_[i].second.mutable_value() = other.entries_[i].second.value();
  }
}

template <typename S>
Tensor<S> xavier_uniform(Index fan_in, Index fan_out, Shape shape, Rng& rng) {
  Tensor<S> t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : t.values()) v = static_cast<S>(rng.uniform(-bound, bound));
  return t;
}

template <typename S>
Tensor<S> normal_init(Shape shape, double stddev, Rng& rng) {
  Tensor<S> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<S>(stddev * rng.normal());
  return t;
}

template <typename S>
Linear<S>::Linear(ParamStore<S>& store, const std::string& name, Index in, Index out, Rng& rng, double gain) {
  Tensor<S> init = xavier_uniform<S>(in, out, {in, out}, rng);
  init.vec() *= static_cast<S>(gain);
  w = store.add(name + ".w", std::move(init));
  b = store.add(name + ".b", Tensor<S>({out}));
}

template <typename S>
LayerNorm<S>::LayerNorm(ParamStore<S>& store, const std::string& name, Index width) {
  gamma = store.add(name + ".gamma", Tensor<S>({width}, S(1)));
  beta = store.add(name + ".beta", Tensor<S>({width}));
}

template <typename S>
TransformerBlock<S>::TransformerBlock(ParamStore<S>& store, const std::string& name, Index width, int h,
                                      Index mlp_ratio, Rng& rng)
    : heads(h) {
  ln1 = LayerNorm<S>(store, name + ".ln1", width);
  wq = Linear<S>(store, name + ".attn.q", width, width, rng);
  wk = Linear<S>(store, name + ".attn.k", width, width, rng);
  wv = Linear<S>(store, name + ".attn.v", width, width, rng);
  wo = Linear<S>(store, name + ".attn.o", width, width, rng);
  ln2 = LayerNorm<S>(store, name + ".ln2", width);
  fc1 = Linear<S>(store, name + ".mlp.fc1", width, width * mlp_ratio, rng);
  fc2 = Linear<S>(store, name + ".mlp.fc2", width * mlp_ratio, width, rng);
}

template <typename S>
Var<S> TransformerBlock<S>::operator()(const Var<S>& x) const {
  Var<S> h = ln1(x);
  Var<S> a = wo(attention(wq(h), wk(h), wv(h), heads));
  Var<S> r = add(x, a);
  return add(r, fc2(silu(fc1(ln2(r)))));
}

template <typename S>
AdamW<S>::AdamW(ParamStore<S>& params, Options options) : params_(&params), options_(options) {
  for (const auto& e : params.entries()) {
    m_.emplace_back(e.second.shape());
    v_.emplace_back(e.second.shape());
  }
}

template <typename S>
void AdamW<S>::step() {
  auto& entries = params_->entries();
  double scale_factor = 1.0;
  double sq = 0.0;
  for (auto& [name, p] : entries) {
    if (!p.has_grad()) continue;
    for (S g : p.grad().values()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw std::runtime_error("non-finite gradient in parameter '" + name + "' at step " +
                                 std::to_string(step_ + 1));
      }
      sq += static_cast<double>(g) * static_cast<double>(g);
    }
  }
  if (options_.clip_norm > 0.0) {
    double norm = std::sqrt(sq);
    if (norm > options_.clip_norm) scale_factor = options_.clip_norm / norm;
  }

  ++step_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  const double lr = options_.lr;
  for (size_t i = 0; i < entries.size(); ++i) {
    auto& p = entries[i].second;
    if (!p.has_grad()) continue;
    S* w = p.mutable_value().data();
    const S* g = p.grad().data();
    S* m = m_[i].data();
    S* v = v_[i].data();
    // Weight decay only on matrices and kernels; vectors (biases, norms) are exempt.
    const double wd = p.value().rank() >= 2 ? options_.weight_decay : 0.0;
    for (Index j = 0; j < p.size(); ++j) {
      const double gj = static_cast<double>(g[j]) * scale_factor;
      m[j] = static_cast<S>(b1 * m[j] + (1.0 - b1) * gj);
      v[j] = static_cast<S>(b2 * v[j] + (1.0 - b2) * gj * gj);
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      double wj = static_cast<double>(w[j]) * (1.0 - lr * wd);
      wj -= lr * mhat / (std::sqrt(vhat) + options_.eps);
      w[j] = static_cast<S>(wj);
    }
  }
  params_->zero_grad();
}

#define CPGG_INSTANTIATE_NN(S)                                                     \
  template class ParamStore<S>;                                                    \
  template Tensor<S> xavier_uniform<S>(Index, Index, Shape, Rng&);                 \
  template Tensor<S> normal_init<S>(Shape, double, Rng&);                          \
  template struct Linear<S>;                                                       \
  template struct LayerNorm<S>;                                                    \
  template struct TransformerBlock<S>;                                             \
  template class AdamW<S>;

CPGG_INSTANTIATE_NN(float)
CPGG_INSTANTIATE_NN(double)

}  // namespace cpgg
