#include "cpgg/downstream.hpp"

#include "cpgg/csv.hpp"
#include "cpgg/mar.hpp"
#include "cpgg/metrics.hpp"
#include "cpgg/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace cpgg {

Index MaeConfig::patch_count() const { return (height / patch) * (width_px / patch); }
Index MaeConfig::patch_dim() const { return frames * patch * patch; }

void MaeConfig::validate() const {
  if (patch <= 0 || height % patch != 0 || width_px % patch != 0) {
    throw ShapeError("MAE patch " + std::to_string(patch) + " does not tile " + std::to_string(height) + "x" +
                     std::to_string(width_px));
  }
  if (mask_ratio <= 0 || mask_ratio >= 1) throw std::invalid_argument("MAE mask ratio must lie in (0, 1)");
  if (width % heads != 0) throw std::invalid_argument("MAE width must divide by the head count");
}

template <typename S>
Tensor<S> patchify_frames(const Tensor<S>& cine, Index patch) {
  if (cine.rank() != 4 || cine.dim(0) != 1) throw ShapeError("patchify_frames expects (1, T, H, W), got " + shape_str(cine.shape()));
  const Index t = cine.dim(1), h = cine.dim(2), w = cine.dim(3);
  if (h % patch != 0 || w % patch != 0) throw ShapeError("frame size does not divide by patch " + std::to_string(patch));
  const Index ph = h / patch, pw = w / patch;
  Tensor<S> out({ph * pw, t * patch * patch});
  for (Index py = 0; py < ph; ++py)
    for (Index px = 0; px < pw; ++px) {
      S* row = out.data() + (py * pw + px) * out.row_size();
      for (Index f = 0; f < t; ++f)
        for (Index dy = 0; dy < patch; ++dy)
          for (Index dx = 0; dx < patch; ++dx)
            *row++ = cine[(f * h + py * patch + dy) * w + px * patch + dx];
    }
  return out;
}

template <typename S>
Mae<S>::Mae(const MaeConfig& config, Rng& rng, Index head_out) : config_(config), head_out_(head_out) {
  config.validate();
  const Index p = config.patch_count(), w = config.width, dw = config.decoder_width;
  embed_ = Linear<S>(params_, "mae.embed", config.patch_dim(), w, rng);
  pos_ = params_.add("mae.pos", normal_init<S>({p, w}, 0.02, rng));
  for (Index b = 0; b < config.depth; ++b)
    encoder_.emplace_back(params_, "mae.enc" + std::to_string(b), w, config.heads, config.mlp_ratio, rng);
  norm_ = LayerNorm<S>(params_, "mae.norm", w);
  dec_in_ = Linear<S>(params_, "mae.dec_in", w, dw, rng);
  mask_token_ = params_.add("mae.mask_token", normal_init<S>({1, dw}, 0.02, rng));
  dec_pos_ = params_.add("mae.dec_pos", normal_init<S>({p, dw}, 0.02, rng));
  const int dec_heads = dw % config.heads == 0 ? config.heads : 1;
  for (Index b = 0; b < config.decoder_depth; ++b)
    decoder_.emplace_back(params_, "mae.dec" + std::to_string(b), dw, dec_heads, config.mlp_ratio, rng);
  dec_norm_ = LayerNorm<S>(params_, "mae.dec_norm", dw);
  dec_out_ = Linear<S>(params_, "mae.dec_out", dw, config.patch_dim(), rng);
  if (head_out > 0) head_ = Linear<S>(params_, "head", w, head_out, rng);
}

template <typename S>
Var<S> Mae<S>::encode(const Tensor<S>& patches, const std::vector<uint8_t>& mask) const {
  const Index p = config_.patch_count();
  if (patches.shape() != Shape{p, config_.patch_dim()} || static_cast<Index>(mask.size()) != p) {
    throw ShapeError("MAE input " + shape_str(patches.shape()) + " with " + std::to_string(mask.size()) +
                     " mask entries; expected (" + std::to_string(p) + ", " + std::to_string(config_.patch_dim()) + ")");
  }
  std::vector<Index> visible;
  for (Index i = 0; i < p; ++i)
    if (!mask[static_cast<size_t>(i)]) visible.push_back(i);
  if (visible.empty()) throw std::invalid_argument("MAE needs at least one visible patch");
  const std::span<const Index> rows(visible);
  Var<S> h = add(embed_(gather_rows(constant(patches), rows)), gather_rows(pos_, rows));
  for (const auto& b : encoder_) h = b(h);
  return norm_(h);
}

template <typename S>
Var<S> Mae<S>::reconstruct(const Tensor<S>& patches, const std::vector<uint8_t>& mask) const {
  const Var<S> h = dec_in_(encode(patches, mask));
  const Index mask_row = h.value().rows();
  const Var<S> pool = concat_rows<S>({h, mask_token_});
  std::vector<Index> order;
  Index next = 0;
  for (uint8_t m : mask) order.push_back(m ? mask_row : next++);
  Var<S> seq = add(gather_rows(pool, std::span<const Index>(order)), dec_pos_);
  for (const auto& b : decoder_) seq = b(seq);
  return dec_out_(dec_norm_(seq));
}

template <typename S>
Var<S> Mae<S>::loss(const Tensor<S>& patches, const Var<S>& targets, const std::vector<uint8_t>& mask) const {
  if (targets.shape() != patches.shape()) throw ShapeError("MAE loss: targets must match patches");
  std::vector<Index> hidden;
  for (size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) hidden.push_back(static_cast<Index>(i));
  if (hidden.empty()) throw std::invalid_argument("MAE loss needs at least one hidden patch");
  const std::span<const Index> rows(hidden);
  return mse(gather_rows(reconstruct(patches, mask), rows), gather_rows(targets, rows));
}

template <typename S>
Var<S> Mae<S>::features(const Tensor<S>& patches) const {
  return mean_rows(encode(patches, std::vector<uint8_t>(static_cast<size_t>(config_.patch_count()), 0)));
}

template <typename S>
Var<S> Mae<S>::predict(const Tensor<S>& patches) const {
  if (head_out_ <= 0) throw std::logic_error("MAE built without a head");
  return head_(features(patches));
}

template <typename S>
void Mae<S>::load_shared(const Mae& other) {
  for (auto& [name, v] : params_.entries()) {
    for (const auto& [oname, ov] : other.params_.entries()) {
      if (oname != name) continue;
      if (ov.shape() != v.shape()) throw ShapeError("MAE parameter '" + name + "' changed shape");
      v.mutable_value() = ov.value();
    }
  }
}

template class Mae<float>;
template class Mae<double>;
template Tensor<float> patchify_frames<float>(const Tensor<float>&, Index);
template Tensor<double> patchify_frames<double>(const Tensor<double>&, Index);

namespace {

std::vector<Tensor<float>> patch_all(const std::vector<const Tensor<float>*>& cines, Index patch) {
  std::vector<Tensor<float>> out(cines.size());
  parallel_for(cines.size(), [&](size_t i) { out[i] = patchify_frames(*cines[i], patch); });
  return out;
}

// Shuffled minibatches of [0, n).
std::vector<std::vector<size_t>> epoch_batches(size_t n, Index batch, Rng& rng) {
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  rng.shuffle(order);
  std::vector<std::vector<size_t>> out;
  for (size_t i = 0; i < n; i += static_cast<size_t>(batch))
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + static_cast<size_t>(batch))));
  return out;
}

void check_finite(double v, const char* what, long long step) {
  if (!std::isfinite(v)) throw std::runtime_error(std::string("non-finite ") + what + " loss at step " + std::to_string(step));
}

}  // namespace

PretrainResult mae_pretrain(Mae<float>& mae, const std::vector<const Tensor<float>*>& cines,
                            const PretrainOptions& options) {
  if (cines.empty()) throw std::invalid_argument("MAE pretraining needs data");
  const MaeConfig& cfg = mae.config();
  const Shape first = cines.front()->shape();
  for (const auto* c : cines)
    if (c->shape() != first) throw ShapeError("pretraining cines differ in shape: " + shape_str(first) + " vs " + shape_str(c->shape()));
  const auto patches = patch_all(cines, cfg.patch);
  AdamW<float> opt(mae.params(), {.lr = options.lr, .weight_decay = 0.05});
  Rng rng(options.seed);
  PretrainResult out;
  for (Index e = 0; e < options.epochs; ++e) {
    double total = 0;
    for (const auto& b : epoch_batches(patches.size(), options.batch, rng)) {
      Var<float> l;
      for (size_t k = 0; k < b.size(); ++k) {
        const auto& p = patches[b[k]];
        const auto mask = sample_mask(p.rows(), rng, cfg.mask_ratio, cfg.mask_ratio);
        const Var<float> li = mae.loss(p, constant(p), mask);
        l = k == 0 ? li : add(l, li);
      }
      l = scale(l, 1.0f / static_cast<float>(b.size()));
      check_finite(l.value()[0], "MAE", opt.step_count() + 1);
      total += l.value()[0] * static_cast<double>(b.size());
      backward(l);
      opt.step();
    }
    out.epoch_loss.push_back(total / static_cast<double>(patches.size()));
  }
  return out;
}

double mae_masked_mse(const Mae<float>& mae, const std::vector<const Tensor<float>*>& cines, uint64_t seed) {
  NoGradGuard no_grad;
  const auto patches = patch_all(cines, mae.config().patch);
  std::vector<double> per(patches.size());
  const Rng root(seed);
  parallel_for(patches.size(), [&](size_t i) {
    Rng r = root.derive(i);
    const auto mask = sample_mask(patches[i].rows(), r, mae.config().mask_ratio, mae.config().mask_ratio);
    per[i] = mae.loss(patches[i], constant(patches[i]), mask).value()[0];
  });
  return std::accumulate(per.begin(), per.end(), 0.0) / static_cast<double>(per.size());
}

std::vector<Index> stratified_folds(const std::vector<Index>& ids, const std::vector<int>& labels, Index folds,
                                    uint64_t seed) {
  if (ids.size() != labels.size()) throw std::invalid_argument("ids and labels differ in length");
  if (folds < 2) throw std::invalid_argument("need at least two folds");
  std::vector<Index> out(ids.size(), -1);
  const Rng root(seed);
  for (int cls : {0, 1}) {
    std::vector<std::pair<uint64_t, size_t>> members;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (labels[i] != cls) continue;
      Rng h = root.derive(static_cast<uint64_t>(ids[i]));
      members.emplace_back(h.next_u64(), i);
    }
    if (static_cast<Index>(members.size()) < folds) {
      throw std::invalid_argument("class " + std::to_string(cls) + " has " + std::to_string(members.size()) +
                                  " samples, fewer than " + std::to_string(folds) + " folds");
    }
    std::sort(members.begin(), members.end());
    for (size_t k = 0; k < members.size(); ++k) out[members[k].second] = static_cast<Index>(k) % folds;
  }
  for (size_t i = 0; i < out.size(); ++i)
    if (out[i] < 0) throw std::invalid_argument("labels must be 0 or 1");
  return out;
}

std::vector<FoldMetrics> finetune_classify(const Mae<float>& pretrained, const std::vector<const Tensor<float>*>& cines,
                                           const std::vector<Index>& ids, const std::vector<int>& labels,
                                           const FinetuneOptions& options) {
  if (cines.size() != ids.size() || ids.size() != labels.size()) throw std::invalid_argument("classification inputs differ in length");
  const auto fold_of = stratified_folds(ids, labels, options.folds, options.seed);
  const auto patches = patch_all(cines, pretrained.config().patch);
  std::vector<FoldMetrics> out(static_cast<size_t>(options.folds));
  const Rng root(options.seed);
  parallel_for(out.size(), [&](size_t f) {
    std::vector<size_t> train, test;
    for (size_t i = 0; i < ids.size(); ++i) (fold_of[i] == static_cast<Index>(f) ? test : train).push_back(i);
    Rng init = root.derive(2 * f);
    Rng rng = root.derive(2 * f + 1);
    Mae<float> model(pretrained.config(), init, 1);
    model.load_shared(pretrained);
    AdamW<float> opt(model.params(), {.lr = options.lr, .weight_decay = 0.05});
    for (Index e = 0; e < options.epochs; ++e) {
      for (const auto& b : epoch_batches(train.size(), options.batch, rng)) {
        std::vector<Var<float>> logits;
        std::vector<float> targets;
        for (size_t k : b) {
          logits.push_back(model.predict(patches[train[k]]));
          targets.push_back(static_cast<float>(labels[train[k]]));
        }
        const Var<float> l = bce_with_logits(concat_rows(logits), std::span<const float>(targets));
        check_finite(l.value()[0], "classification", opt.step_count() + 1);
        backward(l);
        opt.step();
      }
    }
    NoGradGuard no_grad;
    std::vector<double> probs;
    std::vector<int> y;
    for (size_t i : test) {
      const double z = model.predict(patches[i]).value()[0];
      probs.push_back(1.0 / (1.0 + std::exp(-z)));
      y.push_back(labels[i]);
    }
    out[f] = {static_cast<Index>(f), accuracy(probs, y), roc_auc(probs, y)};
  });
  return out;
}

RegressionReport finetune_regress(const Mae<float>& pretrained, const std::vector<LabeledCine>& train,
                                  const std::vector<LabeledCine>& test, const Normalization& norm,
                                  const FinetuneOptions& options) {
  if (train.empty() || test.empty()) throw std::invalid_argument("regression needs train and test data");
  const auto p = static_cast<Index>(norm.dim());
  const Index patch = pretrained.config().patch;
  std::vector<Tensor<float>> train_patches(train.size());
  std::vector<Tensor<float>> targets(train.size());
  parallel_for(train.size(), [&](size_t i) {
    train_patches[i] = patchify_frames(*train[i].cine, patch);
    const auto z = norm.normalize(*train[i].phenotypes);
    targets[i] = Tensor<float>({1, p});
    for (Index j = 0; j < p; ++j) targets[i][j] = static_cast<float>(z[static_cast<size_t>(j)]);
  });

  Rng init = Rng(options.seed).derive(0);
  Rng rng = Rng(options.seed).derive(1);
  Mae<float> model(pretrained.config(), init, p);
  model.load_shared(pretrained);
  AdamW<float> opt(model.params(), {.lr = options.lr, .weight_decay = 0.05});
  for (Index e = 0; e < options.epochs; ++e) {
    for (const auto& b : epoch_batches(train.size(), options.batch, rng)) {
      std::vector<Var<float>> pred, want;
      for (size_t k : b) {
        pred.push_back(model.predict(train_patches[k]));
        want.push_back(constant(targets[k]));
      }
      const Var<float> l = mse(concat_rows(pred), concat_rows(want));
      check_finite(l.value()[0], "regression", opt.step_count() + 1);
      backward(l);
      opt.step();
    }
  }

  NoGradGuard no_grad;
  std::vector<std::vector<double>> pred(test.size());
  parallel_for(test.size(), [&](size_t i) {
    const Tensor<float> z = model.predict(patchify_frames(*test[i].cine, patch)).value();
    pred[i] = norm.denormalize(std::vector<double>(z.data(), z.data() + z.size()));
  });
  RegressionReport r;
  double r2_sum = 0;
  size_t defined = 0;
  for (Index j = 0; j < p; ++j) {
    std::vector<double> yhat, y;
    for (size_t i = 0; i < test.size(); ++i) {
      yhat.push_back(pred[i][static_cast<size_t>(j)]);
      y.push_back((*test[i].phenotypes)[static_cast<size_t>(j)]);
    }
    r.mae.push_back(mean_abs_error(yhat, y));
    r.r2.push_back(r_squared(yhat, y));
    if (std::isnan(r.r2.back())) {
      r.excluded.push_back(static_cast<size_t>(j));
    } else {
      r2_sum += r.r2.back();
      ++defined;
    }
  }
  r.mean_r2 = defined ? r2_sum / static_cast<double>(defined) : std::nan("");
  return r;
}

std::vector<SweepRow> mixing_sweep(const Dataset& real, const Generator& generator, const MaeConfig& mae_config,
                                   const SweepOptions& options) {
  if (options.rhos.empty()) throw std::invalid_argument("empty rho list");
  for (Index rho : options.rhos)
    if (rho < 0 || rho > 5) throw std::invalid_argument("rho must lie in 0..5, got " + std::to_string(rho));

  const auto train_ids = real.ids_in(Split::kTrain);
  const auto test_ids = real.ids_in(Split::kTest);
  const Index max_rho = *std::max_element(options.rhos.begin(), options.rhos.end());
  const size_t n_syn = static_cast<size_t>(max_rho) * train_ids.size();
  // Cine i of the pool depends only on (generation_seed, i), so every rho
  // uses a prefix of the same generated set.
  const std::vector<GeneratedCine> synthetic =
      n_syn ? generate_cines(generator, {}, n_syn, options.generation, options.generation_seed)
            : std::vector<GeneratedCine>{};

  std::vector<const Tensor<float>*> cls_cines;
  std::vector<int> cls_labels;
  for (Index id : real.classification_ids) {
    cls_cines.push_back(&real.cines[static_cast<size_t>(id)].voxels);
    cls_labels.push_back(real.manifest[static_cast<size_t>(id)].label);
  }
  std::vector<LabeledCine> reg_train, reg_test;
  for (Index id : train_ids) reg_train.push_back({&real.cines[static_cast<size_t>(id)].voxels, &real.phenotypes[static_cast<size_t>(id)]});
  for (Index id : test_ids) reg_test.push_back({&real.cines[static_cast<size_t>(id)].voxels, &real.phenotypes[static_cast<size_t>(id)]});

  std::vector<SweepRow> rows;
  const auto& names = phenotype_names();
  auto add_regression = [&](const RegressionReport& r, Index rho, bool star, uint64_t seed) {
    rows.push_back({"regression", rho, star, seed, 0, "mean_r2", r.mean_r2});
    for (size_t j = 0; j < r.r2.size(); ++j) {
      rows.push_back({"regression", rho, star, seed, 0, "r2." + names[j], r.r2[j]});
      rows.push_back({"regression", rho, star, seed, 0, "mae." + names[j], r.mae[j]});
    }
  };

  for (uint64_t seed : options.seeds) {
    for (Index rho : options.rhos) {
      std::vector<const Tensor<float>*> pool;
      for (Index id : train_ids) pool.push_back(&real.cines[static_cast<size_t>(id)].voxels);
      const size_t n_add = static_cast<size_t>(rho) * train_ids.size();
      for (size_t i = 0; i < n_add; ++i) pool.push_back(&synthetic[i].cine.voxels);

      const Rng root(seed);
      Rng init = root.derive(0);
      Mae<float> mae(mae_config, init);
      PretrainOptions po = options.pretrain;
      po.seed = root.derive(1).next_u64();
      mae_pretrain(mae, pool, po);

      FinetuneOptions fo = options.finetune;
      fo.seed = root.derive(2).next_u64();
      for (const auto& m : finetune_classify(mae, cls_cines, real.classification_ids, cls_labels, fo)) {
        rows.push_back({"classification", rho, false, seed, m.fold, "acc", m.acc});
        rows.push_back({"classification", rho, false, seed, m.fold, "auc", m.auc});
      }
      add_regression(finetune_regress(mae, reg_train, reg_test, real.norm, fo), rho, false, seed);
      if (options.mix_star && rho > 0) {
        std::vector<LabeledCine> star = reg_train;
        for (size_t i = 0; i < n_add; ++i) star.push_back({&synthetic[i].cine.voxels, &synthetic[i].phenotypes});
        add_regression(finetune_regress(mae, star, reg_test, real.norm, fo), rho, true, seed);
      }
    }
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "task,rho,mix_star,seed,fold,metric,value\n";
  for (const auto& r : rows) {
    out += r.task + "," + std::to_string(r.rho) + "," + (r.mix_star ? "1" : "0") + "," + std::to_string(r.seed) + "," +
           std::to_string(r.fold) + "," + r.metric + "," + format_number(r.value) + "\n";
  }
  return out;
}

double sweep_mean(const std::vector<SweepRow>& rows, const std::string& task, Index rho, bool mix_star,
                  const std::string& metric) {
  std::vector<double> v;
  for (const auto& r : rows)
    if (r.task == task && r.rho == rho && r.mix_star == mix_star && r.metric == metric) v.push_back(r.value);
  if (v.empty()) return std::nan("");
  return mean_std(v).mean;
}

std::string sweep_summary(const std::vector<SweepRow>& rows) {
  std::map<std::tuple<std::string, Index, bool>, std::map<std::string, std::vector<double>>> cells;
  for (const auto& r : rows) {
    if (r.metric == "acc" || r.metric == "auc" || r.metric == "mean_r2") cells[{r.task, r.rho, r.mix_star}][r.metric].push_back(r.value);
  }
  std::ostringstream out;
  out << "task            rows              metric     mean +- std\n";
  for (const auto& [key, metrics] : cells) {
    const auto& [task, rho, star] = key;
    const std::string label = rho == 0 ? "real only" : "mix " + std::to_string(rho * 100) + "%" + (star ? "*" : "");
    for (const auto& [metric, values] : metrics) {
      const MeanStd ms = mean_std(values);
      char line[160];
      std::snprintf(line, sizeof line, "%-15s %-17s %-10s %.4f +- %.4f\n", task.c_str(), label.c_str(), metric.c_str(),
                    ms.mean, ms.std);
      out << line;
    }
  }
  return out.str();
}

}  // namespace cpgg
