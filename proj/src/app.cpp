#include "cpgg/app.hpp"

#include "cpgg/checkpoint.hpp"
#include "cpgg/csv.hpp"
#include "cpgg/dataset.hpp"
#include "cpgg/media.hpp"
#include "cpgg/metrics.hpp"
#include "cpgg/parallel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

namespace cpgg::app {

namespace {

std::ostream* g_progress = &std::cerr;

void progress(const std::string& line) {
  if (g_progress) *g_progress << line << std::endl;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::vector<Index> to_index(const std::vector<int64_t>& v) { return {v.begin(), v.end()}; }

Triple to_triple(const std::vector<int64_t>& v, const std::string& key) {
  if (v.size() != 3) throw UsageError("config key '" + key + "' needs three integers");
  return {v[0], v[1], v[2]};
}

/// Run log: the command, its resolved config, and the hash of every input.
class RunLog {
 public:
  RunLog(std::string command, const RunConfig& cfg) : command_(std::move(command)) {
    text_ = "command: " + command_ + "\n[config]\n" + cfg.dump() + "[inputs]\n";
  }
  void input(const fs::path& path, const std::string& label) {
    text_ += label + " sha1=" + sha1_hex(path) + "\n";
  }
  void note(const std::string& line) { text_ += line + "\n"; }
  void write(const fs::path& out) const {
    auto f = open_for_write(out / (command_ + ".log"));
    f << text_;
  }

 private:
  std::string command_;
  std::string text_;
};

std::string join_numbers(const std::vector<double>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_number(v[i]);
  return out;
}

std::vector<double> split_numbers(const std::string& s) {
  std::vector<double> out;
  for (const auto& cell : split_csv_line(s)) out.push_back(std::stod(cell));
  return out;
}

void log_dataset_inputs(RunLog& log, const fs::path& data) {
  for (const char* f : {"cines.cpgc", "phenotypes.csv", "manifest.csv"}) log.input(data / f, std::string("data/") + f);
}

Dataset open_dataset(const fs::path& data) {
  if (!fs::exists(data / "manifest.csv")) throw std::runtime_error("no dataset at " + data.string() + " (run gen-data first)");
  return load_dataset(data);
}

Checkpoint require_checkpoint(const fs::path& dir, const char* file, const char* producer) {
  const fs::path p = dir / file;
  if (!fs::exists(p)) {
    throw std::runtime_error("missing checkpoint " + p.string() + " (run " + producer + " first)");
  }
  return load_checkpoint(p);
}

RunConfig config_from(const Checkpoint& ck) {
  auto it = ck.metadata.find("config");
  if (it == ck.metadata.end()) throw std::runtime_error("checkpoint carries no config snapshot");
  RunConfig c = default_config();
  std::istringstream in(it->second);
  c.merge(in, "checkpoint config");
  return c;
}

const std::string& meta(const Checkpoint& ck, const std::string& key) {
  auto it = ck.metadata.find(key);
  if (it == ck.metadata.end()) throw std::runtime_error("checkpoint has no '" + key + "' entry");
  return it->second;
}

void write_loss_csv(const fs::path& path, const std::string& header, const std::vector<std::string>& rows) {
  auto f = open_for_write(path);
  f << header << "\n";
  for (const auto& r : rows) f << r << "\n";
}

std::vector<std::string> read_loss_rows(const fs::path& path) {
  std::vector<std::string> rows;
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(line);
  return rows;
}

std::vector<const Tensor<float>*> cines_of(const Dataset& d, const std::vector<Index>& ids) {
  std::vector<const Tensor<float>*> out;
  for (Index id : ids) out.push_back(&d.cines[static_cast<size_t>(id)].voxels);
  return out;
}

void check_positive(int64_t v, const std::string& what) {
  if (v <= 0) throw UsageError(what + " must be positive");
}

}  // namespace

void set_progress_stream(std::ostream* os) { g_progress = os; }

RunConfig load_config(const std::optional<fs::path>& file) {
  RunConfig c = default_config();
  if (file) {
    try {
      c.merge_file(*file);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  return c;
}

PhenoVaeConfig pheno_vae_config(const RunConfig& c) {
  PhenoVaeConfig p;
  p.hidden = to_index(c.get_int_list("pheno-vae.hidden"));
  p.latent_dim = c.get_int("pheno-vae.latent_dim");
  p.beta = c.get_double("pheno-vae.beta");
  return p;
}

CineVaeConfig cine_vae_config(const RunConfig& c) {
  CineVaeConfig v;
  v.latent_channels = c.get_int("cine-vae.latent_channels");
  v.widths = to_index(c.get_int_list("cine-vae.widths"));
  if (v.widths.size() != v.strides.size()) {
    throw UsageError("cine-vae.widths needs " + std::to_string(v.strides.size()) + " entries");
  }
  v.beta = c.get_double("cine-vae.beta");
  return v;
}

MarConfig mar_config(const RunConfig& c, const Shape& latent_shape) {
  MarConfig m;
  m.latent_shape = latent_shape;
  m.patch = to_triple(c.get_int_list("mar.patch"), "mar.patch");
  m.cond_dim = kPhenotypeCount;
  m.width = c.get_int("mar.width");
  m.encoder_depth = c.get_int("mar.encoder_depth");
  m.decoder_depth = c.get_int("mar.decoder_depth");
  m.heads = static_cast<int>(c.get_int("mar.heads"));
  m.mlp_ratio = c.get_int("mar.mlp_ratio");
  m.mask_lo = c.get_double("mar.mask_lo");
  m.mask_hi = c.get_double("mar.mask_hi");
  m.p_drop = c.get_double("mar.p_drop");
  m.diffusion_steps = c.get_int("diffusion.steps");
  m.head_width = c.get_int("diffusion.head_width");
  m.head_blocks = c.get_int("diffusion.head_blocks");
  m.n_rep = static_cast<int>(c.get_int("diffusion.n_rep"));
  return m;
}

GenerationOptions generation_options(const RunConfig& c) {
  GenerationOptions g;
  g.decode_steps = c.get_int("sampler.decode_steps");
  g.cfg_scale = c.get_double("sampler.cfg");
  g.inference_steps = c.get_int("sampler.inference_steps");
  g.x0_clip = c.get_double("sampler.x0_clip");
  return g;
}

MaeConfig mae_config(const RunConfig& c, FrameSize size) {
  MaeConfig m;
  m.frames = size.t;
  m.height = size.h;
  m.width_px = size.w;
  m.patch = c.get_int("downstream.patch");
  m.mask_ratio = c.get_double("downstream.mask_ratio");
  m.width = c.get_int("downstream.width");
  m.depth = c.get_int("downstream.depth");
  m.heads = static_cast<int>(c.get_int("downstream.heads"));
  m.decoder_width = c.get_int("downstream.decoder_width");
  return m;
}

PretrainOptions pretrain_options(const RunConfig& c) {
  return {.epochs = c.get_int("downstream.pretrain_epochs"),
          .batch = c.get_int("downstream.batch"),
          .lr = c.get_double("downstream.pretrain_lr"),
          .seed = static_cast<uint64_t>(c.get_int("downstream.seed"))};
}

FinetuneOptions finetune_options(const RunConfig& c) {
  return {.epochs = c.get_int("downstream.finetune_epochs"),
          .batch = c.get_int("downstream.batch"),
          .lr = c.get_double("downstream.finetune_lr"),
          .folds = c.get_int("downstream.folds"),
          .seed = static_cast<uint64_t>(c.get_int("downstream.seed"))};
}

// ---- gen-data --------------------------------------------------------------

void gen_data(const RunConfig& cfg, Index n, uint64_t seed, const fs::path& out) {
  if (n < 10) throw UsageError("n must be ≥ 10");
  DatasetOptions o;
  o.n = n;
  o.seed = seed;
  o.size = {cfg.get_int("data.frames"), cfg.get_int("data.height"), cfg.get_int("data.width")};
  progress("gen-data: rendering " + std::to_string(n) + " phantoms");
  const Dataset d = build_dataset(o);
  write_dataset(d, out);
  RunLog log("gen-data", cfg);
  log.note("n=" + std::to_string(n) + " seed=" + std::to_string(seed));
  log.note("train=" + std::to_string(d.ids_in(Split::kTrain).size()) + " val=" + std::to_string(d.ids_in(Split::kVal).size()) +
           " test=" + std::to_string(d.ids_in(Split::kTest).size()) + " (valid measurements)");
  log.write(out);
}

// ---- training ------------------------------------------------------------

void train_pheno_vae(const RunConfig& cfg, const fs::path& data, const fs::path& out, bool resume) {
  const Dataset d = open_dataset(data);
  const Index epochs = cfg.get_int("pheno-vae.epochs"), batch = cfg.get_int("pheno-vae.batch");
  check_positive(epochs, "pheno-vae.epochs");
  check_positive(batch, "pheno-vae.batch");
  const auto seed = static_cast<uint64_t>(cfg.get_int("pheno-vae.seed"));
  std::vector<std::vector<double>> rows;
  for (Index id : d.ids_in(Split::kTrain)) rows.push_back(d.norm.normalize(d.phenotypes[static_cast<size_t>(id)]));

  Rng init = Rng(seed).derive(0);
  PhenoVae<float> model(pheno_vae_config(cfg), init);
  AdamW<float> opt(model.params(), {.lr = cfg.get_double("pheno-vae.lr")});
  Index start = 0;
  std::vector<std::string> loss_rows;
  if (resume) {
    const Checkpoint ck = require_checkpoint(out, kPhenoVaeFile, "train-pheno-vae");
    restore_params(ck, model.params());
    restore_optimizer(ck, opt, model.params());
    start = std::stoll(meta(ck, "epoch"));
    loss_rows = read_loss_rows(out / "pheno_vae_loss.csv");
    loss_rows.resize(static_cast<size_t>(std::min<Index>(start, static_cast<Index>(loss_rows.size()))));
  }
  for (Index e = start; e < epochs; ++e) {
    Rng rng = Rng(seed).derive(1 + static_cast<uint64_t>(e));
    const double loss = train_pheno_vae_epoch(model, opt, rows, batch, rng);
    loss_rows.push_back(std::to_string(e + 1) + "," + format_number(loss));
    if ((e + 1) % 25 == 0 || e + 1 == epochs) progress("pheno-vae epoch " + std::to_string(e + 1) + " loss " + fmt("%.5f", loss));
  }

  Checkpoint ck;
  store_params(ck, model.params());
  store_optimizer(ck, opt, model.params());
  ck.metadata["config"] = cfg.dump();
  ck.metadata["epoch"] = std::to_string(epochs);
  ck.metadata["step"] = std::to_string(opt.step_count());
  ck.metadata["rng.seed"] = std::to_string(seed);
  ck.metadata["norm.mean"] = join_numbers(d.norm.mean);
  ck.metadata["norm.std"] = join_numbers(d.norm.std);
  save_checkpoint(out / kPhenoVaeFile, ck);
  write_loss_csv(out / "pheno_vae_loss.csv", "epoch,loss", loss_rows);

  RunLog log("train-pheno-vae", cfg);
  log_dataset_inputs(log, data);
  log.note("resume=" + std::to_string(resume) + " start_epoch=" + std::to_string(start) + " steps=" + std::to_string(opt.step_count()));
  log.write(out);
}

void train_cine_vae(const RunConfig& cfg, const fs::path& data, const fs::path& out, bool resume) {
  const Dataset d = open_dataset(data);
  const Index epochs = cfg.get_int("cine-vae.epochs"), batch = cfg.get_int("cine-vae.batch");
  check_positive(epochs, "cine-vae.epochs");
  check_positive(batch, "cine-vae.batch");
  const auto seed = static_cast<uint64_t>(cfg.get_int("cine-vae.seed"));
  const auto train = cines_of(d, d.ids_in(Split::kTrain));
  const auto val = cines_of(d, d.ids_in(Split::kVal));
  const CineVaeConfig vcfg = cine_vae_config(cfg);
  vcfg.latent_shape(d.cines.front().voxels.shape());

  Rng init = Rng(seed).derive(0);
  CineVae<float> model(vcfg, init);
  AdamW<float> opt(model.params(), {.lr = cfg.get_double("cine-vae.lr")});
  Index start = 0;
  std::vector<std::string> loss_rows;
  if (resume) {
    const Checkpoint ck = require_checkpoint(out, kCineVaeFile, "train-cine-vae");
    restore_params(ck, model.params());
    restore_optimizer(ck, opt, model.params());
    start = std::stoll(meta(ck, "epoch"));
    loss_rows = read_loss_rows(out / "cine_vae_loss.csv");
    loss_rows.resize(static_cast<size_t>(std::min<Index>(start, static_cast<Index>(loss_rows.size()))));
  }
  double val_mse = 0;
  for (Index e = start; e < epochs; ++e) {
    Rng rng = Rng(seed).derive(1 + static_cast<uint64_t>(e));
    const double loss = train_cine_vae_epoch(model, opt, train, batch, rng);
    val_mse = reconstruction_mse(model, val);
    loss_rows.push_back(std::to_string(e + 1) + "," + format_number(loss) + "," + format_number(val_mse));
    progress("cine-vae epoch " + std::to_string(e + 1) + " loss " + fmt("%.5f", loss) + " val mse " + fmt("%.5f", val_mse));
  }

  Checkpoint ck;
  store_params(ck, model.params());
  store_optimizer(ck, opt, model.params());
  ck.metadata["config"] = cfg.dump();
  ck.metadata["epoch"] = std::to_string(epochs);
  ck.metadata["step"] = std::to_string(opt.step_count());
  ck.metadata["rng.seed"] = std::to_string(seed);
  ck.metadata["cine_shape"] = shape_str(d.cines.front().voxels.shape());
  save_checkpoint(out / kCineVaeFile, ck);
  write_loss_csv(out / "cine_vae_loss.csv", "epoch,loss,val_mse", loss_rows);

  RunLog log("train-cine-vae", cfg);
  log_dataset_inputs(log, data);
  log.note("resume=" + std::to_string(resume) + " start_epoch=" + std::to_string(start) + " steps=" + std::to_string(opt.step_count()));
  log.write(out);
}

namespace {

std::unique_ptr<CineVae<float>> vae_from(const Checkpoint& ck) {
  Rng dummy(0);
  auto vae = std::make_unique<CineVae<float>>(cine_vae_config(config_from(ck)), dummy);
  restore_params(ck, vae->params());
  return vae;
}

/// Encoder means of the train split, cached next to the checkpoint and
/// keyed by the checkpoint's hash.
std::vector<Tensor<float>> cached_latents(const CineVae<float>& vae, const Dataset& d, const fs::path& out) {
  const std::string key = sha1_hex(out / kCineVaeFile);
  const fs::path cache = out / "latents.cpgc", stamp = out / "latents.sha1";
  if (fs::exists(cache) && fs::exists(stamp)) {
    std::ifstream s(stamp);
    std::string stored;
    std::getline(s, stored);
    if (stored == key) {
      std::vector<Tensor<float>> latents;
      for (auto& rec : read_cine_file(cache)) latents.push_back(std::move(rec.second));
      progress("train-mar: using cached latents");
      return latents;
    }
  }
  progress("train-mar: encoding latents");
  const auto latents = encode_means(vae, cines_of(d, d.ids_in(Split::kTrain)));
  write_cine_file(cache, latents);
  auto s = open_for_write(stamp);
  s << key << "\n";
  return latents;
}

}  // namespace

void train_mar(const RunConfig& cfg, const fs::path& data, const fs::path& out, bool resume) {
  const Dataset d = open_dataset(data);
  const Checkpoint vck = require_checkpoint(out, kCineVaeFile, "train-cine-vae");
  const auto vae = vae_from(vck);
  const Index epochs = cfg.get_int("mar.epochs"), batch = cfg.get_int("mar.batch");
  check_positive(epochs, "mar.epochs");
  check_positive(batch, "mar.batch");
  const auto seed = static_cast<uint64_t>(cfg.get_int("mar.seed"));

  const auto latents = cached_latents(*vae, d, out);
  const LatentStats stats = LatentStats::fit(latents);
  const MarConfig mcfg = mar_config(cfg, latents.front().shape());
  const auto train_ids = d.ids_in(Split::kTrain);
  std::vector<TokenSequence<float>> seqs;
  std::vector<std::vector<double>> conds;
  for (size_t i = 0; i < latents.size(); ++i) {
    seqs.push_back(patchify(stats.standardize(latents[i]), mcfg.patch));
    conds.push_back(d.norm.normalize(d.phenotypes[static_cast<size_t>(train_ids[i])]));
  }

  Rng init = Rng(seed).derive(0);
  Mar<float> model(mcfg, init);
  AdamW<float> opt(model.params(), {.lr = cfg.get_double("mar.lr")});
  Index start = 0;
  std::vector<std::string> loss_rows;
  if (resume) {
    const Checkpoint ck = require_checkpoint(out, kMarFile, "train-mar");
    restore_params(ck, model.params());
    restore_optimizer(ck, opt, model.params());
    start = std::stoll(meta(ck, "epoch"));
    loss_rows = read_loss_rows(out / "mar_loss.csv");
    loss_rows.resize(static_cast<size_t>(std::min<Index>(start, static_cast<Index>(loss_rows.size()))));
  }
  for (Index e = start; e < epochs; ++e) {
    Rng rng = Rng(seed).derive(1 + static_cast<uint64_t>(e));
    std::vector<size_t> order(seqs.size());
    std::iota(order.begin(), order.end(), size_t{0});
    rng.shuffle(order);
    double total = 0;
    size_t steps = 0;
    for (size_t b = 0; b < order.size(); b += static_cast<size_t>(batch)) {
      std::vector<MarSample> mb;
      for (size_t k = b; k < std::min(order.size(), b + static_cast<size_t>(batch)); ++k) mb.push_back({&seqs[order[k]], &conds[order[k]]});
      total += mar_train_step(model, opt, mb, rng);
      ++steps;
    }
    const double loss = total / static_cast<double>(steps);
    loss_rows.push_back(std::to_string(e + 1) + "," + format_number(loss));
    if ((e + 1) % 5 == 0 || e + 1 == epochs) progress("mar epoch " + std::to_string(e + 1) + " loss " + fmt("%.4f", loss));
  }

  Checkpoint ck;
  store_params(ck, model.params());
  store_optimizer(ck, opt, model.params());
  ck.metadata["config"] = cfg.dump();
  ck.metadata["epoch"] = std::to_string(epochs);
  ck.metadata["step"] = std::to_string(opt.step_count());
  ck.metadata["rng.seed"] = std::to_string(seed);
  ck.metadata["latent.shape"] = shape_str(mcfg.latent_shape);
  ck.metadata["cine_vae.sha1"] = sha1_hex(out / kCineVaeFile);
  ck.put("latent.mean", Tensor<float>({static_cast<Index>(stats.mean.size())}, std::vector<float>(stats.mean.begin(), stats.mean.end())));
  ck.put("latent.std", Tensor<float>({static_cast<Index>(stats.std.size())}, std::vector<float>(stats.std.begin(), stats.std.end())));
  ck.metadata["latent.mean"] = join_numbers(stats.mean);
  ck.metadata["latent.std"] = join_numbers(stats.std);
  save_checkpoint(out / kMarFile, ck);
  write_loss_csv(out / "mar_loss.csv", "epoch,loss", loss_rows);

  RunLog log("train-mar", cfg);
  log_dataset_inputs(log, data);
  log.input(out / kCineVaeFile, kCineVaeFile);
  log.note("resume=" + std::to_string(resume) + " start_epoch=" + std::to_string(start) + " steps=" + std::to_string(opt.step_count()));
  log.write(out);
}

Models load_models(const fs::path& dir, bool need_pheno) {
  Models m;
  const Checkpoint vck = require_checkpoint(dir, kCineVaeFile, "train-cine-vae");
  const Checkpoint mck = require_checkpoint(dir, kMarFile, "train-mar");
  if (meta(mck, "cine_vae.sha1") != sha1_hex(dir / kCineVaeFile)) {
    throw std::runtime_error("mar.cpgw was trained on a different cine_vae.cpgw; rerun train-mar");
  }
  m.vae = vae_from(vck);
  const RunConfig mcfg = config_from(mck);
  m.latent_stats.mean = split_numbers(meta(mck, "latent.mean"));
  m.latent_stats.std = split_numbers(meta(mck, "latent.std"));
  Shape latent_shape;
  {
    const std::string s = meta(mck, "latent.shape");
    for (double v : split_numbers(s.substr(1, s.size() - 2))) latent_shape.push_back(static_cast<Index>(v));
  }
  Rng dummy(0);
  m.mar = std::make_unique<Mar<float>>(mar_config(mcfg, latent_shape), dummy);
  restore_params(mck, m.mar->params());

  const fs::path pheno_path = dir / kPhenoVaeFile;
  if (need_pheno || fs::exists(pheno_path)) {
    const Checkpoint pck = require_checkpoint(dir, kPhenoVaeFile, "train-pheno-vae");
    m.pheno = std::make_unique<PhenoVae<float>>(pheno_vae_config(config_from(pck)), dummy);
    restore_params(pck, m.pheno->params());
    m.norm.mean = split_numbers(meta(pck, "norm.mean"));
    m.norm.std = split_numbers(meta(pck, "norm.std"));
  }
  return m;
}

// ---- sample ----------------------------------------------------------------

namespace {

std::vector<std::vector<double>> read_pheno_file(const fs::path& path) {
  const CsvTable t = read_csv(path);
  std::vector<size_t> cols;
  for (const auto& name : phenotype_names()) cols.push_back(t.column(name));
  std::vector<std::vector<double>> out;
  for (const auto& row : t.rows) {
    std::vector<double> v;
    for (size_t c : cols) v.push_back(std::stod(row[c]));
    if (auto bad = phenotype_violation(v)) {
      throw UsageError(path.string() + ": row " + std::to_string(out.size() + 1) + " has an invalid " +
                       phenotype_names()[*bad]);
    }
    out.push_back(std::move(v));
  }
  return out;
}

void write_phenotype_csv(const fs::path& path, const std::vector<GeneratedCine>& cines) {
  auto f = open_for_write(path);
  f << "id";
  for (const auto& n : phenotype_names()) f << "," << n;
  f << "\n";
  for (size_t i = 0; i < cines.size(); ++i) {
    f << i;
    for (double v : cines[i].phenotypes) f << "," << format_number(v);
    f << "\n";
  }
}

}  // namespace

void sample(const RunConfig& cfg, const fs::path& models, const SampleRequest& request, const fs::path& out) {
  if (request.count == 0) throw UsageError("--count must be positive");
  if (request.cfg_scale && *request.cfg_scale < 0) throw UsageError("--cfg must be >= 0");
  std::vector<std::vector<double>> conditions;
  if (request.pheno_file) {
    conditions = read_pheno_file(*request.pheno_file);
    if (conditions.size() < request.count) {
      throw UsageError("--pheno-file has " + std::to_string(conditions.size()) + " rows, fewer than --count");
    }
    conditions.resize(request.count);
  }
  const Models m = load_models(models, !request.pheno_file);
  GenerationOptions g = generation_options(cfg);
  if (request.cfg_scale) g.cfg_scale = *request.cfg_scale;
  progress("sample: generating " + std::to_string(request.count) + " cines");
  const auto cines = generate_cines(m.generator(), conditions, request.count, g, request.seed);

  std::vector<Tensor<float>> records;
  for (const auto& c : cines) records.push_back(c.cine.voxels);
  write_cine_file(out / "cines.cpgc", records);
  write_phenotype_csv(out / "phenotypes.csv", cines);
  for (size_t i = 0; i < cines.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "cine_%04zu", i);
    if (request.gif) write_gif(out / "gif" / (std::string(name) + ".gif"), cines[i].cine);
    if (request.pgm)
      for (Index t = 0; t < cines[i].cine.frames(); ++t)
        write_pgm(out / "pgm" / (std::string(name) + "_f" + std::to_string(t) + ".pgm"), cines[i].cine, t);
  }

  RunLog log("sample", cfg);
  for (const char* f : {kPhenoVaeFile, kCineVaeFile, kMarFile})
    if (fs::exists(models / f)) log.input(models / f, f);
  if (request.pheno_file) log.input(*request.pheno_file, "pheno-file");
  log.note("count=" + std::to_string(request.count) + " seed=" + std::to_string(request.seed) + " cfg=" + format_number(g.cfg_scale));
  log.write(out);
}

// ---- eval-gen --------------------------------------------------------------

Eigen::VectorXd latent_features(const CineVae<float>& vae, const Tensor<float>& cine) {
  NoGradGuard no_grad;
  const Tensor<float> mu = vae.encode(constant(cine)).mu.value();
  const Index c = mu.dim(0), t = mu.dim(1), hw = mu.dim(2) * mu.dim(3);
  Eigen::VectorXd f(c * t);
  for (Index i = 0; i < c * t; ++i) {
    double s = 0;
    for (Index k = 0; k < hw; ++k) s += mu[i * hw + k];
    f(i) = s / static_cast<double>(hw);
  }
  return f;
}

EvalGenReport eval_gen(const RunConfig& cfg, const fs::path& data, const fs::path& models, size_t n, uint64_t seed,
                       const fs::path& out) {
  if (n < 2) throw UsageError("--n must be at least 2");
  if (n < 50) progress("eval-gen: warning: n=" + std::to_string(n) + " < 50 gives unstable moment estimates");
  const Dataset d = open_dataset(data);
  const Models m = load_models(models);
  const auto val_ids = d.ids_in(Split::kVal);
  if (val_ids.size() < 4) throw std::runtime_error("validation split too small for eval-gen");

  progress("eval-gen: generating " + std::to_string(n) + " cines");
  const auto gen = generate_cines(m.generator(), {}, n, generation_options(cfg), seed);

  auto features = [&](const std::vector<const Tensor<float>*>& cines) {
    std::vector<Eigen::VectorXd> f(cines.size());
    parallel_for(cines.size(), [&](size_t i) { f[i] = latent_features(*m.vae, *cines[i]); });
    return f;
  };
  const auto real_cines = cines_of(d, val_ids);
  std::vector<const Tensor<float>*> gen_cines;
  for (const auto& g : gen) gen_cines.push_back(&g.cine.voxels);
  std::vector<Tensor<float>> noise(n);
  const Rng noise_root = Rng(seed).derive(7);
  for (size_t i = 0; i < n; ++i) {
    Rng r = noise_root.derive(i);
    noise[i] = Tensor<float>(d.cines.front().voxels.shape());
    for (Index k = 0; k < noise[i].size(); ++k) noise[i][k] = static_cast<float>(r.uniform());
  }
  std::vector<const Tensor<float>*> noise_cines;
  for (const auto& t : noise) noise_cines.push_back(&t);

  const auto fr = features(real_cines), fg = features(gen_cines), fn = features(noise_cines);
  const Moments mr = moments(fr);
  EvalGenReport r;
  r.generated = n;
  r.fd_gen_real = frechet_distance(moments(fg), mr);
  r.fd_noise_real = frechet_distance(moments(fn), mr);
  // Half-vs-half over the real validation set, split by a seeded shuffle.
  std::vector<size_t> order(fr.size());
  std::iota(order.begin(), order.end(), size_t{0});
  Rng split_rng = Rng(seed).derive(8);
  split_rng.shuffle(order);
  std::vector<Eigen::VectorXd> h1, h2;
  for (size_t i = 0; i < order.size(); ++i) (i < order.size() / 2 ? h1 : h2).push_back(fr[order[i]]);
  r.fd_half_half = frechet_distance(moments(h1), moments(h2));

  // Measured phenotypes of generated cines against the real validation set.
  std::vector<Measurement> meas(n);
  parallel_for(n, [&](size_t i) { meas[i] = measure_phenotypes(gen[i].cine); });
  std::vector<double> cond_ef, meas_ef;
  std::vector<std::vector<double>> gen_cols(kPhenotypeCount), real_cols(kPhenotypeCount);
  for (size_t i = 0; i < n; ++i) {
    if (!meas[i].valid) {
      ++r.invalid;
      continue;
    }
    cond_ef.push_back(gen[i].phenotypes[kEfArea]);
    meas_ef.push_back(meas[i].values[kEfArea]);
    for (int j = 0; j < kPhenotypeCount; ++j) gen_cols[static_cast<size_t>(j)].push_back(meas[i].values[static_cast<size_t>(j)]);
  }
  for (Index id : val_ids)
    for (int j = 0; j < kPhenotypeCount; ++j)
      real_cols[static_cast<size_t>(j)].push_back(d.phenotypes[static_cast<size_t>(id)][static_cast<size_t>(j)]);
  if (cond_ef.size() < 3) throw std::runtime_error("fewer than 3 generated cines could be measured");
  for (int j = 0; j < kPhenotypeCount; ++j) r.w1.push_back(wasserstein1(gen_cols[static_cast<size_t>(j)], real_cols[static_cast<size_t>(j)]));
  r.pearson_ef = pearson(cond_ef, meas_ef);

  std::vector<size_t> idx(cond_ef.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return cond_ef[a] < cond_ef[b]; });
  for (size_t b = 0; b < 3; ++b) {
    const size_t lo = b * idx.size() / 3, hi = (b + 1) * idx.size() / 3;
    double c = 0, mm = 0;
    for (size_t i = lo; i < hi; ++i) {
      c += cond_ef[idx[i]];
      mm += meas_ef[idx[i]];
    }
    r.bucket_cond.push_back(c / static_cast<double>(hi - lo));
    r.bucket_measured.push_back(mm / static_cast<double>(hi - lo));
  }
  r.monotone = r.bucket_measured[0] < r.bucket_measured[1] && r.bucket_measured[1] < r.bucket_measured[2];

  auto f = open_for_write(out / "eval_gen.csv");
  f << "metric,value\n";
  f << "n_generated," << n << "\n";
  f << "n_unmeasurable," << r.invalid << "\n";
  f << "frechet_gen_real," << format_number(r.fd_gen_real) << "\n";
  f << "frechet_noise_real," << format_number(r.fd_noise_real) << "\n";
  f << "frechet_real_half_half," << format_number(r.fd_half_half) << "\n";
  for (int j = 0; j < kPhenotypeCount; ++j) f << "w1." << phenotype_names()[static_cast<size_t>(j)] << "," << format_number(r.w1[static_cast<size_t>(j)]) << "\n";
  f << "pearson_ef_area," << format_number(r.pearson_ef) << "\n";
  for (size_t b = 0; b < 3; ++b) {
    f << "bucket" << b << ".conditioned_ef," << format_number(r.bucket_cond[b]) << "\n";
    f << "bucket" << b << ".measured_ef," << format_number(r.bucket_measured[b]) << "\n";
  }
  f << "bucket_monotone," << (r.monotone ? 1 : 0) << "\n";

  RunLog log("eval-gen", cfg);
  log_dataset_inputs(log, data);
  for (const char* file : {kPhenoVaeFile, kCineVaeFile, kMarFile}) log.input(models / file, file);
  log.note("n=" + std::to_string(n) + " seed=" + std::to_string(seed));
  log.write(out);
  progress("eval-gen: FD gen/real " + fmt("%.4f", r.fd_gen_real) + ", noise/real " + fmt("%.4f", r.fd_noise_real) +
           ", half/half " + fmt("%.4f", r.fd_half_half) + ", EF pearson " + fmt("%.3f", r.pearson_ef));
  return r;
}

// ---- downstream and bench --------------------------------------------------

std::vector<SweepRow> downstream(const RunConfig& cfg, const fs::path& data, const fs::path& models,
                                 const std::vector<Index>& rhos, bool mix_star, const std::vector<uint64_t>& seeds,
                                 const fs::path& out) {
  if (rhos.empty()) throw UsageError("--rho-list is empty");
  for (Index r : rhos)
    if (r < 0 || r > 5) throw UsageError("rho must be one of 0..5, got " + std::to_string(r));
  if (seeds.empty()) throw UsageError("--seeds is empty");
  const Dataset d = open_dataset(data);
  const bool synthetic = *std::max_element(rhos.begin(), rhos.end()) > 0;
  Models m;
  if (synthetic) m = load_models(models);
  SweepOptions so;
  so.rhos = rhos;
  so.mix_star = mix_star;
  so.seeds = seeds;
  so.pretrain = pretrain_options(cfg);
  so.finetune = finetune_options(cfg);
  so.generation = generation_options(cfg);
  so.generation_seed = static_cast<uint64_t>(cfg.get_int("downstream.seed"));
  progress("downstream: sweep over " + std::to_string(rhos.size()) + " mixing ratios");
  const auto rows = mixing_sweep(d, synthetic ? m.generator() : Generator{}, mae_config(cfg, d.size), so);

  auto f = open_for_write(out / "downstream.csv");
  f << sweep_csv(rows);
  auto s = open_for_write(out / "downstream_summary.txt");
  s << sweep_summary(rows);

  RunLog log("downstream", cfg);
  log_dataset_inputs(log, data);
  if (synthetic)
    for (const char* file : {kPhenoVaeFile, kCineVaeFile, kMarFile}) log.input(models / file, file);
  std::string rl;
  for (Index r : rhos) rl += (rl.empty() ? "" : ",") + std::to_string(r);
  log.note("rho=" + rl + " mix_star=" + std::to_string(mix_star));
  log.write(out);
  return rows;
}

std::vector<BenchRow> bench(const RunConfig& cfg, const fs::path& models, const std::vector<Index>& decode_steps,
                            size_t cines, const fs::path& out) {
  if (decode_steps.empty()) throw UsageError("--K-list is empty");
  if (cines == 0) throw UsageError("--count must be positive");
  const Models m = load_models(models, false);
  const Index n = m.mar->config().token_count();
  for (Index k : decode_steps)
    if (k < 1 || k > n) throw UsageError("K=" + std::to_string(k) + " outside 1.." + std::to_string(n));
  const auto rows = bench_decode(*m.mar, decode_steps, generation_options(cfg), cines, 0);
  auto f = open_for_write(out / "bench.csv");
  f << "K,mar_passes,denoiser_evals,wall_ms_per_cine\n";
  for (const auto& r : rows)
    f << r.decode_steps << "," << r.mar_passes << "," << r.denoiser_evals << "," << fmt("%.3f", r.wall_ms_per_cine) << "\n";
  RunLog log("bench", cfg);
  log.input(models / kMarFile, kMarFile);
  log.write(out);
  return rows;
}

}  // namespace cpgg::app
