#include "cpgg/app.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace app = cpgg::app;
namespace fs = std::filesystem;

namespace {

struct Args {
  std::optional<fs::path> config;
  fs::path data = "data", out, models = "models";
  std::optional<int64_t> n;
  std::optional<uint64_t> seed;
  size_t count = 4;
  std::optional<double> cfg;
  std::optional<fs::path> pheno_file;
  bool gif = false, pgm = false, resume = false, mix_star = false;
  std::vector<cpgg::Index> rhos{0, 1, 3};
  std::vector<uint64_t> seeds{0};
  std::vector<cpgg::Index> ks{8, 16, 32};
};

void add_config(CLI::App* cmd, Args& a) {
  cmd->add_option("--config", a.config, "config file overriding the defaults")->check(CLI::ExistingFile);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"Phenotype-conditioned cine generation on synthetic phantoms"};
  cli.require_subcommand(1);
  Args a;

  auto* gen = cli.add_subcommand("gen-data", "render a phantom dataset");
  add_config(gen, a);
  gen->add_option("--n", a.n, "number of subjects (default data.n)");
  gen->add_option("--seed", a.seed, "dataset seed (default data.seed)");
  gen->add_option("--out", a.out, "output directory")->required();

  std::vector<CLI::App*> trainers;
  for (const char* name : {"train-pheno-vae", "train-cine-vae", "train-mar"}) {
    auto* t = cli.add_subcommand(name, std::string("train the ") + (name + 6) + " model");
    add_config(t, a);
    t->add_option("--data", a.data, "dataset directory")->check(CLI::ExistingDirectory);
    t->add_option("--out", a.out, "model directory")->required();
    t->add_flag("--resume", a.resume, "continue from the checkpoint in --out");
    trainers.push_back(t);
  }

  auto* smp = cli.add_subcommand("sample", "generate cines");
  add_config(smp, a);
  smp->add_option("--models", a.models, "model directory");
  smp->add_option("--count", a.count, "number of cines");
  smp->add_option("--cfg", a.cfg, "guidance scale (default sampler.cfg)");
  smp->add_option("--seed", a.seed, "sampling seed");
  smp->add_option("--pheno-file", a.pheno_file, "CSV of phenotype conditions")->check(CLI::ExistingFile);
  smp->add_flag("--gif", a.gif, "write animated GIFs");
  smp->add_flag("--pgm", a.pgm, "write one PGM per frame");
  smp->add_option("--out", a.out, "output directory")->required();

  auto* ev = cli.add_subcommand("eval-gen", "score generated cines against the validation split");
  add_config(ev, a);
  ev->add_option("--data", a.data, "dataset directory")->check(CLI::ExistingDirectory);
  ev->add_option("--models", a.models, "model directory");
  ev->add_option("--n", a.n, "number of generated cines (default 200)");
  ev->add_option("--seed", a.seed, "sampling seed");
  ev->add_option("--out", a.out, "output directory")->required();

  auto* ds = cli.add_subcommand("downstream", "MAE pretraining and fine-tuning sweep over mixing ratios");
  add_config(ds, a);
  ds->add_option("--data", a.data, "dataset directory")->check(CLI::ExistingDirectory);
  ds->add_option("--models", a.models, "model directory (needed when any rho > 0)");
  ds->add_option("--rho-list", a.rhos, "mixing ratios in 0..5")->delimiter(',');
  ds->add_flag("--mix-star", a.mix_star, "also train regression on generated pairs");
  ds->add_option("--seeds", a.seeds, "seeds to repeat the sweep with")->delimiter(',');
  ds->add_option("--out", a.out, "output directory")->required();

  auto* bn = cli.add_subcommand("bench", "decoding cost against the number of decode steps");
  add_config(bn, a);
  bn->add_option("--models", a.models, "model directory");
  bn->add_option("--K-list", a.ks, "decode step counts")->delimiter(',');
  bn->add_option("--count", a.count, "cines per setting");
  bn->add_option("--out", a.out, "output directory")->required();

  try {
    cli.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return cli.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return cli.exit(e);
  } catch (const CLI::ParseError& e) {
    cli.exit(e);
    return 1;
  }

  try {
    const cpgg::RunConfig cfg = app::load_config(a.config);
    if (gen->parsed()) {
      app::gen_data(cfg, a.n.value_or(cfg.get_int("data.n")), a.seed.value_or(static_cast<uint64_t>(cfg.get_int("data.seed"))),
                    a.out);
    } else if (trainers[0]->parsed()) {
      app::train_pheno_vae(cfg, a.data, a.out, a.resume);
    } else if (trainers[1]->parsed()) {
      app::train_cine_vae(cfg, a.data, a.out, a.resume);
    } else if (trainers[2]->parsed()) {
      app::train_mar(cfg, a.data, a.out, a.resume);
    } else if (smp->parsed()) {
      app::SampleRequest r;
      r.count = a.count;
      r.cfg_scale = a.cfg;
      r.seed = a.seed.value_or(0);
      r.pheno_file = a.pheno_file;
      r.gif = a.gif;
      r.pgm = a.pgm;
      app::sample(cfg, a.models, r, a.out);
    } else if (ev->parsed()) {
      if (a.n && *a.n <= 0) throw app::UsageError("--n must be positive");
      app::eval_gen(cfg, a.data, a.models, static_cast<size_t>(a.n.value_or(200)), a.seed.value_or(0), a.out);
    } else if (ds->parsed()) {
      app::downstream(cfg, a.data, a.models, a.rhos, a.mix_star, a.seeds, a.out);
    } else if (bn->parsed()) {
      app::bench(cfg, a.models, a.ks, a.count, a.out);
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
