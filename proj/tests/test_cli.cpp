#include "cpgg/app.hpp"
#include "cpgg/csv.hpp"
#include "cpgg/dataset.hpp"
#include "cpgg/media.hpp"

#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

using namespace cpgg;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig =
    "[pheno-vae]\nepochs = 5\n"
    "[cine-vae]\nepochs = 1\n"
    "[mar]\nepochs = 2\nwidth = 32\n"
    "[diffusion]\nhead_width = 32\n"
    "[sampler]\ninference_steps = 8\ndecode_steps = 4\n"
    "[downstream]\npretrain_epochs = 1\nfinetune_epochs = 1\nfolds = 2\n";

const fs::path& scratch_root() {
  static const struct Root {
    fs::path path = fs::temp_directory_path() / ("cpgg_cli_" + std::to_string(::getpid()));
    ~Root() { fs::remove_all(path); }
  } root;
  return root.path;
}

fs::path scratch(const std::string& name) {
  const fs::path p = scratch_root() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunConfig tiny_config() {
  RunConfig c = default_config();
  std::istringstream in(kTinyConfig);
  c.merge(in, "tiny");
  return c;
}

/// A 60-subject dataset with all three models trained on the tiny config.
struct Pipeline {
  fs::path root, data, models;
  Pipeline() {
    app::set_progress_stream(nullptr);
    root = scratch("pipeline");
    data = root / "data";
    models = root / "models";
    const RunConfig c = tiny_config();
    app::gen_data(c, 60, 3, data);
    app::train_pheno_vae(c, data, models);
    app::train_cine_vae(c, data, models);
    app::train_mar(c, data, models);
  }
};

const Pipeline& pipeline() {
  static Pipeline p;
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CPGG_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Counts image descriptors by walking the GIF block structure.
int gif_frame_count(const fs::path& path) {
  const auto b = slurp(path);
  REQUIRE(b.size() > 13);
  size_t i = 13;
  if (b[10] & 0x80) i += 3u * (1u << ((b[10] & 7) + 1));
  auto skip_sub_blocks = [&] {
    while (i < b.size() && b[i] != 0) i += b[i] + 1u;
    ++i;
  };
  int frames = 0;
  while (i < b.size()) {
    const uint8_t tag = b[i++];
    if (tag == 0x3B) return frames;
    if (tag == 0x21) {
      ++i;
      skip_sub_blocks();
    } else if (tag == 0x2C) {
      const uint8_t flags = b[i + 8];
      i += 9;
      if (flags & 0x80) i += 3u * (1u << ((flags & 7) + 1));
      ++i;  // LZW minimum code size
      skip_sub_blocks();
      ++frames;
    } else {
      FAIL("unexpected GIF block " << int(tag));
    }
  }
  FAIL("GIF has no trailer");
  return -1;
}

}  // namespace

TEST_CASE("gen-data writes a 400/50/50 split and is reproducible") {
  app::set_progress_stream(nullptr);
  const RunConfig c = default_config();
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  app::gen_data(c, 500, 7, a);
  app::gen_data(c, 500, 7, b);
  std::map<std::string, int> counts;
  const CsvTable m = read_csv(a / "manifest.csv");
  for (const auto& row : m.rows) ++counts[row[m.column("split")]];
  CHECK(m.rows.size() == 500);
  CHECK(counts["train"] == 400);
  CHECK(counts["val"] == 50);
  CHECK(counts["test"] == 50);
  for (const char* f : {"cines.cpgc", "phenotypes.csv", "manifest.csv", "gen-data.log"})
    CHECK(sha1_hex(a / f) == sha1_hex(b / f));

  CHECK_THROWS_AS(app::gen_data(c, 5, 7, scratch("gen_small")), app::UsageError);
}

TEST_CASE("training writes one loss row per epoch and resumes exactly") {
  const Pipeline& p = pipeline();
  CHECK(read_csv(p.models / "pheno_vae_loss.csv").rows.size() == 5);
  const CsvTable cine = read_csv(p.models / "cine_vae_loss.csv");
  CHECK(cine.rows.size() == 1);
  CHECK(cine.header == std::vector<std::string>{"epoch", "loss", "val_mse"});
  CHECK(read_csv(p.models / "mar_loss.csv").rows.size() == 2);

  RunConfig three = tiny_config();
  three.set("mar.epochs", "3");
  const fs::path resumed = scratch("resumed"), straight = scratch("straight");
  for (const auto& f : fs::directory_iterator(p.models)) fs::copy(f.path(), resumed / f.path().filename());
  fs::copy(p.models / app::kCineVaeFile, straight / app::kCineVaeFile);
  app::train_mar(three, p.data, resumed, true);
  app::train_mar(three, p.data, straight);
  CHECK(read_csv(resumed / "mar_loss.csv").rows.size() == 3);
  CHECK(sha1_hex(resumed / app::kMarFile) == sha1_hex(straight / app::kMarFile));
  CHECK(sha1_hex(resumed / "mar_loss.csv") == sha1_hex(straight / "mar_loss.csv"));

  const fs::path empty = scratch("empty");
  CHECK_THROWS_WITH(app::train_mar(three, p.data, empty), doctest::Contains("train-cine-vae"));
}

TEST_CASE("sample writes cines, phenotypes and exports") {
  const Pipeline& p = pipeline();
  const RunConfig c = tiny_config();
  app::SampleRequest r;
  r.count = 4;
  r.seed = 2;
  r.gif = true;
  r.pgm = true;
  const fs::path out = scratch("sample");
  app::sample(c, p.models, r, out);
  const auto cines = read_cine_file(out / "cines.cpgc");
  REQUIRE(cines.size() == 4);
  CHECK(cines[0].second.shape() == Shape{1, 8, 32, 32});
  CHECK(read_csv(out / "phenotypes.csv").rows.size() == 4);
  for (int i = 0; i < 4; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "cine_%04d", i);
    CHECK(gif_frame_count(out / "gif" / (std::string(name) + ".gif")) == 8);
    CHECK(fs::exists(out / "pgm" / (std::string(name) + "_f7.pgm")));
  }

  app::SampleRequest weak = r, strong = r;
  weak.gif = strong.gif = weak.pgm = strong.pgm = false;
  weak.cfg_scale = 1.0;
  strong.cfg_scale = 3.0;
  const fs::path w = scratch("cfg1"), s = scratch("cfg3");
  app::sample(c, p.models, weak, w);
  app::sample(c, p.models, strong, s);
  CHECK(sha1_hex(w / "cines.cpgc") != sha1_hex(s / "cines.cpgc"));
  // Conditions are drawn from the seed alone, so they match across scales.
  CHECK(sha1_hex(w / "phenotypes.csv") == sha1_hex(s / "phenotypes.csv"));

  const fs::path again = scratch("cfg3_again");
  app::sample(c, p.models, strong, again);
  CHECK(sha1_hex(again / "cines.cpgc") == sha1_hex(s / "cines.cpgc"));
}

TEST_CASE("sample conditions on a phenotype file") {
  const Pipeline& p = pipeline();
  const fs::path out = scratch("pheno_file");
  {
    auto f = open_for_write(out / "cond.csv");
    const auto& names = phenotype_names();
    for (size_t j = 0; j < names.size(); ++j) f << (j ? "," : "") << names[j];
    f << "\n";
    const Dataset d = load_dataset(p.data);
    for (int i = 0; i < 2; ++i) {
      for (size_t j = 0; j < names.size(); ++j) f << (j ? "," : "") << format_number(d.phenotypes[static_cast<size_t>(i)][j]);
      f << "\n";
    }
  }
  app::SampleRequest r;
  r.count = 2;
  r.pheno_file = out / "cond.csv";
  app::sample(tiny_config(), p.models, r, out / "gen");
  const CsvTable given = read_csv(out / "cond.csv"), used = read_csv(out / "gen" / "phenotypes.csv");
  REQUIRE(used.rows.size() == 2);
  for (size_t i = 0; i < 2; ++i)
    CHECK(std::stod(used.rows[i][used.column("ef_area")]) == std::stod(given.rows[i][given.column("ef_area")]));
  r.count = 3;
  CHECK_THROWS_AS(app::sample(tiny_config(), p.models, r, out / "gen3"), app::UsageError);
}

TEST_CASE("eval-gen reports bounded metrics") {
  const Pipeline& p = pipeline();
  const fs::path out = scratch("eval");
  const auto r = app::eval_gen(tiny_config(), p.data, p.models, 12, 0, out);
  CHECK(r.generated == 12);
  CHECK(r.fd_gen_real >= 0);
  CHECK(r.fd_noise_real > 0);
  CHECK(r.fd_half_half >= 0);
  CHECK(r.w1.size() == kPhenotypeCount);
  CHECK(r.pearson_ef >= -1.0);
  CHECK(r.pearson_ef <= 1.0);
  CHECK(r.bucket_cond.size() == 3);
  const CsvTable t = read_csv(out / "eval_gen.csv");
  CHECK(t.header == std::vector<std::string>{"metric", "value"});
  CHECK(fs::exists(out / "eval-gen.log"));
}

TEST_CASE("downstream and bench validate their arguments") {
  const Pipeline& p = pipeline();
  const RunConfig c = tiny_config();
  CHECK_THROWS_AS(app::downstream(c, p.data, p.models, {0, 6}, false, {0}, scratch("ds_bad")), app::UsageError);
  CHECK_THROWS_AS(app::downstream(c, p.data, p.models, {-1}, false, {0}, scratch("ds_neg")), app::UsageError);
  const auto rows = app::downstream(c, p.data, p.models, {0, 1}, true, {0}, scratch("ds"));
  CHECK(!rows.empty());

  CHECK_THROWS_AS(app::bench(c, p.models, {0}, 1, scratch("bench_bad")), app::UsageError);
  const fs::path out = scratch("bench");
  const auto b = app::bench(c, p.models, {4, 32}, 1, out);
  REQUIRE(b.size() == 2);
  CHECK(b[0].mar_passes == 2 * 4);
  CHECK(b[1].mar_passes == 2 * 32);
  CHECK(b[0].denoiser_evals == b[1].denoiser_evals);
  CHECK(read_csv(out / "bench.csv").rows.size() == 2);
}

TEST_CASE("command line exit codes") {
  const Pipeline& p = pipeline();
  const fs::path out = scratch("exit");
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("") == 1);
  CHECK(run_cli("no-such-command") == 1);
  CHECK(run_cli("gen-data --n 5 --out " + (out / "small").string()) == 1);
  CHECK(run_cli("gen-data --n 12 --out " + (out / "ok").string()) == 0);
  {
    auto f = open_for_write(out / "bad.cfg");
    f << "[mar]\nlearning_rate = 1\n";
  }
  CHECK(run_cli("gen-data --config " + (out / "bad.cfg").string() + " --out " + (out / "x").string()) == 1);
  CHECK(run_cli("downstream --data " + p.data.string() + " --rho-list 0,9 --out " + (out / "ds").string()) == 1);
  CHECK(run_cli("sample --models " + (out / "nowhere").string() + " --out " + (out / "s").string()) == 2);
}
