#include "cpgg/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cpgg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw std::invalid_argument("unknown config key '" + key + "'");
  it->second = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw std::invalid_argument("unknown config key '" + key + "'");
  return it->second;
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& v = get(key);
  try {
    size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw std::invalid_argument("config key '" + key + "': '" + v + "' is not a number");
}

int64_t RunConfig::get_int(const std::string& key) const {
  const std::string& v = get(key);
  int64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw std::invalid_argument("config key '" + key + "': '" + v + "' is not an integer");
  }
  return out;
}

std::vector<int64_t> RunConfig::get_int_list(const std::string& key) const {
  const std::string& v = get(key);
  std::vector<int64_t> out;
  std::istringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    int64_t x = 0;
    const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), x);
    if (item.empty() || ec != std::errc() || ptr != item.data() + item.size()) {
      throw std::invalid_argument("config key '" + key + "': '" + v + "' is not an integer list");
    }
    out.push_back(x);
  }
  if (out.empty()) throw std::invalid_argument("config key '" + key + "' is empty");
  return out;
}

void RunConfig::merge(std::istream& in, const std::string& source) {
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') throw std::invalid_argument(where + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument(where + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    if (!section.empty() && key.find('.') == std::string::npos) key = section + "." + key;
    try {
      set(key, trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(where + ": " + e.what());
    }
  }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  merge(in, path.string());
}

std::string RunConfig::dump() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

RunConfig default_config() {
  RunConfig c;
  c.define("data.n", "500");
  c.define("data.seed", "7");
  c.define("data.frames", "8");
  c.define("data.height", "32");
  c.define("data.width", "32");

  c.define("pheno-vae.hidden", "64,32");
  c.define("pheno-vae.latent_dim", "6");
  c.define("pheno-vae.beta", "0.01");
  c.define("pheno-vae.epochs", "150");
  c.define("pheno-vae.batch", "32");
  c.define("pheno-vae.lr", "1e-3");
  c.define("pheno-vae.seed", "1");

  c.define("cine-vae.latent_channels", "4");
  c.define("cine-vae.widths", "8,16,16");
  c.define("cine-vae.beta", "1e-4");
  c.define("cine-vae.epochs", "4");
  c.define("cine-vae.batch", "8");
  c.define("cine-vae.lr", "2e-3");
  c.define("cine-vae.seed", "3");

  c.define("mar.width", "64");
  c.define("mar.encoder_depth", "2");
  c.define("mar.decoder_depth", "2");
  c.define("mar.heads", "4");
  c.define("mar.mlp_ratio", "4");
  c.define("mar.patch", "2,2,2");
  c.define("mar.mask_lo", "0.7");
  c.define("mar.mask_hi", "1.0");
  c.define("mar.p_drop", "0.1");
  c.define("mar.epochs", "80");
  c.define("mar.batch", "16");
  c.define("mar.lr", "1e-3");
  c.define("mar.seed", "5");

  c.define("diffusion.steps", "200");
  c.define("diffusion.head_width", "128");
  c.define("diffusion.head_blocks", "2");
  c.define("diffusion.n_rep", "1");

  c.define("sampler.decode_steps", "16");
  c.define("sampler.cfg", "3.0");
  c.define("sampler.inference_steps", "50");
  c.define("sampler.x0_clip", "4.0");

  c.define("downstream.patch", "8");
  c.define("downstream.mask_ratio", "0.75");
  c.define("downstream.width", "64");
  c.define("downstream.depth", "2");
  c.define("downstream.heads", "4");
  c.define("downstream.decoder_width", "32");
  c.define("downstream.pretrain_epochs", "10");
  c.define("downstream.pretrain_lr", "5e-4");
  c.define("downstream.finetune_epochs", "15");
  c.define("downstream.finetune_lr", "5e-4");
  c.define("downstream.batch", "16");
  c.define("downstream.folds", "5");
  c.define("downstream.seed", "11");
  return c;
}

}  // namespace cpgg
