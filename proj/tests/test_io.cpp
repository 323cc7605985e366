#include "doctest.h"

#include "cpgg/binary_io.hpp"
#include "cpgg/checkpoint.hpp"
#include "cpgg/config.hpp"
#include "cpgg/media.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace cpgg;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "cpgg_test_io";
  std::filesystem::create_directories(dir);
  return dir / name;
}

// Independent GIF reader: walks the block structure and LZW-decodes every
// image, returning one pixel vector per frame.
struct GifFrames {
  unsigned width = 0, height = 0;
  std::vector<std::vector<uint8_t>> frames;
};

std::vector<uint8_t> lzw_decode(const std::vector<uint8_t>& data, int min_code, size_t expect) {
  const uint32_t clear = 1u << min_code, end = clear + 1;
  std::vector<std::vector<uint8_t>> dict;
  auto reset = [&] {
    dict.assign(clear + 2, {});
    for (uint32_t i = 0; i < clear; ++i) dict[i] = {static_cast<uint8_t>(i)};
  };
  reset();
  int width = min_code + 1;
  size_t bitpos = 0;
  auto read = [&]() -> uint32_t {
    uint32_t v = 0;
    for (int i = 0; i < width; ++i, ++bitpos) {
      if (bitpos / 8 >= data.size()) throw std::runtime_error("lzw: ran out of data");
      v |= static_cast<uint32_t>((data[bitpos / 8] >> (bitpos % 8)) & 1) << i;
    }
    return v;
  };
  std::vector<uint8_t> out;
  std::vector<uint8_t> prev;
  while (true) {
    const uint32_t code = read();
    if (code == clear) {
      reset();
      width = min_code + 1;
      prev.clear();
      continue;
    }
    if (code == end) break;
    std::vector<uint8_t> entry;
    if (code < dict.size()) {
      entry = dict[code];
    } else if (code == dict.size() && !prev.empty()) {
      entry = prev;
      entry.push_back(prev.front());
    } else {
      throw std::runtime_error("lzw: bad code");
    }
    out.insert(out.end(), entry.begin(), entry.end());
    if (!prev.empty() && dict.size() < 4096) {
      auto add = prev;
      add.push_back(entry.front());
      dict.push_back(add);
    }
    if (dict.size() == (1u << width) && width < 12) ++width;
    prev = entry;
  }
  if (out.size() != expect) throw std::runtime_error("lzw: wrong pixel count");
  return out;
}

GifFrames read_gif(const std::vector<uint8_t>& b) {
  REQUIRE(b.size() > 13);
  REQUIRE(std::string(b.begin(), b.begin() + 6) == "GIF89a");
  GifFrames g;
  g.width = b[6] | b[7] << 8;
  g.height = b[8] | b[9] << 8;
  size_t p = 13;
  if (b[10] & 0x80) p += 3u * (1u << ((b[10] & 7) + 1));
  auto skip_blocks = [&] {
    while (b.at(p) != 0) p += b[p] + 1u;
    ++p;
  };
  while (true) {
    const uint8_t tag = b.at(p++);
    if (tag == 0x3B) break;
    if (tag == 0x21) {
      ++p;
      skip_blocks();
    } else if (tag == 0x2C) {
      const uint8_t flags = b.at(p + 8);
      p += 9;
      if (flags & 0x80) p += 3u * (1u << ((flags & 7) + 1));
      const int min_code = b.at(p++);
      std::vector<uint8_t> data;
      while (b.at(p) != 0) {
        data.insert(data.end(), b.begin() + static_cast<long>(p) + 1, b.begin() + static_cast<long>(p) + 1 + b[p]);
        p += b[p] + 1u;
      }
      ++p;
      g.frames.push_back(lzw_decode(data, min_code, static_cast<size_t>(g.width) * g.height));
    } else {
      FAIL("unknown gif block");
    }
  }
  return g;
}

Cine ramp_cine(Index t, Index h, Index w, uint64_t seed) {
  Tensor<float> v({1, t, h, w});
  Rng rng(seed);
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<float>(rng.uniform(-0.2, 1.2));
  return Cine(std::move(v));
}

}  // namespace

TEST_CASE("run config") {
  RunConfig c = default_config();
  std::istringstream in(
      "# desk overrides\n"
      "[mar]\n"
      "epochs = 25   # short\n"
      "lr=0.5\n"
      "\n"
      "[sampler]\n"
      "cfg = 1.5\n"
      "data.n = 40\n");
  c.merge(in, "inline");
  CHECK(c.get_int("mar.epochs") == 25);
  CHECK(c.get_double("mar.lr") == 0.5);
  CHECK(c.get_double("sampler.cfg") == 1.5);
  CHECK(c.get_int("data.n") == 40);
  CHECK(c.get_int_list("mar.patch") == std::vector<int64_t>{2, 2, 2});

  std::istringstream unknown("[mar]\nlearning_rate = 1\n");
  CHECK_THROWS_WITH(c.merge(unknown, "bad.cfg"), doctest::Contains("mar.learning_rate"));
  std::istringstream garbage("just words\n");
  CHECK_THROWS_WITH(c.merge(garbage, "bad.cfg"), doctest::Contains("bad.cfg:1"));
  c.set("mar.epochs", "ten");
  CHECK_THROWS(c.get_int("mar.epochs"));
  CHECK_THROWS(c.get("nope.key"));

  // dump() is a fixed point of merge().
  RunConfig d = default_config();
  std::istringstream back(c.dump());
  d.merge(back, "dump");
  CHECK(d.dump() == c.dump());
}

TEST_CASE("checkpoint round trip is bit exact") {
  Rng rng(3);
  ParamStore<float> store;
  Linear<float> a(store, "a", 5, 3, rng);
  Linear<float> b(store, "b", 3, 2, rng);
  store.entries()[0].second.mutable_value()[0] = std::bit_cast<float>(0x7FC00123u);  // NaN payload
  store.entries()[0].second.mutable_value()[1] = -0.0f;
  AdamW<float> opt(store, {});
  for (auto& [n, v] : store.entries()) v.mutable_grad().vec().setConstant(0.25f);
  opt.step();

  Checkpoint ck;
  store_params(ck, store, "m.");
  store_optimizer(ck, opt, store);
  ck.metadata["step"] = "17";
  ck.metadata["config"] = default_config().dump();
  const auto path = scratch("ck.cpgw");
  save_checkpoint(path, ck);

  const Checkpoint back = load_checkpoint(path);
  REQUIRE(back.tensors.size() == ck.tensors.size());
  for (size_t i = 0; i < ck.tensors.size(); ++i) {
    CHECK(back.tensors[i].first == ck.tensors[i].first);
    CHECK(back.tensors[i].second.shape() == ck.tensors[i].second.shape());
    CHECK(std::memcmp(back.tensors[i].second.data(), ck.tensors[i].second.data(),
                      sizeof(float) * static_cast<size_t>(ck.tensors[i].second.size())) == 0);
  }
  CHECK(back.metadata == ck.metadata);

  Rng other(99);
  ParamStore<float> store2;
  Linear<float> a2(store2, "a", 5, 3, other);
  Linear<float> b2(store2, "b", 3, 2, other);
  AdamW<float> opt2(store2, {});
  restore_params(back, store2, "m.");
  restore_optimizer(back, opt2, store2);
  CHECK(opt2.step_count() == 1);
  for (size_t i = 0; i < store.entries().size(); ++i) {
    const auto& x = store.entries()[i].second.value();
    const auto& y = store2.entries()[i].second.value();
    CHECK(std::memcmp(x.data(), y.data(), sizeof(float) * static_cast<size_t>(x.size())) == 0);
    CHECK(opt.first_moments()[i].vec() == opt2.first_moments()[i].vec());
  }

  // Byte layout of the header.
  std::ifstream raw(path, std::ios::binary);
  char magic[4];
  raw.read(magic, 4);
  CHECK(std::string(magic, 4) == "CPGW");
  CHECK(binio::get_le<uint32_t>(raw) == kCheckpointVersion);
  CHECK(binio::get_le<uint32_t>(raw) == ck.tensors.size());
  CHECK(binio::get_le<uint16_t>(raw) == 5);  // "m.a.w"

  // Shape mismatch and missing tensors are named.
  ParamStore<float> wrong;
  Linear<float> w(wrong, "a", 4, 3, other);
  CHECK_THROWS_WITH(restore_params(back, wrong, "m."), doctest::Contains("m.a.w"));
  CHECK_THROWS_WITH(restore_params(back, store2, "x."), doctest::Contains("x.a.w"));

  // Version mismatch names both versions.
  std::stringstream bumped;
  write_checkpoint(bumped, ck);
  std::string bytes = bumped.str();
  bytes[4] = 9;
  std::istringstream in(bytes);
  CHECK_THROWS_WITH(read_checkpoint(in), doctest::Contains("version 9"));
  std::istringstream in2(bytes);
  CHECK_THROWS_WITH(read_checkpoint(in2), doctest::Contains("expected 1"));
  std::istringstream truncated(bumped.str().substr(0, 40));
  CHECK_THROWS(read_checkpoint(truncated));
}

TEST_CASE("gray mapping and pgm") {
  CHECK(to_gray8(0.0f) == 0);
  CHECK(to_gray8(1.0f) == 255);
  CHECK(to_gray8(-3.0f) == 0);
  CHECK(to_gray8(7.0f) == 255);
  CHECK(to_gray8(0.5f) == 128);

  const Cine c = ramp_cine(3, 4, 5, 1);
  const auto path = scratch("f.pgm");
  write_pgm(path, c, 2);
  std::ifstream in(path, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string header = "P5\n5 4\n255\n";
  REQUIRE(bytes.size() == header.size() + 20);
  CHECK(bytes.substr(0, header.size()) == header);
  for (Index y = 0; y < 4; ++y)
    for (Index x = 0; x < 5; ++x)
      CHECK(static_cast<uint8_t>(bytes[header.size() + static_cast<size_t>(y * 5 + x)]) == to_gray8(c.at(2, y, x)));
  CHECK_THROWS(write_pgm(path, c, 3));
}

TEST_CASE("gif decodes back to the frames") {
  for (auto [t, h, w] : {std::tuple<Index, Index, Index>{8, 32, 32}, {2, 96, 96}, {2, 1, 1}}) {
    const Cine c = ramp_cine(t, h, w, static_cast<uint64_t>(h));
    const GifFrames g = read_gif(encode_gif(c));
    CHECK(g.width == static_cast<unsigned>(w));
    CHECK(g.height == static_cast<unsigned>(h));
    REQUIRE(g.frames.size() == static_cast<size_t>(t));
    bool same = true;
    for (Index f = 0; f < t; ++f)
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) same &= g.frames[static_cast<size_t>(f)][static_cast<size_t>(y * w + x)] == to_gray8(c.at(f, y, x));
    CHECK(same);
  }
  // A flat frame compresses into long runs.
  Tensor<float> flat({1, 2, 64, 64}, 0.5f);
  const GifFrames g = read_gif(encode_gif(Cine(flat)));
  CHECK(g.frames.size() == 2);
  CHECK(g.frames[1][4095] == 128);
}

TEST_CASE("sha1") {
  CHECK(sha1_hex_bytes("abc") == "a9993e364706816aba3e25717850c26c9cd0d89d");
  CHECK(sha1_hex_bytes("") == "da39a3ee5e6b4b0d3255bfef95601890afd80709");
  const auto path = scratch("h.txt");
  {
    std::ofstream out(path, std::ios::binary);
    out << "abc";
  }
  CHECK(sha1_hex(path) == "a9993e364706816aba3e25717850c26c9cd0d89d");
}
