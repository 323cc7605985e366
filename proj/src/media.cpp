#include "cpgg/media.hpp"

#include "cpgg/csv.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <unordered_map>

namespace cpgg {

uint8_t to_gray8(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<uint8_t>(std::lround(c * 255.0f));
}

void write_pgm(const std::filesystem::path& path, const Cine& cine, Index t) {
  if (t < 0 || t >= cine.frames()) throw std::out_of_range("frame " + std::to_string(t) + " out of range");
  auto out = open_for_write(path, std::ios::binary | std::ios::trunc);
  out << "P5\n" << cine.width() << " " << cine.height() << "\n255\n";
  for (Index y = 0; y < cine.height(); ++y)
    for (Index x = 0; x < cine.width(); ++x) out.put(static_cast<char>(to_gray8(cine.at(t, y, x))));
}

namespace {

class BitPacker {
 public:
  void put(uint32_t code, int width) {
    acc_ |= static_cast<uint64_t>(code) << nbits_;
    nbits_ += width;
    while (nbits_ >= 8) {
      bytes.push_back(static_cast<uint8_t>(acc_ & 0xFF));
      acc_ >>= 8;
      nbits_ -= 8;
    }
  }
  void flush() {
    if (nbits_ > 0) bytes.push_back(static_cast<uint8_t>(acc_ & 0xFF));
    acc_ = 0;
    nbits_ = 0;
  }
  std::vector<uint8_t> bytes;

 private:
  uint64_t acc_ = 0;
  int nbits_ = 0;
};

// Variable-width LZW with 8-bit roots; the table is reset when it fills.
std::vector<uint8_t> lzw(const std::vector<uint8_t>& pixels) {
  constexpr uint32_t kClear = 256, kEnd = 257;
  BitPacker out;
  std::unordered_map<uint32_t, uint32_t> table;  // (prefix << 8 | byte) -> code
  uint32_t next = 258;
  int width = 9;
  out.put(kClear, width);
  uint32_t prefix = pixels.front();
  for (size_t i = 1; i < pixels.size(); ++i) {
    const uint32_t key = prefix << 8 | pixels[i];
    auto it = table.find(key);
    if (it != table.end()) {
      prefix = it->second;
      continue;
    }
    out.put(prefix, width);
    if (next == 4096) {
      out.put(kClear, width);
      table.clear();
      next = 258;
      width = 9;
    } else {
      table.emplace(key, next);
      // The decoder grows its width one code later than the table, so
      // widen once the last assigned code no longer fits.
      if (next == (1u << width) && width < 12) ++width;
      ++next;
    }
    prefix = pixels[i];
  }
  out.put(prefix, width);
  out.put(kEnd, width);
  out.flush();
  return out.bytes;
}

void put16(std::vector<uint8_t>& b, unsigned v) {
  b.push_back(static_cast<uint8_t>(v & 0xFF));
  b.push_back(static_cast<uint8_t>(v >> 8));
}

}  // namespace

std::vector<uint8_t> encode_gif(const Cine& cine, int delay_centiseconds) {
  const auto w = static_cast<unsigned>(cine.width()), h = static_cast<unsigned>(cine.height());
  if (w == 0 || h == 0 || w > 0xFFFF || h > 0xFFFF) throw std::invalid_argument("gif: bad frame size");
  std::vector<uint8_t> b;
  const char* header = "GIF89a";
  b.insert(b.end(), header, header + 6);
  put16(b, w);
  put16(b, h);
  b.push_back(0xF7);  // global table, 8-bit colour resolution, 256 entries
  b.push_back(0);
  b.push_back(0);
  for (int i = 0; i < 256; ++i)
    for (int c = 0; c < 3; ++c) b.push_back(static_cast<uint8_t>(i));
  // Netscape looping extension.
  const uint8_t loop[] = {0x21, 0xFF, 0x0B, 'N', 'E', 'T', 'S', 'C', 'A', 'P', 'E', '2', '.', '0', 0x03, 0x01, 0x00, 0x00, 0x00};
  b.insert(b.end(), std::begin(loop), std::end(loop));

  for (Index t = 0; t < cine.frames(); ++t) {
    b.insert(b.end(), {0x21, 0xF9, 0x04, 0x00});
    put16(b, static_cast<unsigned>(delay_centiseconds));
    b.insert(b.end(), {0x00, 0x00});
    b.push_back(0x2C);
    put16(b, 0);
    put16(b, 0);
    put16(b, w);
    put16(b, h);
    b.push_back(0);
    b.push_back(8);  // LZW minimum code size
    std::vector<uint8_t> pixels;
    pixels.reserve(static_cast<size_t>(w) * h);
    for (Index y = 0; y < cine.height(); ++y)
      for (Index x = 0; x < cine.width(); ++x) pixels.push_back(to_gray8(cine.at(t, y, x)));
    const std::vector<uint8_t> data = lzw(pixels);
    for (size_t i = 0; i < data.size(); i += 255) {
      const size_t n = std::min<size_t>(255, data.size() - i);
      b.push_back(static_cast<uint8_t>(n));
      b.insert(b.end(), data.begin() + static_cast<std::ptrdiff_t>(i), data.begin() + static_cast<std::ptrdiff_t>(i + n));
    }
    b.push_back(0);
  }
  b.push_back(0x3B);
  return b;
}

void write_gif(const std::filesystem::path& path, const Cine& cine, int delay_centiseconds) {
  const std::vector<uint8_t> bytes = encode_gif(cine, delay_centiseconds);
  auto out = open_for_write(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::string sha1_hex_bytes(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha1(), nullptr)) {
    throw std::runtime_error("sha1 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xF];
  }
  return out;
}

std::string sha1_hex(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha1_hex_bytes(bytes);
}

}  // namespace cpgg
