#pragma once

#include "cpgg/phantom.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace cpgg {

/// Linear [0,1] -> [0,255] with clamping and round-to-nearest.
uint8_t to_gray8(float v);

/// Binary PGM (P5) of frame t.
void write_pgm(const std::filesystem::path& path, const Cine& cine, Index t);

/// Looping GIF89a with one image per frame on a 256-level gray palette.
std::vector<uint8_t> encode_gif(const Cine& cine, int delay_centiseconds = 10);
void write_gif(const std::filesystem::path& path, const Cine& cine, int delay_centiseconds = 10);

/// Hex SHA-1 of a file's bytes, or of a buffer.
std::string sha1_hex(const std::filesystem::path& path);
std::string sha1_hex_bytes(const std::string& bytes);

}  // namespace cpgg
