#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "flowvocoder/errors.hpp"

namespace flowvocoder {

struct WavData {
  std::vector<int16_t> samples;
  int sample_rate = 0;
};

// Minimal RIFF reader: mono 16-bit PCM only, unknown chunks skipped.
inline WavData read_wav(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("read_wav: cannot open " + path);

  auto u16 = [&]() -> uint32_t {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    return static_cast<uint32_t>(b[0] | (b[1] << 8));
  };
  auto u32 = [&]() -> uint32_t {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
  };

  char tag[4];
  is.read(tag, 4);
  if (!is || std::memcmp(tag, "RIFF", 4) != 0) throw InputError("read_wav: not RIFF: " + path);
  u32();  // riff size
  is.read(tag, 4);
  if (!is || std::memcmp(tag, "WAVE", 4) != 0) throw InputError("read_wav: not WAVE: " + path);

  WavData out;
  bool have_fmt = false, have_data = false;
  while (is.read(tag, 4)) {
    uint32_t size = u32();
    if (!is) break;
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      const uint32_t format = u16();
      const uint32_t channels = u16();
      out.sample_rate = static_cast<int>(u32());
      u32();  // byte rate
      u16();  // block align
      const uint32_t bits = u16();
      if (size > 16) is.ignore(size - 16);
      if (format != 1 || bits != 16) throw InputError("read_wav: only 16-bit PCM supported: " + path);
      if (channels != 1) throw InputError("read_wav: only mono supported: " + path);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw InputError("read_wav: data before fmt: " + path);
      const size_t n = size / 2;
      out.samples.resize(n);
      for (size_t i = 0; i < n; ++i) {
        unsigned char b[2];
        is.read(reinterpret_cast<char*>(b), 2);
        out.samples[i] = static_cast<int16_t>(static_cast<uint16_t>(b[0] | (b[1] << 8)));
      }
      if (!is) throw InputError("read_wav: truncated data chunk: " + path);
      have_data = true;
    } else {
      is.ignore(size + (size & 1));  // chunks are word-aligned
    }
  }
  if (!have_fmt || !have_data) throw InputError("read_wav: missing fmt/data chunk: " + path);
  return out;
}

inline void write_wav(const std::string& path, const std::vector<int16_t>& samples,
                      int sample_rate) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("write_wav: cannot open " + path);
  auto u16 = [&](uint32_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 2);
  };
  auto u32 = [&](uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
  };
  const uint32_t data_bytes = static_cast<uint32_t>(samples.size() * 2);
  os.write("RIFF", 4);
  u32(36 + data_bytes);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  u32(16);
  u16(1);  // PCM
  u16(1);  // mono
  u32(static_cast<uint32_t>(sample_rate));
  u32(static_cast<uint32_t>(sample_rate) * 2);
  u16(2);
  u16(16);
  os.write("data", 4);
  u32(data_bytes);
  for (int16_t s : samples) u16(static_cast<uint16_t>(s));
  if (!os) throw InputError("write_wav: write failed for " + path);
}

}  // namespace flowvocoder
