#pragma once

#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "flowvocoder/flow.hpp"
#include "flowvocoder/tensor.hpp"

namespace flowvocoder {

// ---- PCM normalization ------------------------------------------------------

// 16-bit samples divided by 32768, so y is in [-1, 1).
inline std::vector<double> normalize_audio(const std::vector<int16_t>& pcm) {
  std::vector<double> out(pcm.size());
  for (size_t i = 0; i < pcm.size(); ++i) out[i] = static_cast<double>(pcm[i]) / 32768.0;
  return out;
}

inline int16_t denormalize_sample(double y) {
  double v = std::nearbyint(y * 32768.0);
  if (v < -32768.0) v = -32768.0;
  if (v > 32767.0) v = 32767.0;
  return static_cast<int16_t>(v);
}

inline std::vector<int16_t> denormalize_audio(const std::vector<double>& y) {
  std::vector<int16_t> out(y.size());
  for (size_t i = 0; i < y.size(); ++i) out[i] = denormalize_sample(y[i]);
  return out;
}

// ---- mel extraction ----------------------------------------------------------

struct MelConfig {
  int sample_rate = 22050;
  int n_mels = 80;
  int n_fft = 1024;
  int hop = 256;
  int win = 1024;
  double fmin = 0.0;
  double log_floor = 1e-5;

  double fmax() const { return sample_rate / 2.0; }
};

struct MelSpectrogram {
  Tensor frames;  // [n_mels, T], natural-log magnitudes with floor applied
  int sample_rate = 0;
  int hop = 0;

  int n_mels() const { return frames.extent(0); }
  int n_frames() const { return frames.extent(1); }
};

namespace dsp {

// In-place iterative radix-2 FFT.
inline void fft(std::vector<std::complex<double>>& a) {
  const size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) throw ConfigError("fft: size must be a power of two");
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * M_PI / static_cast<double>(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        std::complex<double> u = a[i + k];
        std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

// Reflect indexing with arbitrary signal length (period 2n-2).
inline int reflect_index(long j, int n) {
  if (n == 1) return 0;
  const long p = 2L * (n - 1);
  j = ((j % p) + p) % p;
  return static_cast<int>(j < n ? j : p - j);
}

inline std::vector<double> hamming(int n) {
  std::vector<double> w(static_cast<size_t>(n));
  if (n == 1) {
    w[0] = 1.0;
    return w;
  }
  for (int i = 0; i < n; ++i)
    w[static_cast<size_t>(i)] = 0.54 - 0.46 * std::cos(2.0 * M_PI * i / (n - 1.0));
  return w;
}

// Slaney mel scale: linear below 1 kHz, logarithmic above.
inline double hz_to_mel(double f) {
  const double min_log_hz = 1000.0, lin_step = 200.0 / 3.0;
  const double min_log_mel = min_log_hz / lin_step;
  const double log_step = std::log(6.4) / 27.0;
  return f < min_log_hz ? f / lin_step : min_log_mel + std::log(f / min_log_hz) / log_step;
}

inline double mel_to_hz(double m) {
  const double min_log_hz = 1000.0, lin_step = 200.0 / 3.0;
  const double min_log_mel = min_log_hz / lin_step;
  const double log_step = std::log(6.4) / 27.0;
  return m < min_log_mel ? m * lin_step : min_log_hz * std::exp(log_step * (m - min_log_mel));
}

// Triangular filterbank on the Slaney scale with 2/(f_hi - f_lo) area
// normalization; [n_mels, n_fft/2 + 1].
inline Tensor mel_filterbank(const MelConfig& cfg) {
  const int n_bins = cfg.n_fft / 2 + 1;
  std::vector<double> edges(static_cast<size_t>(cfg.n_mels) + 2);
  const double mel_lo = hz_to_mel(cfg.fmin), mel_hi = hz_to_mel(cfg.fmax());
  for (int i = 0; i < cfg.n_mels + 2; ++i)
    edges[static_cast<size_t>(i)] =
        mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (cfg.n_mels + 1.0));
  Tensor fb({cfg.n_mels, n_bins});
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double f_lo = edges[static_cast<size_t>(m)];
    const double f_c = edges[static_cast<size_t>(m) + 1];
    const double f_hi = edges[static_cast<size_t>(m) + 2];
    const double enorm = 2.0 / (f_hi - f_lo);
    for (int b = 0; b < n_bins; ++b) {
      const double f = static_cast<double>(b) * cfg.sample_rate / cfg.n_fft;
      const double up = (f - f_lo) / (f_c - f_lo);
      const double down = (f_hi - f) / (f_hi - f_c);
      const double w = std::min(up, down);
      if (w > 0.0) fb(m, b) = w * enorm;
    }
  }
  return fb;
}

}  // namespace dsp

// Center of filter `m` in Hz, for tests that locate tonal energy.
inline double mel_filter_center_hz(const MelConfig& cfg, int m) {
  const double mel_lo = dsp::hz_to_mel(cfg.fmin), mel_hi = dsp::hz_to_mel(cfg.fmax());
  return dsp::mel_to_hz(mel_lo + (mel_hi - mel_lo) * (m + 1.0) / (cfg.n_mels + 1.0));
}

// 80-band log mel spectrogram: reflect-centered Hamming-window STFT magnitude
// through the Slaney filterbank, log with floor. T = ceil(len / hop).
inline MelSpectrogram mel_extract(const std::vector<double>& wave, const MelConfig& cfg) {
  if (wave.empty()) throw InputError("mel_extract: empty input");
  if (cfg.win > cfg.n_fft) throw ConfigError("mel_extract: win > n_fft");
  const int len = static_cast<int>(wave.size());
  const int t_frames = (len + cfg.hop - 1) / cfg.hop;
  const Tensor fb = dsp::mel_filterbank(cfg);
  const std::vector<double> window = dsp::hamming(cfg.win);
  const int n_bins = cfg.n_fft / 2 + 1;

  MelSpectrogram mel;
  mel.sample_rate = cfg.sample_rate;
  mel.hop = cfg.hop;
  mel.frames = Tensor({cfg.n_mels, t_frames});

  std::vector<std::complex<double>> buf(static_cast<size_t>(cfg.n_fft));
  std::vector<double> mag(static_cast<size_t>(n_bins));
  for (int t = 0; t < t_frames; ++t) {
    const long center = static_cast<long>(t) * cfg.hop;
    std::fill(buf.begin(), buf.end(), std::complex<double>(0.0, 0.0));
    const int off = (cfg.n_fft - cfg.win) / 2;
    for (int i = 0; i < cfg.win; ++i) {
      const long src = center - cfg.win / 2 + i;
      buf[static_cast<size_t>(off + i)] =
          wave[static_cast<size_t>(dsp::reflect_index(src, len))] * window[static_cast<size_t>(i)];
    }
    dsp::fft(buf);
    for (int b = 0; b < n_bins; ++b) mag[static_cast<size_t>(b)] = std::abs(buf[static_cast<size_t>(b)]);
    for (int m = 0; m < cfg.n_mels; ++m) {
      double acc = 0.0;
      const double* fbm = fb.data() + static_cast<size_t>(m) * n_bins;
      for (int b = 0; b < n_bins; ++b) acc += fbm[b] * mag[static_cast<size_t>(b)];
      mel.frames(m, t) = std::log(std::max(acc, cfg.log_floor));
    }
  }
  return mel;
}

// ---- FVML cache files --------------------------------------------------------
// "FVML" | u32 version | u32 T | u32 bands | f32 LE data, frame-major.

namespace detail_io {

inline void put_u16(std::ostream& os, uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f32(std::ostream& os, float f) {
  uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(os, v);
}

inline uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

inline uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline float get_f32(std::istream& is) {
  uint32_t v = get_u32(is);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

}  // namespace detail_io

constexpr uint32_t kMelFileVersion = 1;

inline void write_fvml(const std::string& path, const MelSpectrogram& mel) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("write_fvml: cannot open " + path);
  os.write("FVML", 4);
  detail_io::put_u32(os, kMelFileVersion);
  detail_io::put_u32(os, static_cast<uint32_t>(mel.n_frames()));
  detail_io::put_u32(os, static_cast<uint32_t>(mel.n_mels()));
  for (int t = 0; t < mel.n_frames(); ++t)
    for (int m = 0; m < mel.n_mels(); ++m)
      detail_io::put_f32(os, static_cast<float>(mel.frames(m, t)));
  if (!os) throw InputError("write_fvml: write failed for " + path);
}

// sample_rate/hop are not stored in the file; the caller supplies them.
inline MelSpectrogram read_fvml(const std::string& path, int sample_rate, int hop) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("read_fvml: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "FVML", 4) != 0)
    throw InputError("read_fvml: bad magic in " + path);
  const uint32_t version = detail_io::get_u32(is);
  if (version != kMelFileVersion) throw InputError("read_fvml: unsupported version");
  const uint32_t t_frames = detail_io::get_u32(is);
  const uint32_t bands = detail_io::get_u32(is);
  if (t_frames == 0 || bands == 0 || t_frames > (1u << 26) || bands > (1u << 16))
    throw InputError("read_fvml: implausible dimensions");
  MelSpectrogram mel;
  mel.sample_rate = sample_rate;
  mel.hop = hop;
  mel.frames = Tensor({static_cast<int>(bands), static_cast<int>(t_frames)});
  for (uint32_t t = 0; t < t_frames; ++t)
    for (uint32_t m = 0; m < bands; ++m)
      mel.frames(static_cast<int>(m), static_cast<int>(t)) = detail_io::get_f32(is);
  if (!is) throw InputError("read_fvml: truncated file " + path);
  return mel;
}

// ---- learned upsampler --------------------------------------------------------

// Two 16x transposed convolutions over the (band x time) plane with a leaky
// ReLU between them, then a 1x1 projection of the 80 bands to cond_channels.
// Output width is exactly 256*T by construction of the stride-16/kernel-32/
// pad-8 geometry.
inline ad::Tape::Id upsample_t(ad::Tape& t, const FlowModel& m, const ParamIds& P,
                               ad::Tape::Id mel_plane) {
  const Tensor& mel = t.value(mel_plane);
  if (mel.rank() != 3 || mel.extent(0) != 1 || mel.extent(1) != m.cfg.n_mels)
    throw ConfigError("upsample: expected [1,n_mels,T] input");
  const int pad_t = (kUpsampleKernelT - kUpsampleStride) / 2;
  const int pad_b = (kUpsampleKernelB - 1) / 2;
  ad::Tape::Id h = t.conv_transpose2d_plane(mel_plane, P.at("up.c1.w"), P.at("up.c1.b"),
                                            /*sh=*/1, /*sw=*/kUpsampleStride, pad_b, pad_t);
  h = t.leaky_relu(h, kUpsampleLeakySlope);
  h = t.conv_transpose2d_plane(h, P.at("up.c2.w"), P.at("up.c2.b"), 1, kUpsampleStride, pad_b,
                               pad_t);
  const Tensor& hv = t.value(h);
  h = t.reshape(h, {m.cfg.n_mels, 1, hv.extent(2)});
  return t.conv2d(h, P.at("up.proj.w"), P.at("up.proj.b"), {1, ad::HeightPad::kCausalNonStrict});
}

inline Tensor mel_plane(const MelSpectrogram& mel) {
  Tensor plane({1, mel.n_mels(), mel.n_frames()});
  std::copy(mel.frames.data(), mel.frames.data() + mel.frames.numel(), plane.data());
  return plane;
}

// Per-sample conditioner [cond_channels, 1, 256*T].
inline Tensor upsample(const MelSpectrogram& mel, const FlowModel& m) {
  ad::Tape t;
  ParamIds P = register_params(t, m, /*trainable=*/false);
  return t.value(upsample_t(t, m, P, t.input(mel_plane(mel))));
}

}  // namespace flowvocoder
