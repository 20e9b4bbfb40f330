#pragma once

#include <chrono>
#include <ostream>
#include <vector>

#include "flowvocoder/conditioning.hpp"
#include "flowvocoder/flow.hpp"
#include "flowvocoder/rng.hpp"

namespace flowvocoder {

struct SynthesisRequest {
  double temperature = 1.0;  // sigma of the Gaussian noise
  uint64_t seed = 0;
  double tol = 1e-8;
  int threads = 1;
};

struct SynthesisResult {
  std::vector<int16_t> pcm;
  int sample_rate = 0;
  double total_ms = 0.0;
  FlowForwardTiming timing;

  double duration_s() const {
    return sample_rate > 0 ? static_cast<double>(pcm.size()) / sample_rate : 0.0;
  }
};

// RTF = synthesis wall time / audio duration.
inline double rtf(double synth_seconds, double audio_seconds) {
  if (!(audio_seconds > 0.0)) throw InputError("rtf: duration must be positive");
  return synth_seconds / audio_seconds;
}

// Sample Z ~ N(0, sigma^2) of shape h x w per 256*T samples, run the forward
// mapping, denormalize to PCM16. (seed, mel, model, temperature) fully
// determine the output.
inline SynthesisResult synthesize(const FlowModel& model, const MelSpectrogram& mel,
                                  const SynthesisRequest& req) {
  if (mel.n_frames() < 1) throw InputError("synthesize: empty mel");
  if (mel.n_mels() != model.cfg.n_mels)
    throw ConfigError("synthesize: mel band count does not match model");
  if (!(req.temperature >= 0.0)) throw ConfigError("synthesize: temperature must be >= 0");
  const auto t0 = std::chrono::steady_clock::now();

  const int n = kUpsampleFactor * mel.n_frames();
  const int h = model.cfg.squeeze_h;
  if (n % h != 0) throw ConfigError("synthesize: 256*T not divisible by squeeze_h");
  Tensor z({1, h, n / h});
  Rng rng(req.seed);
  for (size_t i = 0; i < z.numel(); ++i) z[i] = req.temperature * rng.normal();

  Tensor cond = squeeze_channels(upsample(mel, model), h);
  SynthesisResult out;
  std::vector<double> x = flow_forward(z, cond, model, req.tol, &out.timing, req.threads);
  out.pcm = denormalize_audio(x);
  out.sample_rate = mel.sample_rate;
  out.total_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

// Timing report: CSV "stage,ms".
inline void write_timing_csv(std::ostream& os, const SynthesisResult& r) {
  os << "stage,ms\n";
  os << "estimator," << r.timing.estimator_ms << "\n";
  os << "inversion," << r.timing.inversion_ms << "\n";
  os << "other," << r.total_ms - r.timing.estimator_ms - r.timing.inversion_ms << "\n";
  os << "total," << r.total_ms << "\n";
}

}  // namespace flowvocoder
