#pragma once

#include <algorithm>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "flowvocoder/conditioning.hpp"
#include "flowvocoder/config.hpp"
#include "flowvocoder/flow.hpp"
#include "flowvocoder/synthesis.hpp"
#include "flowvocoder/wav.hpp"

namespace flowvocoder {

constexpr int kMcdOrder = 13;  // cepstral coefficients 1..13, c0 excluded

// Orthonormal DCT-II of one vector.
inline std::vector<double> dct_ortho(const std::vector<double>& v) {
  const int n = static_cast<int>(v.size());
  std::vector<double> out(static_cast<size_t>(n));
  const double a0 = std::sqrt(1.0 / n), ak = std::sqrt(2.0 / n);
  for (int k = 0; k < n; ++k) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i)
      acc += v[static_cast<size_t>(i)] * std::cos(M_PI * k * (2.0 * i + 1.0) / (2.0 * n));
    out[static_cast<size_t>(k)] = (k == 0 ? a0 : ak) * acc;
  }
  return out;
}

inline std::vector<double> idct_ortho(const std::vector<double>& c) {
  const int n = static_cast<int>(c.size());
  std::vector<double> out(static_cast<size_t>(n));
  const double a0 = std::sqrt(1.0 / n), ak = std::sqrt(2.0 / n);
  for (int i = 0; i < n; ++i) {
    double acc = a0 * c[0];
    for (int k = 1; k < n; ++k)
      acc += ak * c[static_cast<size_t>(k)] * std::cos(M_PI * k * (2.0 * i + 1.0) / (2.0 * n));
    out[static_cast<size_t>(i)] = acc;
  }
  return out;
}

// Mel-cepstral distortion between two log-mel frame sets [bands, T]:
// per frame, (10/ln 10) * sqrt(2 * sum_{m=1..13} (c_r(m) - c_s(m))^2) over
// orthonormal-DCT cepstra, averaged over frames.
inline double mcd_from_logmel(const Tensor& ref, const Tensor& syn) {
  if (ref.extent(0) != syn.extent(0)) throw InputError("mcd: band count mismatch");
  const int t_frames = std::min(ref.extent(1), syn.extent(1));
  if (std::abs(ref.extent(1) - syn.extent(1)) > 1)
    throw InputError("mcd: frame counts differ by more than one");
  if (t_frames < 1) throw InputError("mcd: no common frame");
  const int bands = ref.extent(0);
  std::vector<double> fr(static_cast<size_t>(bands)), fs(static_cast<size_t>(bands));
  double acc = 0.0;
  for (int t = 0; t < t_frames; ++t) {
    for (int m = 0; m < bands; ++m) {
      fr[static_cast<size_t>(m)] = ref(m, t);
      fs[static_cast<size_t>(m)] = syn(m, t);
    }
    const std::vector<double> cr = dct_ortho(fr), cs = dct_ortho(fs);
    double d2 = 0.0;
    for (int m = 1; m <= kMcdOrder; ++m) {
      const double d = cr[static_cast<size_t>(m)] - cs[static_cast<size_t>(m)];
      d2 += d * d;
    }
    acc += (10.0 / std::log(10.0)) * std::sqrt(2.0 * d2);
  }
  return acc / t_frames;
}

inline double mcd(const std::vector<double>& ref, const std::vector<double>& syn,
                  const MelConfig& cfg) {
  return mcd_from_logmel(mel_extract(ref, cfg).frames, mel_extract(syn, cfg).frames);
}

// ---- F0 tracking ---------------------------------------------------------------

struct F0Config {
  int frame = 1024;
  int hop = 256;
  double fmin = 70.0;
  double fmax = 400.0;
  double voicing_threshold = 0.45;
};

// Normalized-autocorrelation pitch per frame; 0 marks unvoiced. Framing
// matches mel_extract's ceil(len/hop) count (frames are zero padded past the
// signal end). The smallest lag whose local NACF peak is within 2% of the
// global maximum wins, so harmonics do not alias down an octave, and the peak
// is refined parabolically.
inline std::vector<double> f0_track(const std::vector<double>& wave, int sr,
                                    const F0Config& cfg = {}) {
  const int len = static_cast<int>(wave.size());
  const int t_frames = (len + cfg.hop - 1) / cfg.hop;
  const int tau_min = std::max(2, static_cast<int>(std::floor(sr / cfg.fmax)));
  const int tau_max = static_cast<int>(std::ceil(sr / cfg.fmin));
  std::vector<double> f0(static_cast<size_t>(std::max(t_frames, 0)), 0.0);
  if (tau_max + 2 >= cfg.frame) throw ConfigError("f0_track: frame too short for fmin");

  std::vector<double> x(static_cast<size_t>(cfg.frame));
  std::vector<double> nacf(static_cast<size_t>(tau_max) + 2, 0.0);
  for (int t = 0; t < t_frames; ++t) {
    const long start = static_cast<long>(t) * cfg.hop;
    for (int i = 0; i < cfg.frame; ++i) {
      const long src = start + i;
      x[static_cast<size_t>(i)] = (src >= 0 && src < len) ? wave[static_cast<size_t>(src)] : 0.0;
    }
    for (int tau = tau_min - 1; tau <= tau_max + 1; ++tau) {
      double num = 0.0, e0 = 0.0, e1 = 0.0;
      const int n = cfg.frame - tau;
      for (int i = 0; i < n; ++i) {
        num += x[static_cast<size_t>(i)] * x[static_cast<size_t>(i + tau)];
        e0 += x[static_cast<size_t>(i)] * x[static_cast<size_t>(i)];
        e1 += x[static_cast<size_t>(i + tau)] * x[static_cast<size_t>(i + tau)];
      }
      nacf[static_cast<size_t>(tau)] = (e0 > 1e-12 && e1 > 1e-12) ? num / std::sqrt(e0 * e1) : 0.0;
    }
    double best = 0.0;
    for (int tau = tau_min; tau <= tau_max; ++tau) best = std::max(best, nacf[static_cast<size_t>(tau)]);
    if (best < cfg.voicing_threshold) continue;
    int pick = -1;
    for (int tau = tau_min; tau <= tau_max; ++tau) {
      const double v = nacf[static_cast<size_t>(tau)];
      if (v >= 0.98 * best && v >= nacf[static_cast<size_t>(tau) - 1] &&
          v >= nacf[static_cast<size_t>(tau) + 1]) {
        pick = tau;
        break;
      }
    }
    if (pick < 0) continue;
    const double l = nacf[static_cast<size_t>(pick) - 1], c = nacf[static_cast<size_t>(pick)],
                 r = nacf[static_cast<size_t>(pick) + 1];
    double delta = 0.0;
    const double denom = l - 2.0 * c + r;
    if (std::abs(denom) > 1e-12) delta = std::clamp(0.5 * (l - r) / denom, -0.5, 0.5);
    f0[static_cast<size_t>(t)] = sr / (pick + delta);
  }
  return f0;
}

struct RmseF0Result {
  bool defined = false;  // false when no frame is voiced in both signals
  double cents = 0.0;
  int n_frames = 0;
};

// 1200 * (log2 Fr - log2 Fs) per commonly voiced frame, aggregated as the
// root mean square over those frames.
inline RmseF0Result rmse_f0(const std::vector<double>& ref, const std::vector<double>& syn,
                            int sr, const F0Config& cfg = {}) {
  const std::vector<double> fr = f0_track(ref, sr, cfg);
  const std::vector<double> fs = f0_track(syn, sr, cfg);
  const size_t n = std::min(fr.size(), fs.size());
  RmseF0Result out;
  double acc = 0.0;
  for (size_t t = 0; t < n; ++t) {
    if (fr[t] <= 0.0 || fs[t] <= 0.0) continue;
    const double d = 1200.0 * (std::log2(fr[t]) - std::log2(fs[t]));
    acc += d * d;
    ++out.n_frames;
  }
  if (out.n_frames == 0) return out;
  out.defined = true;
  out.cents = std::sqrt(acc / out.n_frames);
  return out;
}

// One row per frame: time_s, f0_hz (0 = unvoiced).
inline void f0_contour_csv(std::ostream& os, const std::vector<double>& wave, int sr,
                           const F0Config& cfg = {}) {
  const std::vector<double> f0 = f0_track(wave, sr, cfg);
  os << "time_s,f0_hz\n";
  for (size_t t = 0; t < f0.size(); ++t) {
    char line[64];
    std::snprintf(line, sizeof(line), "%.6f,%.3f\n", static_cast<double>(t) * cfg.hop / sr, f0[t]);
    os << line;
  }
}

// ---- likelihood on held-out audio --------------------------------------------

// Mean per-dimension log-likelihood over non-overlapping chunk_len windows of
// each utterance (an utterance shorter than chunk_len contributes one window
// trimmed to a multiple of squeeze_h).
inline double ll_eval(const FlowModel& model, const Config& cfg,
                      const std::vector<std::vector<double>>& utterances) {
  const MelConfig mel_cfg = cfg.mel();
  double acc = 0.0;
  long n_chunks = 0;
  for (const auto& utt : utterances) {
    std::vector<std::pair<size_t, size_t>> windows;
    if (static_cast<int>(utt.size()) >= cfg.chunk_len) {
      for (size_t off = 0; off + static_cast<size_t>(cfg.chunk_len) <= utt.size();
           off += static_cast<size_t>(cfg.chunk_len))
        windows.emplace_back(off, static_cast<size_t>(cfg.chunk_len));
    } else {
      const size_t trimmed = utt.size() - utt.size() % static_cast<size_t>(cfg.squeeze_h);
      if (trimmed > 0) windows.emplace_back(0, trimmed);
    }
    for (auto [off, len] : windows) {
      std::vector<double> chunk(utt.begin() + static_cast<long>(off),
                                utt.begin() + static_cast<long>(off + len));
      MelSpectrogram mel = mel_extract(chunk, mel_cfg);
      Tensor cond = upsample(mel, model);
      // crop the conditioner to the chunk and squeeze like the audio
      Tensor cropped({cond.extent(0), 1, static_cast<int>(len)});
      for (int c = 0; c < cond.extent(0); ++c)
        for (size_t j = 0; j < len; ++j)
          cropped(c, 0, static_cast<int>(j)) = cond(c, 0, static_cast<int>(j));
      const double ll = log_likelihood(chunk, squeeze_channels(cropped, model.cfg.squeeze_h), model);
      acc += ll / static_cast<double>(len);
      ++n_chunks;
    }
  }
  if (n_chunks == 0) throw InputError("ll_eval: no usable chunk");
  return acc / static_cast<double>(n_chunks);
}

// ---- evaluation report ----------------------------------------------------------

struct EvalReport {
  double mcd_mean = 0.0, mcd_stderr = 0.0;
  double rmse_f0_mean = 0.0, rmse_f0_stderr = 0.0;
  double ll_per_dim = 0.0;
  double rtf_mean = 0.0;
  int n_utterances = 0;
  int n_f0_undefined = 0;

  void to_csv(std::ostream& os) const {
    os << "metric,mean,stderr\n";
    os << "mcd_db," << mcd_mean << "," << mcd_stderr << "\n";
    os << "rmse_f0_cents," << rmse_f0_mean << "," << rmse_f0_stderr << "\n";
    os << "ll_per_dim," << ll_per_dim << ",\n";
    os << "rtf," << rtf_mean << ",\n";
    os << "utterances," << n_utterances << ",\n";
    os << "f0_undefined," << n_f0_undefined << ",\n";
  }

  void to_summary(std::ostream& os) const {
    os << "utterances:    " << n_utterances << "\n";
    os << "MCD [dB]:      " << mcd_mean << " +- " << mcd_stderr << "\n";
    os << "RMSE-F0 [cent]:" << " " << rmse_f0_mean << " +- " << rmse_f0_stderr;
    if (n_f0_undefined > 0) os << "  (" << n_f0_undefined << " undefined, excluded)";
    os << "\n";
    os << "LL/dim [nats]: " << ll_per_dim << "\n";
    os << "RTF:           " << rtf_mean << "\n";
  }
};

namespace detail_metrics {

inline std::pair<double, double> mean_stderr(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  if (xs.size() < 2) return {mean, 0.0};
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(xs.size() - 1);
  return {mean, std::sqrt(var / static_cast<double>(xs.size()))};
}

}  // namespace detail_metrics

// Analysis-synthesis evaluation over reference WAVs: each utterance's mel is
// re-synthesized and scored against the reference.
inline EvalReport evaluate_utterances(const FlowModel& model, const Config& cfg,
                                      const std::vector<std::string>& ref_paths, int threads,
                                      std::ostream* per_utt_csv = nullptr,
                                      std::ostream* log = nullptr) {
  if (ref_paths.empty()) throw InputError("evaluate: no utterances");
  const MelConfig mel_cfg = cfg.mel();
  std::vector<double> mcds, rmses, rtfs;
  std::vector<std::vector<double>> ref_waves;
  if (per_utt_csv) *per_utt_csv << "utterance,mcd_db,rmse_f0_cents,rtf\n";
  EvalReport rep;
  for (const auto& path : ref_paths) {
    WavData wav = read_wav(path);
    if (wav.sample_rate != cfg.sample_rate)
      throw InputError("evaluate: sample rate mismatch for " + path);
    std::vector<double> ref = normalize_audio(wav.samples);
    MelSpectrogram mel = mel_extract(ref, mel_cfg);
    SynthesisRequest req;
    req.seed = cfg.seed;
    req.tol = cfg.inverse_tol;
    req.threads = threads;
    SynthesisResult syn = synthesize(model, mel, req);
    std::vector<double> syn_wave = normalize_audio(syn.pcm);
    // the reference is shorter than 256*T by less than one frame; trim both
    const size_t n = std::min(ref.size(), syn_wave.size());
    syn_wave.resize(n);
    std::vector<double> ref_trim(ref.begin(), ref.begin() + static_cast<long>(n));

    const double m = mcd(ref_trim, syn_wave, mel_cfg);
    const RmseF0Result rf = rmse_f0(ref_trim, syn_wave, cfg.sample_rate);
    const double r = rtf(syn.total_ms / 1000.0, syn.duration_s());
    mcds.push_back(m);
    if (rf.defined)
      rmses.push_back(rf.cents);
    else
      ++rep.n_f0_undefined;
    rtfs.push_back(r);
    ref_waves.push_back(std::move(ref));
    if (per_utt_csv) {
      *per_utt_csv << path << "," << m << ",";
      if (rf.defined) *per_utt_csv << rf.cents;
      else *per_utt_csv << "undefined";
      *per_utt_csv << "," << r << "\n";
    }
    if (log) *log << "evaluated " << path << "\n";
  }
  auto [mm, ms] = detail_metrics::mean_stderr(mcds);
  auto [rm, rs] = detail_metrics::mean_stderr(rmses);
  auto [tm, ts] = detail_metrics::mean_stderr(rtfs);
  rep.mcd_mean = mm;
  rep.mcd_stderr = ms;
  rep.rmse_f0_mean = rm;
  rep.rmse_f0_stderr = rs;
  rep.rtf_mean = tm;
  rep.ll_per_dim = ll_eval(model, cfg, ref_waves);
  rep.n_utterances = static_cast<int>(ref_paths.size());
  return rep;
}

}  // namespace flowvocoder
