// FlowVocoder command line: feature extraction, training, synthesis,
// evaluation and self-check.
//
// Exit codes: 0 success, 1 check/verification or numeric failure,
// 2 usage/config/input error.

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "flowvocoder/check.hpp"
#include "flowvocoder/conditioning.hpp"
#include "flowvocoder/config.hpp"
#include "flowvocoder/metrics.hpp"
#include "flowvocoder/synthesis.hpp"
#include "flowvocoder/training.hpp"
#include "flowvocoder/wav.hpp"

namespace fs = std::filesystem;
using namespace flowvocoder;

namespace {

int default_threads() {
  const unsigned hc = std::thread::hardware_concurrency();
  return hc > 0 ? static_cast<int>(hc) : 1;
}

Config load_config_opt(const std::string& path) {
  Config cfg;
  if (!path.empty()) cfg = Config::load(path);
  cfg.validate();
  return cfg;
}

std::vector<std::string> list_wavs(const std::string& dir) {
  if (!fs::is_directory(dir)) throw InputError("not a directory: " + dir);
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (ext == ".wav") out.push_back(e.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

int cmd_extract_mels(const std::string& in_dir, const std::string& out_dir,
                     const std::string& config_path) {
  const Config cfg = load_config_opt(config_path);
  std::cerr << "resolved config\n" << cfg.resolved();
  const std::vector<std::string> wavs = list_wavs(in_dir);
  fs::create_directories(out_dir);
  int ok = 0, failed = 0;
  for (const auto& path : wavs) {
    try {
      const WavData wav = read_wav(path);
      if (wav.sample_rate != cfg.sample_rate)
        throw InputError("sample rate " + std::to_string(wav.sample_rate) + " != config " +
                         std::to_string(cfg.sample_rate));
      const MelSpectrogram mel = mel_extract(normalize_audio(wav.samples), cfg.mel());
      const std::string out =
          (fs::path(out_dir) / fs::path(path).stem()).string() + ".fvml";
      write_fvml(out, mel);
      ++ok;
    } catch (const std::exception& e) {
      std::cerr << "warning: skipping " << path << " (" << e.what() << ")\n";
      ++failed;
    }
  }
  std::cerr << "extract-mels: " << ok << " written, " << failed << " skipped\n";
  if (!wavs.empty() && ok == 0) {
    std::cerr << "error: every input failed\n";
    return 2;
  }
  return 0;
}

int cmd_train(const std::string& data_dir, const std::string& out_dir,
              const std::string& config_path, const std::string& resume, int threads) {
  const Config cfg = load_config_opt(config_path);
  TrainOptions opt;
  opt.data_dir = data_dir;
  opt.out_dir = out_dir;
  opt.resume_path = resume;
  opt.threads = threads;
  const TrainState st = train(cfg, opt);
  std::cerr << "train: finished at iteration " << st.iteration << ", loss " << st.last_loss
            << "\n";
  std::cout << st.final_checkpoint << "\n";
  return 0;
}

int cmd_synthesize(const std::string& ckpt_path, const std::string& mel_path,
                   const std::string& wav_path, const std::string& out_path, double temperature,
                   uint64_t seed, bool seed_given, int threads) {
  const CheckpointData ck = load_checkpoint(ckpt_path);
  std::cerr << "resolved config\n" << ck.cfg.resolved();
  MelSpectrogram mel;
  if (!mel_path.empty()) {
    mel = read_fvml(mel_path, ck.cfg.sample_rate, ck.cfg.hop);
  } else {
    const WavData wav = read_wav(wav_path);
    if (wav.sample_rate != ck.cfg.sample_rate)
      throw InputError("reference sample rate does not match the model");
    mel = mel_extract(normalize_audio(wav.samples), ck.cfg.mel());
  }
  SynthesisRequest req;
  req.temperature = temperature;
  req.seed = seed_given ? seed : ck.cfg.seed;
  req.tol = ck.cfg.inverse_tol;
  req.threads = threads;
  const SynthesisResult r = synthesize(ck.model, mel, req);
  write_wav(out_path, r.pcm, r.sample_rate);
  write_timing_csv(std::cout, r);
  std::cerr << "synthesize: " << r.pcm.size() << " samples, RTF "
            << rtf(r.total_ms / 1000.0, r.duration_s()) << "\n";
  return 0;
}

int cmd_evaluate(const std::string& ckpt_path, const std::string& ref_dir, int n, int threads) {
  if (n <= 0) throw ConfigError("evaluate: --n must be positive");
  const CheckpointData ck = load_checkpoint(ckpt_path);
  std::cerr << "resolved config\n" << ck.cfg.resolved();
  std::vector<std::string> wavs = list_wavs(ref_dir);
  if (wavs.empty()) throw InputError("evaluate: no WAV files in " + ref_dir);
  // seeded draw without replacement
  Rng rng(ck.cfg.seed);
  const int take = std::min<int>(n, static_cast<int>(wavs.size()));
  for (int i = 0; i < take; ++i) {
    const size_t j = static_cast<size_t>(i) + rng.uniform_int(wavs.size() - static_cast<size_t>(i));
    std::swap(wavs[static_cast<size_t>(i)], wavs[j]);
  }
  wavs.resize(static_cast<size_t>(take));
  const EvalReport rep =
      evaluate_utterances(ck.model, ck.cfg, wavs, threads, &std::cout, &std::cerr);
  rep.to_csv(std::cout);
  std::cout << "\n";
  rep.to_summary(std::cout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FlowVocoder: mixture-of-logistic-CDF autoregressive flow vocoder"};
  app.require_subcommand(1);
  int threads = default_threads();
  app.add_option("--threads", threads, "worker thread cap")->capture_default_str();

  auto* extract = app.add_subcommand("extract-mels", "extract FVML mel caches from WAVs");
  std::string ex_in, ex_out, ex_cfg;
  extract->add_option("--in", ex_in, "input WAV directory")->required();
  extract->add_option("--out", ex_out, "output directory")->required();
  extract->add_option("--config", ex_cfg, "config file");

  auto* tr = app.add_subcommand("train", "maximum-likelihood training");
  std::string tr_data, tr_out, tr_cfg, tr_resume;
  tr->add_option("--data", tr_data, "WAV dataset directory")->required();
  tr->add_option("--out", tr_out, "checkpoint/metrics directory")->required();
  tr->add_option("--config", tr_cfg, "config file");
  tr->add_option("--resume", tr_resume, "checkpoint to resume from");

  auto* syn = app.add_subcommand("synthesize", "generate audio from a mel conditioner");
  std::string sy_ckpt, sy_mel, sy_wav, sy_out;
  double sy_temp = 1.0;
  uint64_t sy_seed = 0;
  syn->add_option("--ckpt", sy_ckpt, "model checkpoint")->required();
  auto* mel_opt = syn->add_option("--mel", sy_mel, "FVML mel file");
  auto* wav_opt = syn->add_option("--wav", sy_wav, "reference WAV (analysis-synthesis)");
  mel_opt->excludes(wav_opt);
  syn->add_option("--out", sy_out, "output WAV path")->required();
  syn->add_option("--temperature", sy_temp, "noise sigma")->capture_default_str();
  auto* seed_opt = syn->add_option("--seed", sy_seed, "noise seed (default: config seed)");

  auto* ev = app.add_subcommand("evaluate", "objective evaluation on reference utterances");
  std::string ev_ckpt, ev_dir;
  int ev_n = 100;
  ev->add_option("--ckpt", ev_ckpt, "model checkpoint")->required();
  ev->add_option("--ref-dir", ev_dir, "reference WAV directory")->required();
  ev->add_option("--n", ev_n, "utterance count")->capture_default_str();

  auto* chk = app.add_subcommand("check", "run the invariant suite");
  std::string chk_fault;
  chk->add_option("--inject-fault", chk_fault, "test fixture: logdet-sign")
      ->group("");  // hidden

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*extract) return cmd_extract_mels(ex_in, ex_out, ex_cfg);
    if (*tr) return cmd_train(tr_data, tr_out, tr_cfg, tr_resume, threads);
    if (*syn) {
      if (sy_mel.empty() && sy_wav.empty())
        throw ConfigError("synthesize: one of --mel or --wav is required");
      return cmd_synthesize(sy_ckpt, sy_mel, sy_wav, sy_out, sy_temp, sy_seed,
                            seed_opt->count() > 0, threads);
    }
    if (*ev) return cmd_evaluate(ev_ckpt, ev_dir, ev_n, threads);
    if (*chk) {
      const bool ok = run_self_check(std::cout, parse_fault(chk_fault), threads);
      return ok ? 0 : 1;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
