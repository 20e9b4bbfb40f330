#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "flowvocoder/conditioning.hpp"
#include "flowvocoder/config.hpp"
#include "flowvocoder/flow.hpp"
#include "flowvocoder/rng.hpp"
#include "flowvocoder/wav.hpp"

namespace flowvocoder {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr double kGradClipNorm = 100.0;

// Step-halving schedule: lr0 * 0.5^floor(iter / anneal_every).
inline double lr_schedule(long iter, double lr0, long anneal_every) {
  if (iter < 0) throw ConfigError("lr_schedule: negative iteration");
  return lr0 * std::pow(0.5, static_cast<double>(iter / anneal_every));
}

struct Adam {
  std::map<std::string, Tensor> m1, m2;
  long t = 0;

  void ensure(const FlowModel& model) {
    for (const auto& [name, p] : model.params) {
      if (m1.find(name) == m1.end()) m1.emplace(name, Tensor(p.shape()));
      if (m2.find(name) == m2.end()) m2.emplace(name, Tensor(p.shape()));
    }
  }

  void step(FlowModel& model, const std::map<std::string, Tensor>& grads, double lr) {
    ensure(model);
    ++t;
    double sq = 0.0;
    for (const auto& [name, g] : grads)
      for (size_t i = 0; i < g.numel(); ++i) sq += g[i] * g[i];
    const double norm = std::sqrt(sq);
    const double gscale = norm > kGradClipNorm ? kGradClipNorm / norm : 1.0;
    const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(t));
    for (auto& [name, p] : model.params) {
      auto git = grads.find(name);
      if (git == grads.end()) throw ConfigError("adam: missing gradient for " + name);
      const Tensor& g = git->second;
      Tensor& m = m1.at(name);
      Tensor& v = m2.at(name);
      for (size_t i = 0; i < p.numel(); ++i) {
        const double gi = g[i] * gscale;
        m[i] = kAdamBeta1 * m[i] + (1.0 - kAdamBeta1) * gi;
        v[i] = kAdamBeta2 * v[i] + (1.0 - kAdamBeta2) * gi * gi;
        p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + kAdamEps);
      }
    }
  }
};

// ---- loss -------------------------------------------------------------------

// Per-dimension negative log-likelihood of one chunk on the tape:
// -(sum of per-element logdet + standard-normal log density) / n_valid.
// Samples past n_valid (zero padding) are masked out of the loss; the mask
// follows the same row permutations as the data.
inline ad::Tape::Id nll_chunk_t(ad::Tape& t, const FlowModel& m, const ParamIds& P,
                                const std::vector<double>& chunk, int n_valid,
                                const MelSpectrogram& mel) {
  const int n = static_cast<int>(chunk.size());
  if (n_valid <= 0 || n_valid > n) throw ConfigError("nll_chunk: bad n_valid");
  ad::Tape::Id cond = upsample_t(t, m, P, t.input(mel_plane(mel)));
  if (t.value(cond).extent(2) < n)
    throw ConfigError("nll_chunk: conditioner shorter than chunk");
  cond = t.crop_w(cond, n);
  ad::Tape::Id cond_grid = t.squeeze_rows(cond, m.cfg.squeeze_h);
  FlowReverseIds fr = flow_reverse_t(t, m, P, t.input(squeeze(chunk, m.cfg.squeeze_h)), cond_grid);
  ad::Tape::Id nll_map =
      t.add_const(t.scale(t.mul(fr.z, fr.z), 0.5), 0.5 * std::log(2.0 * M_PI));
  nll_map = t.add(nll_map, t.scale(fr.ld_map, -1.0));
  double denom = static_cast<double>(n);
  if (n_valid < n) {
    std::vector<double> valid(static_cast<size_t>(n), 0.0);
    std::fill(valid.begin(), valid.begin() + n_valid, 1.0);
    Tensor mask = squeeze(valid, m.cfg.squeeze_h);
    if (m.cfg.n_flows % 2 == 1) mask = reverse_rows_plain(mask);
    nll_map = t.mul(nll_map, t.input(mask));
    denom = static_cast<double>(n_valid);
  }
  return t.scale(t.sum(nll_map), 1.0 / denom);
}

struct BatchItem {
  std::vector<double> chunk;  // length chunk_len, zero padded past n_valid
  int n_valid = 0;
};

struct BatchGrads {
  double loss = 0.0;
  std::map<std::string, Tensor> grads;
};

// Mean per-dim NLL over the batch with gradients for every model parameter.
// Items run in parallel; the reduction is in batch order, so the result is
// identical for any thread count.
inline BatchGrads nll_loss(const FlowModel& model, const std::vector<BatchItem>& batch,
                           const MelConfig& mel_cfg, int threads = 1) {
  if (batch.empty()) throw InputError("nll_loss: empty batch");
  struct ItemOut {
    double loss = 0.0;
    std::map<std::string, Tensor> grads;
    std::exception_ptr err;
  };
  std::vector<ItemOut> outs(batch.size());
  auto run_item = [&](int b) {
    try {
      const BatchItem& item = batch[static_cast<size_t>(b)];
      MelSpectrogram mel = mel_extract(item.chunk, mel_cfg);
      ad::Tape tape;
      ParamIds P = register_params(tape, model, /*trainable=*/true);
      ad::Tape::Id loss = nll_chunk_t(tape, model, P, item.chunk, item.n_valid, mel);
      tape.backward(loss);
      ItemOut& o = outs[static_cast<size_t>(b)];
      o.loss = tape.scalar(loss);
      for (const auto& [name, id] : P.ids) o.grads.emplace(name, tape.grad(id));
    } catch (...) {
      outs[static_cast<size_t>(b)].err = std::current_exception();
    }
  };
  detail_flow::parallel_spans(static_cast<int>(batch.size()), threads, [&](int lo, int hi) {
    for (int b = lo; b < hi; ++b) run_item(b);
  });
  for (size_t b = 0; b < outs.size(); ++b)
    if (outs[b].err) {
      try {
        std::rethrow_exception(outs[b].err);
      } catch (const NumericError& e) {
        throw NumericError(e.where, "batch item " + std::to_string(b) + ": " + e.what());
      }
    }

  BatchGrads out;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const auto& [name, t] : model.params) out.grads.emplace(name, Tensor(t.shape()));
  for (size_t b = 0; b < outs.size(); ++b) {
    out.loss += outs[b].loss * inv;
    for (auto& [name, g] : outs[b].grads) {
      Tensor& acc = out.grads.at(name);
      for (size_t i = 0; i < acc.numel(); ++i) acc[i] += g[i] * inv;
    }
  }
  return out;
}

// ---- checkpoints --------------------------------------------------------------
// "FVOC" | u32 version | u32 entry count |
// entries { u16 name length, name, u8 rank, u32 dims..., f32 LE data } |
// u32 text length | UTF-8 key=value block (resolved config + iteration,
// adam_t and the RNG engine state, which have no float32 representation).

constexpr uint32_t kCheckpointVersion = 1;

namespace detail_ckpt {

inline void write_entry(std::ostream& os, const std::string& name, const Tensor& t) {
  if (name.size() > 0xffff) throw ConfigError("checkpoint: name too long");
  detail_io::put_u16(os, static_cast<uint16_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  os.put(static_cast<char>(t.rank()));
  for (int d = 0; d < t.rank(); ++d) detail_io::put_u32(os, static_cast<uint32_t>(t.extent(d)));
  for (size_t i = 0; i < t.numel(); ++i)
    detail_io::put_f32(os, static_cast<float>(t[i]));
}

inline std::pair<std::string, Tensor> read_entry(std::istream& is) {
  const uint16_t name_len = detail_io::get_u16(is);
  std::string name(name_len, '\0');
  is.read(name.data(), name_len);
  const int rank = is.get();
  if (!is || rank < 0 || rank > 8) throw InputError("checkpoint: bad entry rank");
  std::vector<int> shape(static_cast<size_t>(rank));
  for (int d = 0; d < rank; ++d) {
    const uint32_t e = detail_io::get_u32(is);
    if (e > (1u << 28)) throw InputError("checkpoint: implausible extent");
    shape[static_cast<size_t>(d)] = static_cast<int>(e);
  }
  Tensor t(shape);
  for (size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(detail_io::get_f32(is));
  if (!is) throw InputError("checkpoint: truncated entry");
  return {std::move(name), std::move(t)};
}

}  // namespace detail_ckpt

inline void save_checkpoint(const std::string& path, const Config& cfg, const FlowModel& model,
                            const Adam& adam, long iteration, const std::string& rng_state) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("save_checkpoint: cannot open " + path);
  os.write("FVOC", 4);
  detail_io::put_u32(os, kCheckpointVersion);
  const uint32_t n_entries =
      static_cast<uint32_t>(model.params.size() + adam.m1.size() + adam.m2.size());
  detail_io::put_u32(os, n_entries);
  for (const auto& [name, t] : model.params) detail_ckpt::write_entry(os, name, t);
  for (const auto& [name, t] : adam.m1) detail_ckpt::write_entry(os, "adam.m." + name, t);
  for (const auto& [name, t] : adam.m2) detail_ckpt::write_entry(os, "adam.v." + name, t);
  std::string text = cfg.resolved();
  text += "iteration=" + std::to_string(iteration) + "\n";
  text += "adam_t=" + std::to_string(adam.t) + "\n";
  text += "rng=" + rng_state + "\n";
  detail_io::put_u32(os, static_cast<uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!os) throw InputError("save_checkpoint: write failed for " + path);
}

struct CheckpointData {
  Config cfg;
  FlowModel model;
  Adam adam;
  long iteration = 0;
  std::string rng_state;
};

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("load_checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "FVOC", 4) != 0)
    throw InputError("load_checkpoint: bad magic in " + path);
  const uint32_t version = detail_io::get_u32(is);
  if (version != kCheckpointVersion) throw InputError("load_checkpoint: unsupported version");
  const uint32_t n_entries = detail_io::get_u32(is);
  if (n_entries > (1u << 20)) throw InputError("load_checkpoint: implausible entry count");
  std::map<std::string, Tensor> entries;
  for (uint32_t i = 0; i < n_entries; ++i) {
    auto [name, t] = detail_ckpt::read_entry(is);
    entries.emplace(std::move(name), std::move(t));
  }
  const uint32_t text_len = detail_io::get_u32(is);
  if (text_len > (1u << 24)) throw InputError("load_checkpoint: implausible text length");
  std::string text(text_len, '\0');
  is.read(text.data(), text_len);
  if (!is) throw InputError("load_checkpoint: truncated file");

  CheckpointData out;
  {
    std::istringstream ts(text);
    std::string line;
    std::string cfg_lines;
    int line_no = 0;
    while (std::getline(ts, line)) {
      ++line_no;
      if (line.rfind("iteration=", 0) == 0)
        out.iteration = std::stol(line.substr(10));
      else if (line.rfind("adam_t=", 0) == 0)
        out.adam.t = std::stol(line.substr(7));
      else if (line.rfind("rng=", 0) == 0)
        out.rng_state = line.substr(4);
      else
        Config::parse_line(out.cfg, line, line_no);
    }
    out.cfg.validate();
  }
  out.model = FlowModel::init(out.cfg.flow(), out.cfg.seed);
  for (auto& [name, t] : out.model.params) {
    auto it = entries.find(name);
    if (it == entries.end()) throw InputError("load_checkpoint: missing parameter " + name);
    if (!(it->second.shape() == t.shape()))
      throw InputError("load_checkpoint: shape mismatch for " + name);
    t = it->second;
  }
  out.adam.ensure(out.model);
  for (auto& [name, t] : out.adam.m1) {
    auto it = entries.find("adam.m." + name);
    if (it == entries.end()) throw InputError("load_checkpoint: missing moment adam.m." + name);
    t = it->second;
  }
  for (auto& [name, t] : out.adam.m2) {
    auto it = entries.find("adam.v." + name);
    if (it == entries.end()) throw InputError("load_checkpoint: missing moment adam.v." + name);
    t = it->second;
  }
  return out;
}

// ---- dataset ------------------------------------------------------------------

// 90/10 split by FNV-1a hash of the file name, so the split is stable across
// machines and directory orderings.
struct Dataset {
  std::vector<std::string> train_files;
  std::vector<std::string> test_files;

  static Dataset split(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw ConfigError("dataset: not a directory: " + dir);
    std::vector<std::string> all;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (!e.is_regular_file()) continue;
      std::string ext = e.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(),
                     [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
      if (ext == ".wav") all.push_back(e.path().string());
    }
    std::sort(all.begin(), all.end());
    Dataset d;
    for (const auto& p : all) {
      const std::string base = fs::path(p).filename().string();
      (fnv1a64(base) % 10 < 9 ? d.train_files : d.test_files).push_back(p);
    }
    return d;
  }
};

// ---- training loop ---------------------------------------------------------------

struct TrainOptions {
  std::string data_dir;
  std::string out_dir;
  std::string resume_path;
  int threads = 1;
  long checkpoint_interval = 500;
  std::ostream* log = &std::cerr;
};

struct TrainState {
  Config cfg;
  FlowModel model;
  Adam adam;
  long iteration = 0;
  Rng rng;
  double last_loss = 0.0;
  std::string final_checkpoint;
};

namespace detail_train {

inline std::string ckpt_name(const std::string& dir, long iter) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ckpt_%06ld.fvoc", iter);
  return (std::filesystem::path(dir) / buf).string();
}

// Draw one chunk: uniform utterance, uniform offset; shorter utterances are
// zero padded and masked. Unreadable files are skipped with a warning.
inline BatchItem draw_chunk(const std::vector<std::string>& files, int chunk_len, Rng& rng,
                            std::ostream* log) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    const std::string& path = files[rng.uniform_int(files.size())];
    WavData wav;
    try {
      wav = read_wav(path);
    } catch (const InputError& e) {
      if (log) *log << "warning: skipping " << path << " (" << e.what() << ")\n";
      continue;
    }
    std::vector<double> y = normalize_audio(wav.samples);
    BatchItem item;
    item.chunk.assign(static_cast<size_t>(chunk_len), 0.0);
    if (static_cast<int>(y.size()) >= chunk_len) {
      const size_t off = rng.uniform_int(y.size() - static_cast<size_t>(chunk_len) + 1);
      std::copy(y.begin() + static_cast<long>(off),
                y.begin() + static_cast<long>(off) + chunk_len, item.chunk.begin());
      item.n_valid = chunk_len;
    } else {
      std::copy(y.begin(), y.end(), item.chunk.begin());
      item.n_valid = std::max<int>(1, static_cast<int>(y.size()));
    }
    return item;
  }
  throw InputError("train: no readable WAV file after 64 attempts");
}

}  // namespace detail_train

// Maximum-likelihood training. Deterministic for a fixed seed and dataset:
// all RNG draws happen on the main thread in a fixed order, and batch items
// reduce in batch order regardless of thread count.
inline TrainState train(const Config& cfg, const TrainOptions& opt) {
  namespace fs = std::filesystem;
  cfg.validate();
  Dataset data = Dataset::split(opt.data_dir);
  if (data.train_files.empty()) throw ConfigError("train: no training WAV files in " + opt.data_dir);
  fs::create_directories(opt.out_dir);

  TrainState st;
  if (!opt.resume_path.empty()) {
    // The checkpoint's config is authoritative (it shaped the weights) except
    // for the training horizon, which belongs to the invoking run.
    CheckpointData ck = load_checkpoint(opt.resume_path);
    st.cfg = ck.cfg;
    st.cfg.max_iters = cfg.max_iters;
    st.model = std::move(ck.model);
    st.adam = std::move(ck.adam);
    st.iteration = ck.iteration;
    st.rng.load_state(ck.rng_state);
  } else {
    st.cfg = cfg;
    st.model = FlowModel::init(cfg.flow(), cfg.seed);
    st.rng = Rng(cfg.seed);
  }
  st.adam.ensure(st.model);
  const MelConfig mel_cfg = st.cfg.mel();

  if (opt.log) *opt.log << "train: resolved config\n" << st.cfg.resolved();

  const std::string metrics_path = (fs::path(opt.out_dir) / "metrics.csv").string();
  const bool continuing =
      st.iteration > 0 && fs::exists(metrics_path) && fs::file_size(metrics_path) > 0;
  std::ofstream metrics(metrics_path, continuing ? std::ios::app : std::ios::trunc);
  if (!metrics) throw InputError("train: cannot open " + metrics_path);
  if (!continuing) metrics << "iter,loss,lr,wall_ms\n";

  while (st.iteration < st.cfg.max_iters) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_schedule(st.iteration, st.cfg.lr0, st.cfg.anneal_every);
    std::vector<BatchItem> batch;
    batch.reserve(static_cast<size_t>(st.cfg.batch));
    for (int b = 0; b < st.cfg.batch; ++b)
      batch.push_back(detail_train::draw_chunk(data.train_files, st.cfg.chunk_len, st.rng, opt.log));

    BatchGrads bg;
    try {
      bg = nll_loss(st.model, batch, mel_cfg, opt.threads);
    } catch (const NumericError& e) {
      const std::string diag = (fs::path(opt.out_dir) / "ckpt_diagnostic.fvoc").string();
      save_checkpoint(diag, st.cfg, st.model, st.adam, st.iteration, st.rng.save_state());
      throw NumericError(e.where,
                         std::string(e.what()) + " (diagnostic checkpoint: " + diag + ")");
    }
    st.adam.step(st.model, bg.grads, lr);
    st.last_loss = bg.loss;
    ++st.iteration;

    const double wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    char line[128];
    std::snprintf(line, sizeof(line), "%ld,%.17g,%.17g,%.3f\n", st.iteration - 1, bg.loss, lr,
                  wall_ms);
    metrics << line;
    metrics.flush();

    if (st.iteration % opt.checkpoint_interval == 0 && st.iteration < st.cfg.max_iters)
      save_checkpoint(detail_train::ckpt_name(opt.out_dir, st.iteration), st.cfg, st.model,
                      st.adam, st.iteration, st.rng.save_state());
  }

  st.final_checkpoint = (fs::path(opt.out_dir) / "ckpt_final.fvoc").string();
  save_checkpoint(st.final_checkpoint, st.cfg, st.model, st.adam, st.iteration,
                  st.rng.save_state());
  return st;
}

}  // namespace flowvocoder
