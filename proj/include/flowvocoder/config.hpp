#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "flowvocoder/conditioning.hpp"
#include "flowvocoder/errors.hpp"
#include "flowvocoder/flow.hpp"

namespace flowvocoder {

// Line-based key=value configuration, '#' comments. Unknown keys are rejected,
// every run logs the fully resolved form.
struct Config {
  int sample_rate = 22050;
  int n_mels = 80;
  int fft = 1024;
  int hop = 256;
  int win = 1024;
  int squeeze_h = 16;
  int n_flows = 8;
  int n_mix = 4;
  int channels = 32;
  int n_layers = 4;
  int emb_dim = 64;
  int cond_channels = 32;
  double lr0 = 2e-4;
  int anneal_every = 2000;
  int batch = 2;
  int chunk_len = 4000;
  int max_iters = 3000;
  uint64_t seed = 1;
  double inverse_tol = 1e-8;

  void set(const std::string& key, const std::string& value) {
    auto as_int = [&](int& dst) {
      size_t pos = 0;
      dst = std::stoi(value, &pos);
      if (pos != value.size()) throw ConfigError("config: bad integer for " + key);
    };
    auto as_double = [&](double& dst) {
      size_t pos = 0;
      dst = std::stod(value, &pos);
      if (pos != value.size()) throw ConfigError("config: bad number for " + key);
    };
    if (key == "sample_rate") as_int(sample_rate);
    else if (key == "n_mels") as_int(n_mels);
    else if (key == "fft") as_int(fft);
    else if (key == "hop") as_int(hop);
    else if (key == "win") as_int(win);
    else if (key == "squeeze_h") as_int(squeeze_h);
    else if (key == "n_flows") as_int(n_flows);
    else if (key == "n_mix") as_int(n_mix);
    else if (key == "channels") as_int(channels);
    else if (key == "n_layers") as_int(n_layers);
    else if (key == "emb_dim") as_int(emb_dim);
    else if (key == "cond_channels") as_int(cond_channels);
    else if (key == "lr0") as_double(lr0);
    else if (key == "anneal_every") as_int(anneal_every);
    else if (key == "batch") as_int(batch);
    else if (key == "chunk_len") as_int(chunk_len);
    else if (key == "max_iters") as_int(max_iters);
    else if (key == "seed") seed = std::stoull(value);
    else if (key == "inverse_tol") as_double(inverse_tol);
    else throw ConfigError("config: unknown key '" + key + "'");
  }

  void validate() const {
    if (squeeze_h <= 0 || chunk_len <= 0 || chunk_len % squeeze_h != 0)
      throw ConfigError("config: chunk_len must be a positive multiple of squeeze_h");
    if (n_flows <= 0 || n_mix <= 0 || channels <= 0 || n_layers <= 0 || emb_dim <= 0 ||
        cond_channels <= 0 || n_mels <= 0)
      throw ConfigError("config: model dimensions must be positive");
    if (batch <= 0 || max_iters < 0 || anneal_every <= 0 || !(lr0 > 0.0))
      throw ConfigError("config: training settings must be positive");
    if (!(inverse_tol > 0.0)) throw ConfigError("config: inverse_tol must be positive");
    if (fft <= 0 || (fft & (fft - 1)) != 0) throw ConfigError("config: fft must be a power of two");
    if (win <= 0 || win > fft || hop <= 0) throw ConfigError("config: bad stft geometry");
  }

  static void parse_line(Config& cfg, const std::string& raw, int line_no) {
    std::string line = raw;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const char* ws = " \t\r\n";
      const size_t b = s.find_first_not_of(ws);
      if (b == std::string::npos) return std::string();
      const size_t e = s.find_last_not_of(ws);
      return s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) return;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(line_no) + " has no '='");
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }

  static Config load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    Config cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) parse_line(cfg, line, ++line_no);
    cfg.validate();
    return cfg;
  }

  static Config from_string(const std::string& text) {
    Config cfg;
    std::istringstream is(text);
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) parse_line(cfg, line, ++line_no);
    cfg.validate();
    return cfg;
  }

  std::string resolved() const {
    std::ostringstream os;
    os << "sample_rate=" << sample_rate << "\n"
       << "n_mels=" << n_mels << "\n"
       << "fft=" << fft << "\n"
       << "hop=" << hop << "\n"
       << "win=" << win << "\n"
       << "squeeze_h=" << squeeze_h << "\n"
       << "n_flows=" << n_flows << "\n"
       << "n_mix=" << n_mix << "\n"
       << "channels=" << channels << "\n"
       << "n_layers=" << n_layers << "\n"
       << "emb_dim=" << emb_dim << "\n"
       << "cond_channels=" << cond_channels << "\n";
    os.precision(17);
    os << "lr0=" << lr0 << "\n"
       << "anneal_every=" << anneal_every << "\n"
       << "batch=" << batch << "\n"
       << "chunk_len=" << chunk_len << "\n"
       << "max_iters=" << max_iters << "\n"
       << "seed=" << seed << "\n"
       << "inverse_tol=" << inverse_tol << "\n";
    return os.str();
  }

  FlowConfig flow() const {
    FlowConfig f;
    f.n_flows = n_flows;
    f.squeeze_h = squeeze_h;
    f.n_mix = n_mix;
    f.channels = channels;
    f.n_layers = n_layers;
    f.emb_dim = emb_dim;
    f.cond_channels = cond_channels;
    f.n_mels = n_mels;
    return f;
  }

  MelConfig mel() const {
    MelConfig m;
    m.sample_rate = sample_rate;
    m.n_mels = n_mels;
    m.n_fft = fft;
    m.hop = hop;
    m.win = win;
    return m;
  }
};

}  // namespace flowvocoder
