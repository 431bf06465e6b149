#pragma once

// Synthetic stylized-trajectory corpus. Each sequence is a closed-form content
// program (line, arc, zigzag) on the trajectory channels composed with a style
// transform (offset + amplitude/frequency-modulated sinusoid) on the posture
// channels. Every style owns M sub-style modes occupying disjoint intervals of
// the style-parameter space; sub-style labels are hidden from training.

#include "protostyle/core.hpp"
#include "protostyle/params.hpp"

#include <algorithm>
#include <array>
#include <filesystem>
#include <map>
#include <numbers>
#include <string>
#include <vector>

namespace protostyle {

struct CorpusConfig {
  int contents = 3;     // C
  int styles = 4;       // S
  int substyles = 3;    // M
  int n_per_cell = 10;  // sequences per (content, style, substyle)
  int length = 64;      // L
  int channels = 8;     // D
  int window = 8;       // w; L is padded/truncated to a multiple of it
  double noise_level = 0.01;
  std::uint64_t seed = 7;

  void validate() const {
    if (contents < 1) throw ConfigError("contents", "must be >= 1");
    if (styles < 1) throw ConfigError("styles", "must be >= 1");
    if (substyles < 1) throw ConfigError("substyles", "must be >= 1");
    if (n_per_cell < 1) throw ConfigError("n_per_cell", "must be >= 1");
    if (length < 1) throw ConfigError("length", "must be >= 1");
    if (channels < 1) throw ConfigError("channels", "must be >= 1");
    if (window < 1) throw ConfigError("window", "must be >= 1");
    if (!(noise_level >= 0.0) || !std::isfinite(noise_level)) throw ConfigError("noise_level", "must be finite and >= 0");
  }

  // Generated length: L rounded to the nearest positive multiple of w.
  int effective_length() const {
    const int k = std::max(1, (length + window / 2) / window);
    return k * window;
  }

  size_t total() const {
    return static_cast<size_t>(contents) * styles * substyles * n_per_cell;
  }
};

struct MotionSequence {
  Matrix frames;  // L x D
  int content_id = 0;
  int style_id = 0;
  int substyle_id = 0;  // hidden; evaluation only
  std::uint64_t seed = 0;
  int cell_index = 0;  // index within its (style, substyle, content) cell

  Index length() const { return frames.rows(); }
  Index channels() const { return frames.cols(); }
};

struct Corpus {
  CorpusConfig config;
  std::vector<MotionSequence> items;
};

// Style-transform parameters drawn for one sequence.
struct StyleDraw {
  double amplitude = 1.0;  // multiplier on the style's base amplitude
  double frequency = 1.0;  // cycles per sequence
  double shift = 0.0;      // magnitude of the sub-style offset shift
};

// Disjoint per-sub-style interval [lo, hi] for each drawn parameter.
struct SubstyleCell {
  std::array<double, 2> amplitude{};
  std::array<double, 2> frequency{};
  std::array<double, 2> shift{};

  bool contains(const StyleDraw& d) const {
    auto in = [](double x, const std::array<double, 2>& r) { return x >= r[0] && x <= r[1]; };
    return in(d.amplitude, amplitude) && in(d.frequency, frequency) && in(d.shift, shift);
  }
};

namespace corpus_detail {

constexpr double kPi = std::numbers::pi;
constexpr int kTrajectoryChannels = 2;
constexpr double kTrajectoryScale = 0.5;
constexpr double kBaseAmplitude = 0.45;
constexpr double kStyleOffset = 0.7;

inline int trajectory_channels(int D) { return D >= 3 ? kTrajectoryChannels : 0; }

inline double base_frequency(int style) { return 1.0 + 0.75 * style; }

// Style offset pattern over posture channels: a DCT-like basis vector per style.
inline double style_offset(int style, int j, int P) {
  return kStyleOffset * std::cos(kPi * (style + 1) * (j + 0.5) / std::max(P, 1));
}

// Direction of the sub-style offset shift.
inline double substyle_direction(int style, int substyle, int j, int P) {
  return std::sin(kPi * (substyle + 1) * (j + 0.5) / std::max(P, 1) + 0.9 * style);
}

inline double triangle(double x) {
  const double f = x - std::floor(x);
  return f < 0.5 ? 4.0 * f - 1.0 : 3.0 - 4.0 * f;
}

}  // namespace corpus_detail

inline SubstyleCell substyle_cell(int style, int substyle) {
  (void)style;
  SubstyleCell c;
  const double m = substyle;
  c.amplitude = {0.5 + 0.6 * m, 0.5 + 0.6 * m + 0.15};
  c.frequency = {1.0 + 0.12 * m, 1.0 + 0.12 * m + 0.04};
  c.shift = {0.55, 0.65};  // sub-styles differ in shift direction, not magnitude
  return c;
}

inline StyleDraw draw_style(int style, int substyle, Rng& rng) {
  const SubstyleCell cell = substyle_cell(style, substyle);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto pick = [&](const std::array<double, 2>& r) { return r[0] + (r[1] - r[0]) * u(rng); };
  StyleDraw d;
  d.amplitude = pick(cell.amplitude);
  d.frequency = corpus_detail::base_frequency(style) * pick(cell.frequency);
  d.shift = pick(cell.shift);
  return d;
}

// Clean trajectory of content program `content` (L x 2), with a speed factor.
inline Matrix content_trajectory(int content, int L, double speed = 1.0) {
  using namespace corpus_detail;
  const int program = content % 3;
  const int variant = content / 3;
  const double amp = kTrajectoryScale * speed * (1.0 + 0.3 * variant) * (variant % 2 == 0 ? 1.0 : -1.0);
  Matrix traj(L, 2);
  for (int i = 0; i < L; ++i) {
    const double u = L > 1 ? static_cast<double>(i) / (L - 1) : 0.0;
    double x = 0.0;
    double y = 0.0;
    switch (program) {
      case 0:  // straight line
        x = amp * (2.0 * u - 1.0);
        y = 0.4 * amp * (2.0 * u - 1.0);
        break;
      case 1:  // circle arc
        x = -amp * std::cos(kPi * u);
        y = amp * (std::sin(kPi * u) - 2.0 / kPi);
        break;
      default:  // zigzag
        x = amp * (2.0 * u - 1.0);
        y = 0.6 * amp * triangle(2.0 * u + 0.25);
        break;
    }
    traj(i, 0) = x;
    traj(i, 1) = y;
  }
  return traj;
}

// Deterministic sequence synthesis from its labels and private seed.
inline Matrix synthesize_frames(const CorpusConfig& cfg, int content, int style, int substyle, std::uint64_t seed) {
  using namespace corpus_detail;
  const int L = cfg.effective_length();
  const int D = cfg.channels;
  const int nt = trajectory_channels(D);
  const int P = D - nt;
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double speed = 0.9 + 0.2 * u(rng);
  const StyleDraw draw = draw_style(style, substyle, rng);

  Matrix frames = Matrix::Zero(L, D);
  const Matrix traj = content_trajectory(content, L, speed);
  for (int i = 0; i < L; ++i) {
    const double tt = L > 1 ? static_cast<double>(i) / (L - 1) : 0.0;
    for (int c = 0; c < nt; ++c) frames(i, c) = traj(i, c);
    for (int j = 0; j < P; ++j) {
      const double phase = 2.0 * kPi * j / std::max(P, 1);
      double v = style_offset(style, j, P) + draw.shift * substyle_direction(style, substyle, j, P) +
                 kBaseAmplitude * draw.amplitude * std::sin(2.0 * kPi * draw.frequency * tt + phase);
      if (nt == 0) v += traj(i, j % 2);  // too few channels: content rides on posture
      frames(i, nt + j) = v;
    }
  }
  if (cfg.noise_level > 0.0) frames += randn(L, D, rng, cfg.noise_level);
  return frames;
}

inline std::vector<MotionSequence> generate_corpus(const CorpusConfig& cfg) {
  cfg.validate();
  std::vector<MotionSequence> out;
  out.reserve(cfg.total());
  std::uint64_t index = 0;
  for (int s = 0; s < cfg.styles; ++s)
    for (int m = 0; m < cfg.substyles; ++m)
      for (int c = 0; c < cfg.contents; ++c)
        for (int k = 0; k < cfg.n_per_cell; ++k) {
          MotionSequence seq;
          seq.content_id = c;
          seq.style_id = s;
          seq.substyle_id = m;
          seq.cell_index = k;
          seq.seed = mix_seed(cfg.seed, index++);
          seq.frames = synthesize_frames(cfg, c, s, m, seq.seed);
          round_to_f32(seq.frames);  // stored precision
          out.push_back(std::move(seq));
        }
  return out;
}

// Stratified per (style, substyle) cell; each cell is shuffled with a seed
// derived from `seed` and its first round(ratio * n) members go to train.
inline std::pair<std::vector<MotionSequence>, std::vector<MotionSequence>> split_corpus(
    const std::vector<MotionSequence>& corpus, double ratio, std::uint64_t seed = 0) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("ratio", "split ratio must lie in (0, 1)");
  std::map<std::pair<int, int>, std::vector<size_t>> cells;
  for (size_t i = 0; i < corpus.size(); ++i) cells[{corpus[i].style_id, corpus[i].substyle_id}].push_back(i);
  std::vector<size_t> train_idx;
  std::vector<size_t> eval_idx;
  for (auto& [key, members] : cells) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(key.first) * 1000003ULL + static_cast<std::uint64_t>(key.second)));
    std::shuffle(members.begin(), members.end(), rng);
    const auto n_train = static_cast<size_t>(std::lround(ratio * static_cast<double>(members.size())));
    for (size_t i = 0; i < members.size(); ++i) (i < n_train ? train_idx : eval_idx).push_back(members[i]);
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(eval_idx.begin(), eval_idx.end());
  std::vector<MotionSequence> train;
  std::vector<MotionSequence> eval;
  for (size_t i : train_idx) train.push_back(corpus[i]);
  for (size_t i : eval_idx) eval.push_back(corpus[i]);
  return {std::move(train), std::move(eval)};
}

// ---- serialization ---------------------------------------------------------------

inline std::string sequence_filename(const MotionSequence& s) {
  return std::to_string(s.style_id) + "_" + std::to_string(s.substyle_id) + "_" + std::to_string(s.content_id) + "_" +
         std::to_string(s.cell_index) + ".f32";
}

inline json corpus_config_json(const CorpusConfig& c) {
  return json{{"contents", c.contents}, {"styles", c.styles},   {"substyles", c.substyles},
              {"n_per_cell", c.n_per_cell}, {"length", c.length}, {"channels", c.channels},
              {"window", c.window},     {"noise_level", c.noise_level}, {"seed", c.seed}};
}

inline CorpusConfig corpus_config_from_json(const json& j) {
  CorpusConfig c;
  c.contents = j.at("contents").get<int>();
  c.styles = j.at("styles").get<int>();
  c.substyles = j.at("substyles").get<int>();
  c.n_per_cell = j.at("n_per_cell").get<int>();
  c.length = j.at("length").get<int>();
  c.channels = j.at("channels").get<int>();
  c.window = j.at("window").get<int>();
  c.noise_level = j.at("noise_level").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

// `run` (when not null) is stored under the manifest's "run" key.
inline void save_corpus(const std::filesystem::path& dir, const CorpusConfig& cfg, const std::vector<MotionSequence>& items,
                        const json& run = json()) {
  std::filesystem::create_directories(dir);
  json entries = json::array();
  for (const auto& s : items) {
    write_sequence_file(dir / sequence_filename(s), s.frames);
    entries.push_back({{"file", sequence_filename(s)},
                       {"style", s.style_id},
                       {"substyle", s.substyle_id},
                       {"content", s.content_id},
                       {"index", s.cell_index},
                       {"seed", s.seed}});
  }
  json labels = {{"content_programs", json::array()}, {"styles", json::array()}};
  static const char* kPrograms[] = {"line", "arc", "zigzag"};
  for (int c = 0; c < cfg.contents; ++c)
    labels["content_programs"].push_back(std::string(kPrograms[c % 3]) + (c >= 3 ? "_v" + std::to_string(c / 3) : ""));
  for (int s = 0; s < cfg.styles; ++s) labels["styles"].push_back("style_" + std::to_string(s));
  json manifest = {{"format", "protostyle-corpus/1"},
                   {"config", corpus_config_json(cfg)},
                   {"count", items.size()},
                   {"length", cfg.effective_length()},
                   {"channels", cfg.channels},
                   {"seed", cfg.seed},
                   {"labels", labels},
                   {"sequences", entries}};
  if (!run.is_null()) manifest["run"] = run;
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << "\n";
  if (!os) throw IoError("cannot write corpus manifest in " + dir.string());
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("missing corpus manifest in " + dir.string());
  const json manifest = json::parse(is);
  Corpus corpus;
  corpus.config = corpus_config_from_json(manifest.at("config"));
  const int L = manifest.at("length").get<int>();
  const int D = manifest.at("channels").get<int>();
  for (const auto& e : manifest.at("sequences")) {
    MotionSequence s;
    s.style_id = e.at("style").get<int>();
    s.substyle_id = e.at("substyle").get<int>();
    s.content_id = e.at("content").get<int>();
    s.cell_index = e.at("index").get<int>();
    s.seed = e.at("seed").get<std::uint64_t>();
    s.frames = read_sequence_file(dir / e.at("file").get<std::string>(), L, D);
    corpus.items.push_back(std::move(s));
  }
  return corpus;
}

}  // namespace protostyle
