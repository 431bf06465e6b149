#pragma once

// Experiment orchestration behind the CLI: one function per subcommand, each
// reading a Config and writing its outputs plus a run manifest.
//
// Output locations: gen-data writes the corpus to `data`; the training stages
// write their checkpoint to `codec`, `base` or `model` and the run manifest
// beside it; sample, transfer, eval and inspect-prototypes write into `out`.

#include "protostyle/config.hpp"
#include "protostyle/guidance.hpp"
#include "protostyle/metrics.hpp"
#include "protostyle/parallel.hpp"
#include "protostyle/style_training.hpp"

#include <algorithm>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

namespace protostyle {

namespace fs = std::filesystem;

inline const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names = {"gen-data", "train-codec", "pretrain-base", "train-style",
                                                 "sample",   "transfer",    "eval",          "inspect-prototypes"};
  return names;
}

inline std::string subcommand_summary(const std::string& cmd) {
  static const std::map<std::string, std::string> text = {
      {"gen-data", "generate the synthetic motion corpus"},
      {"train-codec", "train the latent codec"},
      {"pretrain-base", "pretrain the content-conditioned denoiser"},
      {"train-style", "train the style encoder, adapter style branch and prototypes"},
      {"sample", "generate sequences (reference- or prototype-guided)"},
      {"transfer", "transfer the style of one sequence onto another"},
      {"eval", "score a trained model (read-only)"},
      {"inspect-prototypes", "dump prototype usage and nearest exemplars"},
  };
  return text.at(cmd);
}

inline std::string default_out(const std::string& cmd) {
  if (cmd == "sample") return "samples";
  if (cmd == "transfer") return "transfer";
  if (cmd == "eval") return "eval";
  if (cmd == "inspect-prototypes") return "inspect";
  return "";
}

inline bool is_path_key(const std::string& k) {
  static const std::set<std::string> paths = {"data", "out", "codec", "base", "model", "reference", "content_seq", "style_seq"};
  return paths.count(k) > 0;
}

// Configuration without file locations, as recorded in checkpoint sidecars so
// a checkpoint's bytes do not depend on where it was written.
inline json portable_config(const Config& cfg) {
  const json all = cfg.to_json();
  json out = json::object();
  for (const auto& [k, v] : all.items())
    if (!is_path_key(k)) out[k] = v;
  return out;
}

// ---- config mapping ---------------------------------------------------------

inline CorpusConfig corpus_config(const Config& c) {
  CorpusConfig cc;
  cc.contents = c.integer("contents");
  cc.styles = c.integer("styles");
  cc.substyles = c.integer("substyles");
  cc.n_per_cell = c.integer("n_per_cell");
  cc.length = c.integer("length");
  cc.channels = c.integer("channels");
  cc.window = c.integer("window");
  cc.noise_level = c.real("noise_level");
  cc.seed = c.u64("seed");
  cc.validate();
  return cc;
}

inline CodecTrainConfig codec_train_config(const Config& c) {
  CodecTrainConfig tc;
  tc.kl_weight = c.real("kl_weight");
  tc.lr = c.real("codec_lr");
  tc.steps = c.integer("codec_steps");
  tc.batch = c.integer("codec_batch");
  tc.seed = c.u64("seed");
  tc.validate();
  return tc;
}

inline EncoderConfig encoder_config(const Config& c, int channels, int window) {
  EncoderConfig e;
  e.in_channels = channels;
  e.width = c.integer("encoder_width");
  e.layers = c.integer("encoder_layers");
  e.mlp_hidden = c.integer("encoder_mlp_hidden");
  e.window = window;
  e.temporal_mixing = c.boolean("temporal_mixing");
  e.validate();
  return e;
}

inline BaseTrainConfig base_train_config(const Config& c) {
  BaseTrainConfig tc;
  tc.steps = c.integer("base_steps");
  tc.batch = c.integer("batch");
  tc.lr = c.real("base_lr");
  tc.cond_drop_prob = c.real("cond_drop_prob");
  tc.seed = c.u64("seed");
  tc.validate();
  return tc;
}

inline StyleTrainConfig style_train_config(const Config& c) {
  StyleTrainConfig tc;
  tc.iterations = c.integer("style_iterations");
  tc.batch = c.integer("style_batch");
  tc.lr = c.real("style_lr");
  tc.lambda_style = c.real("lambda_style");
  tc.cond_drop_prob = c.real("cond_drop_prob");
  tc.freeze_fraction = c.real("freeze_fraction");
  tc.memory = c.integer("memory");
  tc.k_global = c.integer("k_global");
  tc.k_local = c.integer("k_local");
  tc.momentum = c.real("momentum");
  tc.sinkhorn.mu = c.real("sinkhorn_mu");
  tc.sinkhorn.max_iters = c.integer("sinkhorn_iters");
  tc.sinkhorn.tol = c.real("sinkhorn_tol");
  tc.loss.tau = c.real("tau");
  tc.loss.beta_same = c.real("beta_same");
  tc.loss.metric = parse_metric(c.str("metric"));
  tc.loss.variant = parse_variant(c.str("variant"));
  tc.loss.use_inter = c.boolean("use_inter");
  tc.loss.use_intra = c.boolean("use_intra");
  tc.seed = c.u64("seed");
  tc.validate();
  return tc;
}

inline GuidanceConfig guidance_config(const Config& c) {
  GuidanceConfig g;
  g.w_c = c.real("w_c");
  g.w_s = c.real("w_s");
  g.gamma = c.real("gamma");
  g.guidance_t_max = c.integer("guidance_t_max");
  g.gamma_g = c.real("gamma_g");
  g.prototype_t_max = c.integer("prototype_t_max");
  g.ddim_steps = c.integer("ddim_steps");
  g.clip_z0 = c.real("clip_z0");
  g.transfer_T_prime = c.integer("transfer_T_prime");
  g.transfer_w_s = c.real("transfer_w_s");
  g.transfer_gamma = c.real("transfer_gamma");
  return g;
}

inline json to_json(const CodecConfig& c) {
  return {{"length", c.length}, {"channels", c.channels}, {"tokens", c.tokens}, {"token_width", c.token_width}, {"hidden", c.hidden}};
}

inline CodecConfig codec_config_from_json(const json& j) {
  CodecConfig c;
  c.length = j.at("length").get<int>();
  c.channels = j.at("channels").get<int>();
  c.tokens = j.at("tokens").get<int>();
  c.token_width = j.at("token_width").get<int>();
  c.hidden = j.at("hidden").get<int>();
  return c;
}

inline json to_json(const DenoiserConfig& c) {
  return {{"tokens", c.tokens},       {"token_width", c.token_width}, {"width", c.width},
          {"blocks", c.blocks},       {"mlp_hidden", c.mlp_hidden},   {"contents", c.contents},
          {"content_tokens", c.content_tokens}, {"style_width", c.style_width}, {"time_width", c.time_width}};
}

inline DenoiserConfig denoiser_config_from_json(const json& j) {
  DenoiserConfig c;
  c.tokens = j.at("tokens").get<int>();
  c.token_width = j.at("token_width").get<int>();
  c.width = j.at("width").get<int>();
  c.blocks = j.at("blocks").get<int>();
  c.mlp_hidden = j.at("mlp_hidden").get<int>();
  c.contents = j.at("contents").get<int>();
  c.content_tokens = j.at("content_tokens").get<int>();
  c.style_width = j.at("style_width").get<int>();
  c.time_width = j.at("time_width").get<int>();
  return c;
}

inline json to_json(const EncoderConfig& c) {
  return {{"in_channels", c.in_channels}, {"width", c.width},   {"layers", c.layers},
          {"mlp_hidden", c.mlp_hidden},   {"window", c.window}, {"temporal_mixing", c.temporal_mixing}};
}

inline EncoderConfig encoder_config_from_json(const json& j) {
  EncoderConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.width = j.at("width").get<int>();
  c.layers = j.at("layers").get<int>();
  c.mlp_hidden = j.at("mlp_hidden").get<int>();
  c.window = j.at("window").get<int>();
  c.temporal_mixing = j.at("temporal_mixing").get<bool>();
  return c;
}

// ---- hashing and manifests --------------------------------------------------

// Digest of a corpus directory: the manifest body without its run block plus
// every sequence file, so relocating the corpus keeps the digest.
inline std::string corpus_digest(const fs::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("missing corpus manifest in " + dir.string());
  json m = json::parse(is);
  m.erase("run");
  std::string acc = m.dump();
  for (const auto& e : m.at("sequences")) acc += sha256_file(dir / e.at("file").get<std::string>());
  return sha256_hex(acc);
}

// Digest of a checkpoint and its sidecar.
inline std::string checkpoint_digest(const fs::path& path) {
  const fs::path side = path.string() + ".json";
  return sha256_hex(sha256_file(path) + (fs::exists(side) ? sha256_file(side) : std::string()));
}

struct RunRecord {
  std::string command;
  Config config;
  json inputs = json::object();   // name -> {path, sha256}
  json outputs = json::object();  // file name -> sha256
  json summary = json::object();  // stage-specific results

  void add_corpus(const fs::path& dir) { inputs["data"] = {{"path", dir.string()}, {"sha256", corpus_digest(dir)}}; }
  void add_checkpoint(const std::string& name, const fs::path& p) {
    inputs[name] = {{"path", p.string()}, {"sha256", checkpoint_digest(p)}};
  }
  void add_file_input(const std::string& name, const fs::path& p) {
    inputs[name] = {{"path", p.string()}, {"sha256", sha256_file(p)}};
  }
  void add_output(const fs::path& dir, const std::string& file) { outputs[file] = sha256_file(dir / file); }

  json to_json() const {
    return {{"format", "protostyle-run/1"}, {"command", command}, {"config", config.to_json()}, {"seed", config.str("seed")},
            {"inputs", inputs},             {"outputs", outputs}, {"summary", summary}};
  }
};

inline void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  os << j.dump(2) << "\n";
  if (!os) throw IoError("cannot write " + path.string());
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  os << text;
  if (!os) throw IoError("cannot write " + path.string());
}

inline json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

// The run block of a manifest: the corpus manifest nests it under "run".
inline json manifest_run(const json& m) {
  if (m.contains("run")) return m.at("run");
  if (!m.contains("command") || !m.contains("config")) throw IoError("not a run manifest");
  return m;
}

// Checks that every recorded input still hashes to its recorded value.
inline void verify_inputs(const json& run) {
  for (const auto& [name, rec] : run.at("inputs").items()) {
    const fs::path p = rec.at("path").get<std::string>();
    const std::string want = rec.at("sha256").get<std::string>();
    std::string got;
    if (name == "data")
      got = corpus_digest(p);
    else if (name == "codec" || name == "base" || name == "model")
      got = checkpoint_digest(p);
    else
      got = sha256_file(p);
    if (got != want) throw StateError("input '" + name + "' (" + p.string() + ") differs from the manifest");
  }
}

// ---- checkpoint access ------------------------------------------------------

struct Checkpoint {
  ParamSet params;
  json sidecar;
};

inline Checkpoint load_checkpoint(const fs::path& path, const std::string& kind) {
  if (!fs::exists(path)) throw IoError("missing checkpoint " + path.string());
  Checkpoint c{load_tensors(path), load_sidecar(path)};
  if (c.sidecar.value("kind", "") != kind)
    throw StateError(path.string() + " is not a " + kind + " checkpoint (kind '" + c.sidecar.value("kind", "") + "')");
  return c;
}

inline NoiseSchedule checkpoint_schedule(const Checkpoint& c, const fs::path& path) {
  const json& s = c.sidecar.at("schedule");
  NoiseSchedule sched = make_schedule(s.at("kind").get<std::string>(), s.at("T").get<int>());
  if (sched.fingerprint() != c.sidecar.at("schedule_hash").get<std::string>())
    throw StateError(path.string() + ": schedule hash does not match its recorded schedule");
  return sched;
}

inline json checkpoint_sidecar(const std::string& kind, const Config& cfg, int iterations) {
  return {{"format", "protostyle-checkpoint/1"}, {"kind", kind}, {"config", portable_config(cfg)}, {"iterations", iterations}};
}

// Everything inference needs, owning its tensors.
struct LoadedModel {
  ParamSet codec;
  ParamSet model;
  NoiseSchedule sched;
  PrototypeBank bank;
  Pipeline pipe;

  LoadedModel() = default;
  LoadedModel(const LoadedModel&) = delete;
  LoadedModel& operator=(const LoadedModel&) = delete;
};

inline std::unique_ptr<LoadedModel> load_model(const fs::path& codec_path, const fs::path& model_path) {
  auto m = std::make_unique<LoadedModel>();
  Checkpoint codec = load_checkpoint(codec_path, "codec");
  Checkpoint model = load_checkpoint(model_path, "style");
  m->codec = std::move(codec.params);
  m->sched = checkpoint_schedule(model, model_path);
  m->bank = bank_from_params(model.params);
  m->model = std::move(model.params);
  m->pipe.codec = &m->codec;
  m->pipe.codec_cfg = codec_config_from_json(codec.sidecar.at("codec"));
  m->pipe.model = &m->model;
  m->pipe.enc = encoder_config_from_json(model.sidecar.at("encoder"));
  m->pipe.den = denoiser_config_from_json(model.sidecar.at("denoiser"));
  m->pipe.sched = &m->sched;
  m->pipe.bank = &m->bank;
  if (model.sidecar.at("codec_sha256").get<std::string>() != checkpoint_digest(codec_path))
    throw StateError(model_path.string() + " was trained on a different codec than " + codec_path.string());
  return m;
}

// ---- shared helpers ---------------------------------------------------------

using Split = std::pair<std::vector<MotionSequence>, std::vector<MotionSequence>>;

inline Split load_split(const Config& cfg, Corpus* corpus_out = nullptr) {
  Corpus corpus = load_corpus(cfg.str("data"));
  const double ratio = cfg.real("split_ratio");
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split_ratio", "must lie in (0, 1)");
  Split s = split_corpus(corpus.items, ratio, cfg.u64("split_seed"));
  if (corpus_out) *corpus_out = std::move(corpus);
  return s;
}

inline std::string indexed_name(const std::string& stem, size_t i, const std::string& ext) {
  std::ostringstream os;
  os << stem << "_" << std::setw(3) << std::setfill('0') << i << ext;
  return os.str();
}

inline int checked_content(const Config& cfg, int contents) {
  const int c = cfg.integer("content");
  if (c == -1) return kNullContent;
  if (c < 0 || c >= contents) throw ConfigError("content", "must be -1 or lie in [0, " + std::to_string(contents) + ")");
  return c;
}

inline int checked_style(const Config& cfg, const PrototypeBank& bank) {
  const int s = cfg.integer("style_id");
  if (s < 0 || s >= bank.styles) throw ConfigError("style_id", "must lie in [0, " + std::to_string(bank.styles) + ")");
  return s;
}

// Per-style average NMI of balanced hard assignments against hidden sub-styles.
struct NmiResult {
  double global = 0.0;
  double local = 0.0;
  std::vector<std::vector<int>> usage;  // [style][global prototype]
};

inline NmiResult prototype_nmi_report(const ParamSet& model, const EncoderConfig& enc, const PrototypeBank& bank,
                                      const std::vector<MotionSequence>& seqs, const SinkhornConfig& sk) {
  NmiResult r;
  int styles_seen = 0;
  for (int s = 0; s < bank.styles; ++s) {
    std::vector<RowVector> g;
    std::vector<RowVector> l;
    std::vector<int> labels;
    std::vector<int> local_labels;
    for (const auto& q : seqs) {
      if (q.style_id != s) continue;
      const StyleFeature f = encode(model, enc, q.frames);
      g.push_back(f.f_g);
      labels.push_back(q.substyle_id);
      for (Index i = 0; i < f.f_l.rows(); ++i) {
        l.push_back(f.f_l.row(i));
        local_labels.push_back(q.substyle_id);
      }
    }
    if (g.empty()) {
      r.usage.emplace_back(static_cast<size_t>(bank.k_global), 0);
      continue;
    }
    const AssignmentMatrix ga = assign_rows(stack_rows(g), bank.global[static_cast<size_t>(s)], sk);
    const AssignmentMatrix la = assign_rows(stack_rows(l), bank.local[static_cast<size_t>(s)], sk);
    r.global += prototype_nmi(ga.hard, labels);
    r.local += prototype_nmi(la.hard, local_labels);
    r.usage.push_back(usage_histogram(ga.hard, bank.k_global));
    ++styles_seen;
  }
  if (styles_seen == 0) throw PreconditionError("no sequences to assign");
  r.global /= styles_seen;
  r.local /= styles_seen;
  return r;
}

inline SinkhornConfig sinkhorn_config(const Config& c) {
  SinkhornConfig sk;
  sk.mu = c.real("sinkhorn_mu");
  sk.max_iters = c.integer("sinkhorn_iters");
  sk.tol = c.real("sinkhorn_tol");
  sk.validate();
  return sk;
}

// ---- stages -----------------------------------------------------------------

inline RunRecord run_gen_data(const Config& cfg, std::ostream& log) {
  RunRecord rec{"gen-data", cfg};
  const CorpusConfig cc = corpus_config(cfg);
  const fs::path dir = cfg.str("data");
  const auto items = generate_corpus(cc);
  save_corpus(dir, cc, items);
  for (const auto& s : items) rec.add_output(dir, sequence_filename(s));
  rec.summary = {{"sequences", items.size()}, {"length", cc.effective_length()}, {"channels", cc.channels}};
  // The corpus manifest doubles as the run manifest.
  save_corpus(dir, cc, items, rec.to_json());
  log << "gen-data: " << items.size() << " sequences -> " << dir.string() << "\n";
  return rec;
}

inline RunRecord run_train_codec(const Config& cfg, std::ostream& log) {
  RunRecord rec{"train-codec", cfg};
  rec.add_corpus(cfg.str("data"));
  Corpus corpus;
  auto [train, held_out] = load_split(cfg, &corpus);
  CodecConfig cc;
  cc.length = corpus.config.effective_length();
  cc.channels = corpus.config.channels;
  cc.tokens = cfg.integer("latent_tokens");
  cc.token_width = cfg.integer("token_width");
  cc.hidden = cfg.integer("codec_hidden");
  cc.validate();
  const CodecTrainConfig tc = codec_train_config(cfg);
  log << "train-codec: " << tc.steps << " steps on " << train.size() << " sequences\n";
  CodecTrainResult r = train_codec(train, cc, tc);
  const double eval_mse = reconstruction_mse(r.params, cc, held_out);
  constexpr double kTolerance = 0.05;
  const fs::path path = cfg.str("codec");
  json side = checkpoint_sidecar("codec", cfg, tc.steps);
  side["codec"] = to_json(cc);
  side["train_mse"] = r.train_mse;
  side["eval_mse"] = eval_mse;
  side["tolerance"] = kTolerance;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_tensors(path, r.params, side);
  const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
  rec.add_output(dir, path.filename().string());
  rec.add_output(dir, path.filename().string() + ".json");
  rec.summary = {{"train_mse", r.train_mse}, {"eval_mse", eval_mse}, {"tolerance", kTolerance}};
  write_json(dir / "manifest.json", rec.to_json());
  log << "train-codec: reconstruction mse train " << r.train_mse << " eval " << eval_mse << "\n";
  if (!(eval_mse < kTolerance)) log << "warning: eval reconstruction mse above tolerance " << kTolerance << "\n";
  return rec;
}

inline std::vector<LatentExample> encode_latents(const ParamSet& codec, const CodecConfig& cc,
                                                 const std::vector<MotionSequence>& seqs) {
  std::vector<LatentExample> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back({encode_standardized(codec, cc, s.frames), s.content_id, s.style_id});
  return out;
}

inline RunRecord run_pretrain_base(const Config& cfg, std::ostream& log) {
  RunRecord rec{"pretrain-base", cfg};
  rec.add_corpus(cfg.str("data"));
  rec.add_checkpoint("codec", cfg.str("codec"));
  Corpus corpus;
  auto [train, held_out] = load_split(cfg, &corpus);
  const Checkpoint codec = load_checkpoint(cfg.str("codec"), "codec");
  const CodecConfig cc = codec_config_from_json(codec.sidecar.at("codec"));
  DenoiserConfig dc;
  dc.tokens = cc.tokens;
  dc.token_width = cc.token_width;
  dc.width = cfg.integer("denoiser_width");
  dc.blocks = cfg.integer("denoiser_blocks");
  dc.mlp_hidden = cfg.integer("denoiser_mlp_hidden");
  dc.contents = corpus.config.contents;
  dc.content_tokens = cfg.integer("content_tokens");
  dc.style_width = cfg.integer("encoder_width");
  dc.time_width = cfg.integer("time_width");
  dc.validate();
  const int T = cfg.integer("diffusion_steps");
  if (T < 1) throw ConfigError("diffusion_steps", "must be >= 1");
  const NoiseSchedule sched = make_schedule(cfg.str("schedule"), T);
  const BaseTrainConfig tc = base_train_config(cfg);
  Rng init_rng(mix_seed(tc.seed, 1));
  ParamSet ps = init_denoiser_params(dc, init_rng);
  log << "pretrain-base: " << tc.steps << " steps on " << train.size() << " latents\n";
  const auto losses = pretrain_base(ps, dc, sched, encode_latents(codec.params, cc, train), tc);
  const size_t tail = std::min<size_t>(losses.size(), 100);
  const double final_loss =
      tail ? std::accumulate(losses.end() - static_cast<long>(tail), losses.end(), 0.0) / static_cast<double>(tail) : 0.0;
  const fs::path path = cfg.str("base");
  json side = checkpoint_sidecar("base", cfg, tc.steps);
  side["denoiser"] = to_json(dc);
  side["schedule"] = {{"kind", cfg.str("schedule")}, {"T", T}};
  side["schedule_hash"] = sched.fingerprint();
  side["codec_sha256"] = checkpoint_digest(cfg.str("codec"));
  side["final_loss"] = final_loss;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_tensors(path, ps, side);
  const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
  rec.add_output(dir, path.filename().string());
  rec.add_output(dir, path.filename().string() + ".json");
  std::ostringstream csv;
  csv.precision(9);
  csv << "step,loss\n";
  for (size_t i = 0; i < losses.size(); ++i) csv << i << "," << losses[i] << "\n";
  write_text(dir / "base_loss.csv", csv.str());
  rec.add_output(dir, "base_loss.csv");
  rec.summary = {{"final_loss", final_loss}};
  write_json(dir / "manifest.json", rec.to_json());
  log << "pretrain-base: final loss " << final_loss << "\n";
  return rec;
}

inline RunRecord run_train_style(const Config& cfg, std::ostream& log) {
  RunRecord rec{"train-style", cfg};
  rec.add_corpus(cfg.str("data"));
  rec.add_checkpoint("codec", cfg.str("codec"));
  rec.add_checkpoint("base", cfg.str("base"));
  Corpus corpus;
  auto [train, held_out] = load_split(cfg, &corpus);
  const Checkpoint codec = load_checkpoint(cfg.str("codec"), "codec");
  const Checkpoint base = load_checkpoint(cfg.str("base"), "base");
  if (base.sidecar.at("codec_sha256").get<std::string>() != checkpoint_digest(cfg.str("codec")))
    throw StateError("base checkpoint was trained on a different codec");
  const CodecConfig cc = codec_config_from_json(codec.sidecar.at("codec"));
  const DenoiserConfig dc = denoiser_config_from_json(base.sidecar.at("denoiser"));
  const NoiseSchedule sched = checkpoint_schedule(base, cfg.str("base"));
  const EncoderConfig ec = encoder_config(cfg, corpus.config.channels, corpus.config.window);
  const StyleTrainConfig tc = style_train_config(cfg);
  const int S = corpus.config.styles;

  ParamSet ps = base.params;
  Rng init_rng(mix_seed(tc.seed, 1));
  ps.merge(init_encoder_params(ec, init_rng));
  if (tc.loss.variant == LossVariant::entropy) init_entropy_heads(ps, S, ec.width, init_rng);

  std::vector<StyleExample> style_data;
  for (const auto& s : train) style_data.push_back({&s, encode_standardized(codec.params, cc, s.frames)});
  std::vector<LatentExample> content_data;
  for (const auto& ex : style_data) content_data.push_back({ex.z0, ex.seq->content_id, ex.seq->style_id});

  PrototypeBank bank = init_bank(ps, ec, style_data, S, tc.k_global, tc.k_local, tc.momentum);
  StyleTrainer trainer(ps, bank, ec, dc, sched, style_data, content_data, tc);
  log << "train-style: " << tc.iterations << " iterations (" << variant_name(tc.loss.variant) << "), prototypes freeze at "
      << tc.freeze_at() << "\n";
  std::ostringstream csv;
  csv.precision(9);
  csv << "step,diff_style,diff_content,style,total,bank_updated,empty_clusters\n";
  long empty = 0;
  for (int i = 0; i < tc.iterations; ++i) {
    if (i == tc.freeze_at()) finalize_bank(bank, ps, ec, style_data, tc.sinkhorn);
    const TrainReport r = trainer.train_step();
    empty += r.empty_clusters;
    csv << r.step << "," << r.diff_style << "," << r.diff_content << "," << r.style << "," << r.total << ","
        << (r.bank_updated ? 1 : 0) << "," << r.empty_clusters << "\n";
    if ((i + 1) % 250 == 0 || i + 1 == tc.freeze_at() || i + 1 == tc.iterations) {
      log << "train-style: step " << i + 1 << " total " << r.total << "\n";
      if (empty > 0) log << "warning: " << empty << " empty prototype clusters kept unchanged since the last report\n";
      empty = 0;
    }
  }
  if (!bank.frozen) finalize_bank(bank, ps, ec, style_data, tc.sinkhorn);
  ps.round_to_f32();

  ParamSet out;
  for (const auto& [name, m] : ps.tensors())
    if (name.rfind("enc.", 0) == 0 || name.rfind("den.", 0) == 0 || is_entropy_head(name)) out.set(name, m);
  bank_to_params(bank, out);
  const NmiResult nmi = prototype_nmi_report(ps, ec, bank, train, tc.sinkhorn);

  const fs::path path = cfg.str("model");
  json side = checkpoint_sidecar("style", cfg, tc.iterations);
  side["encoder"] = to_json(ec);
  side["denoiser"] = to_json(dc);
  side["schedule"] = base.sidecar.at("schedule");
  side["schedule_hash"] = sched.fingerprint();
  side["codec_sha256"] = checkpoint_digest(cfg.str("codec"));
  side["base_sha256"] = checkpoint_digest(cfg.str("base"));
  side["freeze_at"] = tc.freeze_at();
  side["variant"] = variant_name(tc.loss.variant);
  side["nmi_global_train"] = nmi.global;
  side["nmi_local_train"] = nmi.local;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_tensors(path, out, side);
  const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
  rec.add_output(dir, path.filename().string());
  rec.add_output(dir, path.filename().string() + ".json");
  write_text(dir / "style_loss.csv", csv.str());
  rec.add_output(dir, "style_loss.csv");
  rec.summary = {{"nmi_global_train", nmi.global}, {"nmi_local_train", nmi.local}, {"freeze_at", tc.freeze_at()}};
  write_json(dir / "manifest.json", rec.to_json());
  log << "train-style: train NMI global " << nmi.global << " local " << nmi.local << "\n";
  return rec;
}

inline RunRecord run_sample(const Config& cfg, std::ostream& log) {
  RunRecord rec{"sample", cfg};
  rec.add_checkpoint("codec", cfg.str("codec"));
  rec.add_checkpoint("model", cfg.str("model"));
  auto m = load_model(cfg.str("codec"), cfg.str("model"));
  const GuidanceConfig g = guidance_config(cfg);
  g.validate(m->sched.T);
  const int content = checked_content(cfg, m->pipe.den.contents);
  const int style = checked_style(cfg, m->bank);
  const int proto = cfg.integer("prototype");
  const int count = cfg.integer("count");
  if (count < 1) throw ConfigError("count", "must be >= 1");

  SampleRequest req;
  req.content = content;
  json mode;
  if (proto >= 0) {
    if (proto >= m->bank.k_global) throw ConfigError("prototype", "must be -1 or lie in [0, " + std::to_string(m->bank.k_global) + ")");
    req.style_tokens = prototype_style_tokens(m->bank, style, proto);
    if (cfg.boolean("local_guidance"))
      req.prototype = local_target(m->bank, style, m->bank.local_defaults.at(static_cast<size_t>(style)).at(static_cast<size_t>(proto)));
    else
      req.prototype = global_target(m->bank, style, proto);
    mode = {{"mode", "prototype"}, {"style", style}, {"prototype", proto}, {"local", cfg.boolean("local_guidance")}};
  } else {
    Matrix ref;
    std::string ref_name;
    if (!cfg.str("reference").empty()) {
      rec.add_file_input("reference", cfg.str("reference"));
      ref = read_sequence_file(cfg.str("reference"), m->pipe.codec_cfg.length, m->pipe.codec_cfg.channels);
      ref_name = cfg.str("reference");
    } else {
      rec.add_corpus(cfg.str("data"));
      auto [train, held_out] = load_split(cfg);
      auto it = std::find_if(held_out.begin(), held_out.end(), [&](const MotionSequence& s) { return s.style_id == style; });
      if (it == held_out.end()) throw PreconditionError("no held-out sequence of style " + std::to_string(style));
      ref = it->frames;
      ref_name = sequence_filename(*it);
    }
    const Matrix tokens = encode(m->model, m->pipe.enc, ref).tokens();
    req.style_tokens = tokens;
    req.classifier_ref = tokens;
    mode = {{"mode", "reference"}, {"reference", ref_name}};
  }

  const fs::path dir = cfg.str("out").empty() ? fs::path(default_out("sample")) : fs::path(cfg.str("out"));
  fs::create_directories(dir);
  const std::uint64_t seed = cfg.u64("seed");
  const auto results = parallel_map<SampleResult>(static_cast<size_t>(count), [&](size_t i) {
    return sample(m->pipe, req, g, mix_seed(seed, i));
  });
  json samples = json::array();
  for (size_t i = 0; i < results.size(); ++i) {
    const std::string name = indexed_name("sample", i, ".f32");
    write_sequence_file(dir / name, results[i].frames);
    rec.add_output(dir, name);
    json entry = {{"file", name}};
    if (content != kNullContent) entry["content_score"] = content_score(results[i].frames, content);
    samples.push_back(entry);
  }
  rec.summary = {{"request", mode}, {"samples", samples}};
  write_json(dir / "manifest.json", rec.to_json());
  log << "sample: wrote " << count << " sequences to " << dir.string() << "\n";
  return rec;
}

inline RunRecord run_transfer(const Config& cfg, std::ostream& log) {
  RunRecord rec{"transfer", cfg};
  if (cfg.str("content_seq").empty()) throw ConfigError("content_seq", "transfer needs a content sequence");
  if (cfg.str("style_seq").empty()) throw ConfigError("style_seq", "transfer needs a style sequence");
  rec.add_checkpoint("codec", cfg.str("codec"));
  rec.add_checkpoint("model", cfg.str("model"));
  rec.add_file_input("content_seq", cfg.str("content_seq"));
  rec.add_file_input("style_seq", cfg.str("style_seq"));
  auto m = load_model(cfg.str("codec"), cfg.str("model"));
  const GuidanceConfig g = guidance_config(cfg);
  const CodecConfig& cc = m->pipe.codec_cfg;
  const Matrix content = read_sequence_file(cfg.str("content_seq"), cc.length, cc.channels);
  const Matrix style = read_sequence_file(cfg.str("style_seq"), cc.length, cc.channels);
  const SampleResult r = style_transfer(m->pipe, content, style, g, cfg.u64("seed"));
  const fs::path dir = cfg.str("out").empty() ? fs::path(default_out("transfer")) : fs::path(cfg.str("out"));
  fs::create_directories(dir);
  write_sequence_file(dir / "transfer.f32", r.frames);
  rec.add_output(dir, "transfer.f32");
  rec.summary = {{"T_prime", g.transfer_T_prime}, {"w_s", g.transfer_w_s}, {"gamma", g.transfer_gamma}};
  write_json(dir / "manifest.json", rec.to_json());
  log << "transfer: wrote " << (dir / "transfer.f32").string() << "\n";
  return rec;
}

// Generated sets scored by eval.
struct EvalSamples {
  std::vector<Matrix> reference;  // reference-guided
  std::vector<int> reference_style;
  std::vector<int> reference_content;
  std::vector<Matrix> prototype;  // prototype-guided
  std::vector<int> prototype_style;
  std::vector<int> prototype_content;
  std::vector<Matrix> transfer;
  std::vector<int> transfer_style;
};

// Index i of each set is a pure function of (seed, i), so the sets do not
// depend on the worker count.
inline EvalSamples generate_eval_samples(const Pipeline& p, const std::vector<MotionSequence>& held_out, const GuidanceConfig& g,
                                         int n_samples, int n_transfer, std::uint64_t seed) {
  if (held_out.empty()) throw PreconditionError("evaluation needs held-out sequences");
  const int C = p.den.contents;
  const PrototypeBank& bank = *p.bank;
  const size_t n = held_out.size();
  EvalSamples out;
  for (int i = 0; i < n_samples; ++i) {
    const auto& ref = held_out[(static_cast<size_t>(i) * 7) % n];
    out.reference_style.push_back(ref.style_id);
    out.reference_content.push_back(i % C);
    out.prototype_style.push_back(i % bank.styles);
    out.prototype_content.push_back(i % C);
  }
  out.reference = parallel_map<Matrix>(static_cast<size_t>(n_samples), [&](size_t i) {
    const Matrix tokens = encode(*p.model, p.enc, held_out[(i * 7) % n].frames).tokens();
    SampleRequest req;
    req.content = out.reference_content[i];
    req.style_tokens = tokens;
    req.classifier_ref = tokens;
    return sample(p, req, g, mix_seed(seed, 1000 + i)).frames;
  });
  out.prototype = parallel_map<Matrix>(static_cast<size_t>(n_samples), [&](size_t i) {
    const int s = out.prototype_style[i];
    const int k = static_cast<int>(i / static_cast<size_t>(bank.styles)) % bank.k_global;
    SampleRequest req;
    req.content = out.prototype_content[i];
    req.style_tokens = prototype_style_tokens(bank, s, k);
    req.prototype = global_target(bank, s, k);
    return sample(p, req, g, mix_seed(seed, 2000 + i)).frames;
  });
  std::vector<std::pair<size_t, size_t>> pairs;
  for (int i = 0; i < n_transfer; ++i) {
    const size_t a = (static_cast<size_t>(i) * 5) % n;
    size_t b = (static_cast<size_t>(i) * 11 + 3) % n;
    for (size_t tries = 0; tries < n && held_out[b].style_id == held_out[a].style_id; ++tries) b = (b + 1) % n;
    pairs.emplace_back(a, b);
    out.transfer_style.push_back(held_out[b].style_id);
  }
  out.transfer = parallel_map<Matrix>(pairs.size(), [&](size_t i) {
    return style_transfer(p, held_out[pairs[i].first].frames, held_out[pairs[i].second].frames, g, mix_seed(seed, 3000 + i)).frames;
  });
  return out;
}

inline MetricsReport score_eval_samples(const EvalSamples& e, const StyleOracle& oracle, const NmiResult& nmi) {
  MetricsReport r;
  r.oracle_accuracy = oracle.eval_accuracy();
  if (!e.reference.empty()) r.sra = oracle_sra(e.reference, e.reference_style, oracle);
  if (!e.prototype.empty()) r.sra_prototype = oracle_sra(e.prototype, e.prototype_style, oracle);
  if (!e.transfer.empty()) r.sra_transfer = oracle_sra(e.transfer, e.transfer_style, oracle);
  double cs = 0.0;
  size_t nc = 0;
  for (size_t i = 0; i < e.reference.size(); ++i, ++nc) cs += content_score(e.reference[i], e.reference_content[i]);
  for (size_t i = 0; i < e.prototype.size(); ++i, ++nc) cs += content_score(e.prototype[i], e.prototype_content[i]);
  r.content_score = nc ? cs / static_cast<double>(nc) : 0.0;
  if (e.reference.size() >= 2) r.diversity = diversity_score(e.reference);
  r.nmi_global = nmi.global;
  r.nmi_local = nmi.local;
  r.usage = nmi.usage;
  r.check();
  return r;
}

inline StyleOracle gated_oracle(const Split& split) {
  StyleOracle oracle;
  oracle.fit(split.first);
  const double acc = oracle.gate(split.second);
  if (!oracle.gated())
    throw StateError("style oracle held-out accuracy " + std::to_string(acc) + " is below the gate " + std::to_string(StyleOracle::kGate));
  return oracle;
}

inline RunRecord run_eval(const Config& cfg, std::ostream& log) {
  RunRecord rec{"eval", cfg};
  rec.add_corpus(cfg.str("data"));
  rec.add_checkpoint("codec", cfg.str("codec"));
  rec.add_checkpoint("model", cfg.str("model"));
  const json before = rec.inputs;
  const int n_samples = cfg.integer("eval_samples");
  const int n_transfer = cfg.integer("transfer_pairs");
  if (n_samples < 2) throw ConfigError("eval_samples", "must be >= 2");
  if (n_transfer < 0) throw ConfigError("transfer_pairs", "must be >= 0");

  const Split split = load_split(cfg);
  const StyleOracle oracle = gated_oracle(split);
  auto m = load_model(cfg.str("codec"), cfg.str("model"));
  const GuidanceConfig g = guidance_config(cfg);
  g.validate(m->sched.T);
  const NmiResult nmi = prototype_nmi_report(m->model, m->pipe.enc, m->bank, split.second, sinkhorn_config(cfg));
  log << "eval: oracle accuracy " << oracle.eval_accuracy() << ", generating " << 2 * n_samples << " samples and " << n_transfer
      << " transfers\n";
  const EvalSamples e = generate_eval_samples(m->pipe, split.second, g, n_samples, n_transfer, cfg.u64("seed"));
  const MetricsReport report = score_eval_samples(e, oracle, nmi);

  // Read-only contract: inputs must hash as they did before scoring.
  RunRecord after{"eval", cfg};
  after.add_corpus(cfg.str("data"));
  after.add_checkpoint("codec", cfg.str("codec"));
  after.add_checkpoint("model", cfg.str("model"));
  if (after.inputs != before) throw StateError("eval inputs changed while scoring");

  const fs::path dir = cfg.str("out").empty() ? fs::path(default_out("eval")) : fs::path(cfg.str("out"));
  write_json(dir / "metrics.json", report.to_json());
  write_text(dir / "metrics.csv", report.to_csv());
  rec.add_output(dir, "metrics.json");
  rec.add_output(dir, "metrics.csv");
  rec.summary = report.to_json();
  write_json(dir / "manifest.json", rec.to_json());
  log << "eval: sra " << report.sra << " sra_prototype " << report.sra_prototype << " sra_transfer " << report.sra_transfer
      << " nmi_global " << report.nmi_global << "\n";
  return rec;
}

inline RunRecord run_inspect_prototypes(const Config& cfg, std::ostream& log) {
  RunRecord rec{"inspect-prototypes", cfg};
  rec.add_corpus(cfg.str("data"));
  rec.add_checkpoint("model", cfg.str("model"));
  const Checkpoint model = load_checkpoint(cfg.str("model"), "style");
  const EncoderConfig ec = encoder_config_from_json(model.sidecar.at("encoder"));
  const PrototypeBank bank = bank_from_params(model.params);
  const Corpus corpus = load_corpus(cfg.str("data"));
  const SinkhornConfig sk = sinkhorn_config(cfg);
  constexpr size_t kExemplars = 3;

  json styles = json::array();
  for (int s = 0; s < bank.styles; ++s) {
    std::vector<const MotionSequence*> members;
    std::vector<RowVector> g;
    std::vector<RowVector> l;
    for (const auto& q : corpus.items) {
      if (q.style_id != s) continue;
      const StyleFeature f = encode(model.params, ec, q.frames);
      members.push_back(&q);
      g.push_back(normalized_row(f.f_g));
      for (Index i = 0; i < f.f_l.rows(); ++i) l.push_back(f.f_l.row(i));
    }
    json entry = {{"style", s}, {"sequences", members.size()}};
    if (members.empty()) {
      styles.push_back(entry);
      continue;
    }
    const Matrix gm = stack_rows(g);
    const AssignmentMatrix ga = assign_rows(gm, bank.global[static_cast<size_t>(s)], sk);
    const AssignmentMatrix la = assign_rows(stack_rows(l), bank.local[static_cast<size_t>(s)], sk);
    json globals = json::array();
    for (int k = 0; k < bank.k_global; ++k) {
      const Vector sim = gm * bank.global[static_cast<size_t>(s)].row(k).transpose();
      std::vector<size_t> order(members.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return sim(static_cast<Index>(a)) > sim(static_cast<Index>(b)); });
      json nearest = json::array();
      for (size_t j = 0; j < std::min(kExemplars, order.size()); ++j)
        nearest.push_back({{"file", sequence_filename(*members[order[j]])},
                           {"substyle", members[order[j]]->substyle_id},
                           {"cosine", sim(static_cast<Index>(order[j]))}});
      std::map<int, int> substyles;
      int assigned = 0;
      for (size_t n = 0; n < members.size(); ++n)
        if (ga.hard[n] == k) {
          ++assigned;
          ++substyles[members[n]->substyle_id];
        }
      json hist = json::object();
      for (const auto& [sub, c] : substyles) hist[std::to_string(sub)] = c;
      globals.push_back({{"prototype", k}, {"assigned", assigned}, {"assigned_substyles", hist}, {"nearest", nearest}});
    }
    entry["global"] = globals;
    entry["local_usage"] = usage_histogram(la.hard, bank.k_local);
    styles.push_back(entry);
  }
  const fs::path dir = cfg.str("out").empty() ? fs::path(default_out("inspect-prototypes")) : fs::path(cfg.str("out"));
  write_json(dir / "prototypes.json", {{"k_global", bank.k_global}, {"k_local", bank.k_local}, {"styles", styles}});
  rec.add_output(dir, "prototypes.json");
  write_json(dir / "manifest.json", rec.to_json());
  log << "inspect-prototypes: wrote " << (dir / "prototypes.json").string() << "\n";
  return rec;
}

inline RunRecord run_subcommand(const std::string& cmd, const Config& cfg, std::ostream& log) {
  if (cmd == "gen-data") return run_gen_data(cfg, log);
  if (cmd == "train-codec") return run_train_codec(cfg, log);
  if (cmd == "pretrain-base") return run_pretrain_base(cfg, log);
  if (cmd == "train-style") return run_train_style(cfg, log);
  if (cmd == "sample") return run_sample(cfg, log);
  if (cmd == "transfer") return run_transfer(cfg, log);
  if (cmd == "eval") return run_eval(cfg, log);
  if (cmd == "inspect-prototypes") return run_inspect_prototypes(cfg, log);
  throw PreconditionError("unknown subcommand '" + cmd + "'");
}

// Output files whose hash differs from `recorded` (missing ones included).
inline std::vector<std::string> output_mismatches(const json& recorded, const json& produced) {
  std::vector<std::string> bad;
  for (const auto& [file, hash] : recorded.items())
    if (!produced.contains(file) || produced.at(file) != hash) bad.push_back(file);
  for (const auto& [file, hash] : produced.items())
    if (!recorded.contains(file)) bad.push_back(file);
  return bad;
}

}  // namespace protostyle
