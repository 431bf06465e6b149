#pragma once

// Latent denoiser with the Style Modulation Adapter (SMA), the noise schedule
// and the base-model pretraining loop.
//
// Block layout: h += SelfAttn(LN h); h += SMA(LN h, content, style); h += MLP(LN h).
// SMA: softmax(Q K_c^T / sqrt d) V_c + lambda * softmax(Q K_s^T / sqrt d) V_s.

#include "protostyle/autodiff.hpp"
#include "protostyle/params.hpp"

#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace protostyle {

struct NoiseSchedule {
  int T = 1000;
  std::vector<double> alpha_bar;  // T + 1 entries, alpha_bar[0] = 1

  double at(int t) const {
    if (t < 0 || t > T) throw PreconditionError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
    return alpha_bar[static_cast<size_t>(t)];
  }

  std::string fingerprint() const {
    std::string bytes(reinterpret_cast<const char*>(alpha_bar.data()), alpha_bar.size() * sizeof(double));
    return sha256_hex(bytes);
  }
};

// Cosine-shaped cumulative schedule; per-step betas are capped so alpha_bar
// stays strictly positive at t = T.
inline NoiseSchedule cosine_schedule(int T = 1000, double offset = 0.008, double max_beta = 0.999) {
  if (T < 1) throw ConfigError("diffusion_steps", "must be >= 1");
  auto f = [&](double t) {
    const double x = (t / T + offset) / (1.0 + offset) * std::numbers::pi / 2.0;
    return std::cos(x) * std::cos(x);
  };
  NoiseSchedule s;
  s.T = T;
  s.alpha_bar.resize(static_cast<size_t>(T) + 1);
  s.alpha_bar[0] = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double beta = std::min(1.0 - f(t) / f(t - 1), max_beta);
    s.alpha_bar[static_cast<size_t>(t)] = s.alpha_bar[static_cast<size_t>(t) - 1] * (1.0 - beta);
  }
  return s;
}

inline NoiseSchedule linear_schedule(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02) {
  if (T < 1) throw ConfigError("diffusion_steps", "must be >= 1");
  NoiseSchedule s;
  s.T = T;
  s.alpha_bar.resize(static_cast<size_t>(T) + 1);
  s.alpha_bar[0] = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double beta = beta_start + (beta_end - beta_start) * (T > 1 ? (t - 1.0) / (T - 1.0) : 0.0);
    s.alpha_bar[static_cast<size_t>(t)] = s.alpha_bar[static_cast<size_t>(t) - 1] * (1.0 - beta);
  }
  return s;
}

inline NoiseSchedule make_schedule(const std::string& kind, int T) {
  if (kind == "cosine") return cosine_schedule(T);
  if (kind == "linear") return linear_schedule(T);
  throw ConfigError("schedule", "unknown schedule '" + kind + "' (cosine|linear)");
}

// z_t = sqrt(ab) z0 + sqrt(1 - ab) eps
inline Matrix forward_diffuse(const Matrix& z0, int t, const Matrix& eps, const NoiseSchedule& sched) {
  require_shape(z0.rows() == eps.rows() && z0.cols() == eps.cols(), "eps shape must match z0");
  const double ab = sched.at(t);
  return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
}

struct DenoiserConfig {
  int tokens = 5;        // n_z
  int token_width = 32;  // d_z
  int width = 64;        // d
  int blocks = 4;        // N
  int mlp_hidden = 128;
  int contents = 3;      // C; index C is the null content
  int content_tokens = 2;
  int style_width = 64;  // d'
  int time_width = 64;

  void validate() const {
    if (tokens < 1 || token_width < 1) throw ConfigError("latent_tokens", "latent shape must be positive");
    if (width < 1) throw ConfigError("denoiser_width", "must be >= 1");
    if (blocks < 1) throw ConfigError("denoiser_blocks", "must be >= 1");
    if (mlp_hidden < 1) throw ConfigError("denoiser_mlp_hidden", "must be >= 1");
    if (contents < 1) throw ConfigError("contents", "must be >= 1");
    if (content_tokens < 1) throw ConfigError("content_tokens", "must be >= 1");
    if (style_width < 1) throw ConfigError("encoder_width", "must be >= 1");
    if (time_width < 2) throw ConfigError("time_width", "must be >= 2");
  }
};

inline std::string den_block(int b, const char* leaf) { return "den.b" + std::to_string(b) + "." + leaf; }

// Style branch of the adapter: the only denoiser tensors stylization may update.
inline bool is_style_branch(const std::string& name) {
  auto ends_with = [&](const char* suffix) {
    const std::string s(suffix);
    return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  return name == "den.style.null" || ends_with(".sma.wk_s") || ends_with(".sma.wv_s") || ends_with(".sma.lambda");
}

inline ParamSet init_denoiser_params(const DenoiserConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamSet p;
  const int d = cfg.width;
  auto glorot = [&](int fan_in, int fan_out) { return randn(fan_in, fan_out, rng, 1.0 / std::sqrt(fan_in)); };
  p.set("den.in.w", glorot(cfg.token_width, d));
  p.set("den.in.b", Matrix::Zero(1, d));
  p.set("den.pos", randn(cfg.tokens, d, rng, 0.1));
  p.set("den.time.w1", glorot(cfg.time_width, d));
  p.set("den.time.b1", Matrix::Zero(1, d));
  p.set("den.time.w2", glorot(d, d));
  p.set("den.time.b2", Matrix::Zero(1, d));
  p.set("den.content.table", randn((cfg.contents + 1) * cfg.content_tokens, d, rng, 1.0));
  p.set("den.style.null", randn(1, cfg.style_width, rng, 1.0));
  for (int b = 0; b < cfg.blocks; ++b) {
    p.set(den_block(b, "attn.wq"), glorot(d, d));
    p.set(den_block(b, "attn.wk"), glorot(d, d));
    p.set(den_block(b, "attn.wv"), glorot(d, d));
    p.set(den_block(b, "attn.wo"), glorot(d, d) * 0.5);
    p.set(den_block(b, "sma.wq_c"), glorot(d, d));
    p.set(den_block(b, "sma.wk_c"), glorot(d, d));
    p.set(den_block(b, "sma.wv_c"), glorot(d, d) * 0.5);
    p.set(den_block(b, "sma.wk_s"), glorot(cfg.style_width, d));
    p.set(den_block(b, "sma.wv_s"), glorot(cfg.style_width, d) * 0.5);
    p.set(den_block(b, "sma.lambda"), Matrix::Zero(1, 1));
    p.set(den_block(b, "mlp.w1"), glorot(d, cfg.mlp_hidden));
    p.set(den_block(b, "mlp.b1"), Matrix::Zero(1, cfg.mlp_hidden));
    p.set(den_block(b, "mlp.w2"), glorot(cfg.mlp_hidden, d) * 0.5);
    p.set(den_block(b, "mlp.b2"), Matrix::Zero(1, d));
  }
  p.set("den.out.w", glorot(d, cfg.token_width) * 0.5);
  p.set("den.out.b", Matrix::Zero(1, cfg.token_width));
  return p;
}

struct SMAWeights {
  Matrix wq_c, wk_c, wv_c;  // d x d
  Matrix wk_s, wv_s;        // d' x d
  double lambda = 0.0;
};

inline ad::Var sma_on_tape(ad::Tape& t, ad::Var x, ad::Var content, ad::Var style, ad::Var wq_c, ad::Var wk_c,
                           ad::Var wv_c, ad::Var wk_s, ad::Var wv_s, ad::Var lambda) {
  using namespace ad;
  const double d = static_cast<double>(t.value(wq_c).cols());
  Var q = matmul(t, x, wq_c);
  Var o_content = attention(t, q, matmul(t, content, wk_c), matmul(t, content, wv_c), d);
  Var o_style = attention(t, q, matmul(t, style, wk_s), matmul(t, style, wv_s), d);
  return add(t, o_content, scale_by(t, o_style, lambda));
}

// Value-level adapter: x (n x d) tokens, c (m x d) content tokens, f_s (r x d') style tokens.
inline Matrix sma_forward(const Matrix& x, const Matrix& c, const Matrix& f_s, const SMAWeights& w) {
  require_shape(x.cols() == w.wq_c.rows() && c.cols() == w.wk_c.rows() && f_s.cols() == w.wk_s.rows(),
                "sma input widths do not match projections");
  require_shape(w.wq_c.cols() == w.wk_c.cols() && w.wk_s.cols() == w.wq_c.cols() && w.wv_s.cols() == w.wv_c.cols(),
                "sma projection widths disagree");
  ad::Tape t;
  ad::Var out = sma_on_tape(t, t.constant(x), t.constant(c), t.constant(f_s), t.constant(w.wq_c), t.constant(w.wk_c),
                            t.constant(w.wv_c), t.constant(w.wk_s), t.constant(w.wv_s),
                            t.constant(Matrix::Constant(1, 1, w.lambda)));
  return t.value(out);
}

inline SMAWeights sma_weights(const ParamSet& ps, int block) {
  SMAWeights w;
  w.wq_c = ps.at(den_block(block, "sma.wq_c"));
  w.wk_c = ps.at(den_block(block, "sma.wk_c"));
  w.wv_c = ps.at(den_block(block, "sma.wv_c"));
  w.wk_s = ps.at(den_block(block, "sma.wk_s"));
  w.wv_s = ps.at(den_block(block, "sma.wv_s"));
  w.lambda = ps.at(den_block(block, "sma.lambda"))(0, 0);
  return w;
}

inline Matrix timestep_features(int t, int width) {
  Matrix e(1, width);
  const int half = width / 2;
  for (int j = 0; j < half; ++j) {
    const double freq = std::exp(-std::log(10000.0) * j / std::max(half, 1));
    e(0, j) = std::sin(t * freq);
    e(0, half + j) = std::cos(t * freq);
  }
  if (width % 2 == 1) e(0, width - 1) = 0.0;
  return e;
}

inline constexpr int kNullContent = -1;

// Predicted noise for latent z (n_z x d_z). content < 0 selects the null
// content token; an invalid `style` Var selects the learned null style token.
inline ad::Var denoise_on_tape(ad::Tape& t, const ParamSet& ps, const DenoiserConfig& cfg, ad::Var z, int timestep,
                               int content, ad::Var style) {
  using namespace ad;
  const Matrix& zv = t.value(z);
  require_shape(zv.rows() == cfg.tokens && zv.cols() == cfg.token_width,
                "denoiser expects " + std::to_string(cfg.tokens) + "x" + std::to_string(cfg.token_width) + " latent, got " +
                    shape_str(zv));
  if (content >= cfg.contents) throw PreconditionError("content id " + std::to_string(content) + " out of range");
  if (style.valid()) require_shape(t.value(style).cols() == cfg.style_width, "style token width mismatch");

  const int slot = content < 0 ? cfg.contents : content;
  std::vector<Index> rows;
  for (int k = 0; k < cfg.content_tokens; ++k) rows.push_back(static_cast<Index>(slot * cfg.content_tokens + k));
  Var c_tokens = gather_rows(t, P(t, ps, "den.content.table"), rows);
  // Style tokens enter normalized so raw encoder scale does not saturate the style attention.
  Var s_tokens = layer_norm_rows(t, style.valid() ? style : P(t, ps, "den.style.null"));

  Var temb = linear(t, t.constant(timestep_features(timestep, cfg.time_width)), P(t, ps, "den.time.w1"),
                    P(t, ps, "den.time.b1"));
  temb = linear(t, silu(t, temb), P(t, ps, "den.time.w2"), P(t, ps, "den.time.b2"));

  Var h = linear(t, z, P(t, ps, "den.in.w"), P(t, ps, "den.in.b"));
  h = add_row(t, add(t, h, P(t, ps, "den.pos")), temb);
  const double d = static_cast<double>(cfg.width);
  for (int b = 0; b < cfg.blocks; ++b) {
    Var n = layer_norm_rows(t, h);
    Var a = attention(t, matmul(t, n, P(t, ps, den_block(b, "attn.wq"))), matmul(t, n, P(t, ps, den_block(b, "attn.wk"))),
                      matmul(t, n, P(t, ps, den_block(b, "attn.wv"))), d);
    h = add(t, h, matmul(t, a, P(t, ps, den_block(b, "attn.wo"))));
    n = layer_norm_rows(t, h);
    h = add(t, h,
            sma_on_tape(t, n, c_tokens, s_tokens, P(t, ps, den_block(b, "sma.wq_c")), P(t, ps, den_block(b, "sma.wk_c")),
                        P(t, ps, den_block(b, "sma.wv_c")), P(t, ps, den_block(b, "sma.wk_s")),
                        P(t, ps, den_block(b, "sma.wv_s")), P(t, ps, den_block(b, "sma.lambda"))));
    n = layer_norm_rows(t, h);
    Var m = silu(t, linear(t, n, P(t, ps, den_block(b, "mlp.w1")), P(t, ps, den_block(b, "mlp.b1"))));
    h = add(t, h, linear(t, m, P(t, ps, den_block(b, "mlp.w2")), P(t, ps, den_block(b, "mlp.b2"))));
  }
  return linear(t, layer_norm_rows(t, h), P(t, ps, "den.out.w"), P(t, ps, "den.out.b"));
}

inline Matrix denoise(const ParamSet& ps, const DenoiserConfig& cfg, const Matrix& z_t, int timestep, int content,
                      const std::optional<Matrix>& style_tokens) {
  ad::Tape t;
  t.set_params_trainable(false);
  ad::Var style = style_tokens ? t.constant(*style_tokens) : ad::Var{};
  ad::Var eps = denoise_on_tape(t, ps, cfg, t.constant(z_t), timestep, content, style);
  return t.value(eps);
}

// ---- base-model pretraining -----------------------------------------------------

struct BaseTrainConfig {
  int steps = 3000;
  int batch = 32;
  double lr = 1e-3;
  double cond_drop_prob = 0.1;
  std::uint64_t seed = 21;

  void validate() const {
    if (steps < 0) throw ConfigError("base_steps", "must be >= 0");
    if (batch < 1) throw ConfigError("batch", "must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("base_lr", "must be > 0");
    if (!(cond_drop_prob >= 0.0 && cond_drop_prob <= 1.0)) throw ConfigError("cond_drop_prob", "must lie in [0, 1]");
  }
};

struct LatentExample {
  Matrix z0;  // standardized latent
  int content = 0;
  int style = 0;
};

// Content-conditioned denoiser pretraining with the style branch held at its
// null token; style-branch tensors are not updated.
inline std::vector<double> pretrain_base(ParamSet& ps, const DenoiserConfig& cfg, const NoiseSchedule& sched,
                                         const std::vector<LatentExample>& data, const BaseTrainConfig& tc) {
  tc.validate();
  if (data.empty()) throw PreconditionError("base pretraining needs data");
  Rng rng(tc.seed);
  Adam::Options ao;
  ao.lr = tc.lr;
  ao.clip_norm = 1.0;
  Adam opt(ao);
  std::uniform_int_distribution<size_t> pick(0, data.size() - 1);
  std::uniform_int_distribution<int> tdist(1, sched.T);
  std::bernoulli_distribution drop(tc.cond_drop_prob);
  std::vector<double> log;
  for (int step = 0; step < tc.steps; ++step) {
    if (step == tc.steps * 3 / 4) opt.set_lr(tc.lr * 0.3);
    ad::Tape t;
    ad::Var total;
    for (int b = 0; b < tc.batch; ++b) {
      const LatentExample& ex = data[pick(rng)];
      const int ts = tdist(rng);
      const Matrix eps = randn(ex.z0.rows(), ex.z0.cols(), rng);
      const int content = drop(rng) ? kNullContent : ex.content;
      ad::Var pred = denoise_on_tape(t, ps, cfg, t.constant(forward_diffuse(ex.z0, ts, eps, sched)), ts, content, {});
      ad::Var l = ad::mean_square(t, ad::sub(t, pred, t.constant(eps)));
      total = total.valid() ? ad::add(t, total, l) : l;
    }
    total = ad::scale(t, total, 1.0 / tc.batch);
    t.backward(total);
    opt.step(ps, t.param_grads(), [](const std::string& n) { return !is_style_branch(n); });
    log.push_back(t.value(total)(0, 0));
  }
  ps.round_to_f32();
  return log;
}

}  // namespace protostyle
