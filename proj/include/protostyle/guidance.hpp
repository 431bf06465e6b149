#pragma once

// Inference: DDIM sampling with dual classifier-free guidance, classifier and
// prototype guidance through decode and encode, and SDEdit-style transfer.

#include "protostyle/diffusion.hpp"
#include "protostyle/latent_codec.hpp"
#include "protostyle/prototype_bank.hpp"
#include "protostyle/style_encoder.hpp"

#include <optional>
#include <vector>

namespace protostyle {

struct GuidanceConfig {
  double w_c = 7.5;
  double w_s = 1.0;
  double gamma = 3.0;
  int guidance_t_max = 300;
  double gamma_g = 100.0;
  int prototype_t_max = 1000;  // prototype guidance applies for t < prototype_t_max
  int ddim_steps = 50;
  int transfer_T_prime = 500;
  double transfer_w_s = 2.25;
  double transfer_gamma = 2.5;
  double clip_z0 = 5.0;  // bound on |z0_hat| inside DDIM steps; 0 disables

  void validate(int T) const {
    if (ddim_steps < 1) throw ConfigError("ddim_steps", "must be >= 1");
    if (ddim_steps > T) throw ConfigError("ddim_steps", "must not exceed diffusion_steps");
    auto finite = [](double v) { return std::isfinite(v); };
    if (!finite(w_c)) throw ConfigError("w_c", "must be finite");
    if (!finite(w_s)) throw ConfigError("w_s", "must be finite");
    if (!finite(gamma)) throw ConfigError("gamma", "must be finite");
    if (!finite(gamma_g)) throw ConfigError("gamma_g", "must be finite");
    if (!finite(transfer_w_s)) throw ConfigError("transfer_w_s", "must be finite");
    if (!finite(transfer_gamma)) throw ConfigError("transfer_gamma", "must be finite");
    if (guidance_t_max < 0 || guidance_t_max > T) throw ConfigError("guidance_t_max", "must lie in [0, T]");
    if (prototype_t_max < 0 || prototype_t_max > T) throw ConfigError("prototype_t_max", "must lie in [0, T]");
    if (transfer_T_prime < 0) throw ConfigError("transfer_T_prime", "must be >= 0");
    if (!(clip_z0 >= 0.0)) throw ConfigError("clip_z0", "must be >= 0");
  }
};

// z0 = (z_t - sqrt(1 - ab) eps) / sqrt(ab)
inline Matrix predict_clean(const Matrix& z_t, int t, const Matrix& eps_hat, const NoiseSchedule& sched) {
  require_shape(z_t.rows() == eps_hat.rows() && z_t.cols() == eps_hat.cols(), "eps_hat shape must match z_t");
  const double ab = sched.at(t);
  if (!(ab > 0.0)) throw PreconditionError("alpha_bar is zero at t = " + std::to_string(t));
  return (z_t - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab);
}

inline Matrix cfg_combine(const Matrix& eps_uu, const Matrix& eps_cu, const Matrix& eps_cs, double w_c, double w_s) {
  require_shape(eps_uu.rows() == eps_cu.rows() && eps_uu.cols() == eps_cu.cols() && eps_cu.rows() == eps_cs.rows() &&
                    eps_cu.cols() == eps_cs.cols(),
                "cfg branches must share a shape");
  // Expanded around the conditional-style branch so w_c = w_s = 1 returns it exactly.
  return eps_cs + (w_c - 1.0) * (eps_cu - eps_uu) + (w_s - 1.0) * (eps_cs - eps_cu);
}

// Read-only view of everything inference needs.
struct Pipeline {
  const ParamSet* codec = nullptr;
  CodecConfig codec_cfg;
  const ParamSet* model = nullptr;  // enc.* and den.*
  EncoderConfig enc;
  DenoiserConfig den;
  const NoiseSchedule* sched = nullptr;
  const PrototypeBank* bank = nullptr;

  void check() const {
    if (!codec || !model || !sched) throw StateError("pipeline is missing a checkpoint");
  }
};

struct GuidanceGrad {
  double value = 0.0;  // G
  Matrix grad;         // dG / dz_t, before any strength factor
};

namespace guidance_detail {

// Tape with z_t as the variable and the decoded clean estimate as a node; eps is held fixed.
struct CleanGraph {
  ad::Tape t;
  ad::Var z;
  ad::Var frames;
};

inline void build_clean_graph(CleanGraph& g, const Pipeline& p, const Matrix& z_t, int t, const Matrix& eps_hat) {
  const double ab = p.sched->at(t);
  if (!(ab > 0.0)) throw PreconditionError("alpha_bar is zero at t = " + std::to_string(t));
  g.t.set_params_trainable(false);
  g.z = g.t.variable(z_t);
  ad::Var z0 = ad::scale(g.t, ad::sub(g.t, g.z, g.t.constant(std::sqrt(1.0 - ab) * eps_hat)), 1.0 / std::sqrt(ab));
  g.frames = decode_standardized_on_tape(g.t, *p.codec, p.codec_cfg, z0);
}

}  // namespace guidance_detail

// G = sum |f(D(z0_hat)) - f_ref| over the (L_w + 1) x d' style tokens; zero at or above the cutoff.
inline GuidanceGrad classifier_guidance_grad(const Pipeline& p, const Matrix& z_t, int t, const Matrix& eps_hat,
                                             const Matrix& ref_tokens, int t_max) {
  p.check();
  GuidanceGrad out;
  out.grad = Matrix::Zero(z_t.rows(), z_t.cols());
  if (t >= t_max) return out;
  guidance_detail::CleanGraph g;
  guidance_detail::build_clean_graph(g, p, z_t, t, eps_hat);
  EncoderVars ev = encode_on_tape(g.t, *p.model, p.enc, g.frames);
  ad::Var tokens = ad::concat_rows(g.t, ev.f_g, ev.f_l);
  require_shape(g.t.value(tokens).rows() == ref_tokens.rows() && g.t.value(tokens).cols() == ref_tokens.cols(),
                "reference style tokens have shape " + shape_str(ref_tokens));
  ad::Var G = ad::sum_abs(g.t, ad::sub(g.t, tokens, g.t.constant(ref_tokens)));
  g.t.backward(G);
  out.value = g.t.value(G)(0, 0);
  out.grad = g.t.grad(g.z);
  return out;
}

struct PrototypeTarget {
  std::optional<RowVector> global;  // G_p = 1 - cos(f_g, p)
  std::vector<RowVector> local;     // G_l = sum_i 1 - cos(f_l,i, p_i)
};

// Gradient of G_p (global target) or G_l (local targets), scaled by gamma_g.
inline GuidanceGrad prototype_guidance_grad(const Pipeline& p, const Matrix& z_t, int t, const Matrix& eps_hat,
                                            const PrototypeTarget& target, double gamma_g) {
  p.check();
  if (!target.global && target.local.empty()) throw PreconditionError("prototype guidance needs a target");
  if (p.bank && !p.bank->frozen) throw StateError("prototype guidance requires a frozen bank");
  guidance_detail::CleanGraph g;
  guidance_detail::build_clean_graph(g, p, z_t, t, eps_hat);
  EncoderVars ev = encode_on_tape(g.t, *p.model, p.enc, g.frames);
  ad::Var G;
  if (target.global) {
    G = ad::add_scalar(g.t, ad::scale(g.t, ad::cosine_to(g.t, ev.f_g, *target.global), -1.0), 1.0);
  } else {
    const Index segs = g.t.value(ev.f_l).rows();
    if (static_cast<Index>(target.local.size()) != segs)
      throw PreconditionError("need " + std::to_string(segs) + " local targets, got " + std::to_string(target.local.size()));
    for (Index i = 0; i < segs; ++i) {
      ad::Var gi = ad::add_scalar(
          g.t, ad::scale(g.t, ad::cosine_to(g.t, ad::slice_rows(g.t, ev.f_l, i, 1), target.local[static_cast<size_t>(i)]), -1.0),
          1.0);
      G = G.valid() ? ad::add(g.t, G, gi) : gi;
    }
  }
  g.t.backward(G);
  GuidanceGrad out;
  out.value = g.t.value(G)(0, 0);
  out.grad = gamma_g * g.t.grad(g.z);
  return out;
}

// Style tokens (L_w + 1) x d' standing in for an encoded reference of prototype (style, k).
inline Matrix prototype_style_tokens(const PrototypeBank& bank, int style, int k) {
  bank.check_style(style);
  if (k < 0 || k >= bank.k_global) throw PreconditionError("global prototype index " + std::to_string(k) + " out of range");
  if (bank.local_defaults.empty() || bank.global_norm.empty())
    throw StateError("bank has no sampling statistics; finalize it after training");
  const auto& defaults = bank.local_defaults[static_cast<size_t>(style)][static_cast<size_t>(k)];
  Matrix tokens(static_cast<Index>(defaults.size()) + 1, bank.dim);
  tokens.row(0) = bank.global[static_cast<size_t>(style)].row(k) * bank.global_norm[static_cast<size_t>(style)];
  for (size_t i = 0; i < defaults.size(); ++i)
    tokens.row(static_cast<Index>(i) + 1) =
        bank.local[static_cast<size_t>(style)].row(defaults[i]) * bank.local_norm[static_cast<size_t>(style)];
  return tokens;
}

inline PrototypeTarget global_target(const PrototypeBank& bank, int style, int k) {
  bank.check_style(style);
  if (k < 0 || k >= bank.k_global) throw PreconditionError("global prototype index " + std::to_string(k) + " out of range");
  PrototypeTarget t;
  t.global = bank.global[static_cast<size_t>(style)].row(k);
  return t;
}

inline PrototypeTarget local_target(const PrototypeBank& bank, int style, const std::vector<int>& indices) {
  bank.check_style(style);
  if (indices.empty()) throw PreconditionError("local target list is empty");
  PrototypeTarget t;
  for (int k : indices) {
    if (k < 0 || k >= bank.k_local) throw PreconditionError("local prototype index " + std::to_string(k) + " out of range");
    t.local.push_back(bank.local[static_cast<size_t>(style)].row(k));
  }
  return t;
}

struct SampleRequest {
  int content = kNullContent;
  std::optional<Matrix> style_tokens;    // conditional branch; none means the null style
  std::optional<Matrix> classifier_ref;  // reference tokens for classifier guidance
  std::optional<PrototypeTarget> prototype;
};

struct SampleResult {
  Matrix z0;      // standardized latent
  Matrix frames;  // decoded L x D
};

// Descending DDIM visit list: T, T - T/steps, ..., down to about T/steps.
inline std::vector<int> ddim_timesteps(int T, int steps) {
  if (steps < 1 || steps > T) throw ConfigError("ddim_steps", "must lie in [1, T]");
  std::vector<int> ts;
  for (int i = steps; i >= 1; --i) ts.push_back(static_cast<int>(std::lround(static_cast<double>(i) * T / steps)));
  return ts;
}

namespace guidance_detail {

struct Strengths {
  double w_c = 0.0;
  double w_s = 0.0;
  double gamma = 0.0;
  double gamma_g = 0.0;
  int t_max = 0;
  int prototype_t_max = 0;
  double clip_z0 = 0.0;
};

inline Matrix guided_eps(const Pipeline& p, const Matrix& z, int t, const SampleRequest& req, const Strengths& k) {
  const Matrix uu = denoise(*p.model, p.den, z, t, kNullContent, std::nullopt);
  const Matrix cu = req.content == kNullContent ? uu : denoise(*p.model, p.den, z, t, req.content, std::nullopt);
  const Matrix cs = req.style_tokens ? denoise(*p.model, p.den, z, t, req.content, req.style_tokens) : cu;
  Matrix eps = cfg_combine(uu, cu, cs, k.w_c, k.w_s);
  const Matrix base = eps;
  if (k.gamma != 0.0 && req.classifier_ref && t < k.t_max)
    eps += k.gamma * classifier_guidance_grad(p, z, t, base, *req.classifier_ref, k.t_max).grad;
  if (k.gamma_g != 0.0 && req.prototype && t < k.prototype_t_max)
    eps += prototype_guidance_grad(p, z, t, base, *req.prototype, k.gamma_g).grad;
  return eps;
}

// With clipping, eps is re-derived from the clipped z0 so the step stays on the DDIM path.
inline Matrix ddim_loop(const Pipeline& p, Matrix z, const std::vector<int>& ts, const SampleRequest& req,
                        const Strengths& k) {
  const double clip_z0 = k.clip_z0;
  for (size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    Matrix eps = guided_eps(p, z, t, req, k);
    Matrix z0 = predict_clean(z, t, eps, *p.sched);
    if (clip_z0 > 0.0 && z0.cwiseAbs().maxCoeff() > clip_z0) {
      z0 = z0.cwiseMax(-clip_z0).cwiseMin(clip_z0);
      const double ab = p.sched->at(t);
      if (ab < 1.0) eps = (z - std::sqrt(ab) * z0) / std::sqrt(1.0 - ab);
    }
    const double ab_prev = p.sched->at(t_prev);
    z = std::sqrt(ab_prev) * z0 + std::sqrt(1.0 - ab_prev) * eps;
  }
  return z;
}

}  // namespace guidance_detail

// Deterministic DDIM (eta = 0) from z_T ~ N(0, I) drawn from `seed`.
inline SampleResult sample(const Pipeline& p, const SampleRequest& req, const GuidanceConfig& g, std::uint64_t seed) {
  p.check();
  g.validate(p.sched->T);
  Rng rng(seed);
  Matrix z = randn(p.den.tokens, p.den.token_width, rng);
  SampleResult out;
  const guidance_detail::Strengths k{g.w_c, g.w_s, g.gamma, g.gamma_g, g.guidance_t_max, g.prototype_t_max, g.clip_z0};
  out.z0 = guidance_detail::ddim_loop(p, std::move(z), ddim_timesteps(p.sched->T, g.ddim_steps), req, k);
  out.frames = decode_standardized(*p.codec, p.codec_cfg, out.z0);
  return out;
}

// Partially noises the content latent to T' and denoises with style-only
// guidance toward the reference style sequence.
inline SampleResult style_transfer(const Pipeline& p, const Matrix& content_frames, const Matrix& style_frames,
                                   const GuidanceConfig& g, std::uint64_t seed) {
  p.check();
  g.validate(p.sched->T);
  if (g.transfer_T_prime > p.sched->T) throw PreconditionError("T' exceeds the schedule length");
  const Matrix z_c = encode_standardized(*p.codec, p.codec_cfg, content_frames);
  SampleResult out;
  if (g.transfer_T_prime == 0) {
    out.z0 = z_c;
    out.frames = decode_standardized(*p.codec, p.codec_cfg, z_c);
    return out;
  }
  Rng rng(seed);
  const Matrix noise = randn(z_c.rows(), z_c.cols(), rng);
  Matrix z = forward_diffuse(z_c, g.transfer_T_prime, noise, *p.sched);
  const int steps = std::max(1, static_cast<int>(std::lround(static_cast<double>(g.ddim_steps) * g.transfer_T_prime / p.sched->T)));
  std::vector<int> ts;
  for (int i = steps; i >= 1; --i)
    ts.push_back(static_cast<int>(std::lround(static_cast<double>(i) * g.transfer_T_prime / steps)));
  const Matrix ref = encode(*p.model, p.enc, style_frames).tokens();
  SampleRequest req;
  req.content = kNullContent;
  req.style_tokens = ref;
  req.classifier_ref = ref;
  const guidance_detail::Strengths k{0.0, g.transfer_w_s, g.transfer_gamma, 0.0, g.guidance_t_max, 0, g.clip_z0};
  out.z0 = guidance_detail::ddim_loop(p, std::move(z), ts, req, k);
  out.frames = decode_standardized(*p.codec, p.codec_cfg, out.z0);
  return out;
}

}  // namespace protostyle
