#pragma once

// Sequence VAE: flattened L x D frames -> n_z latent tokens of width d_z and back.
// The codec is trained first and then frozen; diffusion runs on standardized
// latents (mean - shift) / scale with statistics stored alongside the weights.

#include "protostyle/autodiff.hpp"
#include "protostyle/corpus.hpp"
#include "protostyle/params.hpp"

#include <vector>

namespace protostyle {

struct CodecConfig {
  int length = 64;
  int channels = 8;
  int tokens = 5;        // n_z
  int token_width = 32;  // d_z
  int hidden = 256;

  int latent_size() const { return tokens * token_width; }
  int frame_size() const { return length * channels; }

  void validate() const {
    if (length < 1 || channels < 1) throw ConfigError("codec_shape", "length and channels must be >= 1");
    if (tokens < 1) throw ConfigError("latent_tokens", "must be >= 1");
    if (token_width < 1) throw ConfigError("latent_width", "must be >= 1");
    if (hidden < 1) throw ConfigError("codec_hidden", "must be >= 1");
  }
};

struct CodecTrainConfig {
  double kl_weight = 1e-4;
  double lr = 1e-3;
  int steps = 3000;
  int batch = 32;
  std::uint64_t seed = 11;

  void validate() const {
    if (kl_weight < 0.0) throw ConfigError("kl_weight", "must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("codec_lr", "must be > 0");
    if (steps < 0) throw ConfigError("codec_steps", "must be >= 0");
    if (batch < 1) throw ConfigError("codec_batch", "must be >= 1");
  }
};

struct LatentPair {
  Matrix mean;    // n_z x d_z
  Matrix logvar;  // n_z x d_z
};

inline ParamSet init_codec_params(const CodecConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamSet p;
  const int in = cfg.frame_size();
  const int h = cfg.hidden;
  const int z = cfg.latent_size();
  auto glorot = [&](int fan_in, int fan_out) { return randn(fan_in, fan_out, rng, 1.0 / std::sqrt(fan_in)); };
  p.set("codec.enc.w1", glorot(in, h));
  p.set("codec.enc.b1", Matrix::Zero(1, h));
  p.set("codec.enc.w_mu", glorot(h, z));
  p.set("codec.enc.b_mu", Matrix::Zero(1, z));
  p.set("codec.enc.w_lv", glorot(h, z) * 0.1);
  p.set("codec.enc.b_lv", Matrix::Zero(1, z));
  p.set("codec.dec.w1", glorot(z, h));
  p.set("codec.dec.b1", Matrix::Zero(1, h));
  p.set("codec.dec.w2", glorot(h, in));
  p.set("codec.dec.b2", Matrix::Zero(1, in));
  p.set("codec.norm.shift", Matrix::Zero(1, z));
  p.set("codec.norm.scale", Matrix::Ones(1, z));
  return p;
}

struct CodecVars {
  ad::Var mean;    // B x (n_z d_z), one flattened row per sample
  ad::Var logvar;  // B x (n_z d_z)
};

// Encoder over a batch of flattened sequences (B x L*D).
inline CodecVars codec_encode_on_tape(ad::Tape& t, const ParamSet& ps, ad::Var flat) {
  using namespace ad;
  Var h = silu(t, linear(t, flat, P(t, ps, "codec.enc.w1"), P(t, ps, "codec.enc.b1")));
  CodecVars out;
  out.mean = linear(t, h, P(t, ps, "codec.enc.w_mu"), P(t, ps, "codec.enc.b_mu"));
  out.logvar = linear(t, h, P(t, ps, "codec.enc.w_lv"), P(t, ps, "codec.enc.b_lv"));
  return out;
}

// Decoder over a batch of flattened latents (B x n_z*d_z) -> B x L*D.
inline ad::Var codec_decode_flat_on_tape(ad::Tape& t, const ParamSet& ps, ad::Var z_flat) {
  using namespace ad;
  Var h = silu(t, linear(t, z_flat, P(t, ps, "codec.dec.w1"), P(t, ps, "codec.dec.b1")));
  return linear(t, h, P(t, ps, "codec.dec.w2"), P(t, ps, "codec.dec.b2"));
}

// Decodes one standardized latent (n_z x d_z) into L x D frames.
inline ad::Var decode_standardized_on_tape(ad::Tape& t, const ParamSet& ps, const CodecConfig& cfg, ad::Var z_std) {
  using namespace ad;
  require_shape(t.value(z_std).rows() == cfg.tokens && t.value(z_std).cols() == cfg.token_width,
                "latent shape " + shape_str(t.value(z_std)) + " vs codec " + std::to_string(cfg.tokens) + "x" +
                    std::to_string(cfg.token_width));
  Var flat = reshape(t, z_std, 1, cfg.latent_size());
  Var raw = add_row(t, mul_row(t, flat, t.param("codec.norm.scale", ps.at("codec.norm.scale"), false)),
                    t.param("codec.norm.shift", ps.at("codec.norm.shift"), false));
  Var x = codec_decode_flat_on_tape(t, ps, raw);
  return reshape(t, x, cfg.length, cfg.channels);
}

inline LatentPair vae_encode(const ParamSet& ps, const CodecConfig& cfg, const Matrix& frames) {
  require_shape(frames.rows() == cfg.length && frames.cols() == cfg.channels,
                "codec expects " + std::to_string(cfg.length) + "x" + std::to_string(cfg.channels) + " frames, got " +
                    shape_str(frames));
  ad::Tape t;
  const CodecVars v = codec_encode_on_tape(t, ps, t.constant(Matrix(flatten_rows(frames))));
  return {unflatten_rows(t.value(v.mean).row(0), cfg.tokens, cfg.token_width),
          unflatten_rows(t.value(v.logvar).row(0), cfg.tokens, cfg.token_width)};
}

// mean + exp(logvar / 2) * noise
inline Matrix sample_latent(const LatentPair& lp, const Matrix& noise) {
  require_shape(noise.rows() == lp.mean.rows() && noise.cols() == lp.mean.cols(), "latent noise shape mismatch");
  return lp.mean + ((lp.logvar.array() * 0.5).exp() * noise.array()).matrix();
}

inline Matrix vae_decode(const ParamSet& ps, const CodecConfig& cfg, const Matrix& z) {
  require_shape(z.rows() == cfg.tokens && z.cols() == cfg.token_width, "latent shape mismatch in decode");
  if (!z.allFinite()) throw PreconditionError("latent must be finite");
  ad::Tape t;
  ad::Var x = codec_decode_flat_on_tape(t, ps, t.constant(Matrix(flatten_rows(z))));
  return unflatten_rows(t.value(x).row(0), cfg.length, cfg.channels);
}

inline Matrix standardize_latent(const ParamSet& ps, const Matrix& mean) {
  const RowVector flat = flatten_rows(mean);
  const RowVector out = (flat - ps.at("codec.norm.shift").row(0)).cwiseQuotient(ps.at("codec.norm.scale").row(0));
  return unflatten_rows(out, mean.rows(), mean.cols());
}

inline Matrix destandardize_latent(const ParamSet& ps, const Matrix& z_std) {
  const RowVector flat = flatten_rows(z_std);
  const RowVector out = flat.cwiseProduct(ps.at("codec.norm.scale").row(0)) + ps.at("codec.norm.shift").row(0);
  return unflatten_rows(out, z_std.rows(), z_std.cols());
}

// Standardized latent of a sequence's encoder mean; the diffusion model's z0.
inline Matrix encode_standardized(const ParamSet& ps, const CodecConfig& cfg, const Matrix& frames) {
  return standardize_latent(ps, vae_encode(ps, cfg, frames).mean);
}

inline Matrix decode_standardized(const ParamSet& ps, const CodecConfig& cfg, const Matrix& z_std) {
  return vae_decode(ps, cfg, destandardize_latent(ps, z_std));
}

// KL(N(mean, exp(logvar)) || N(0, I)) summed over elements.
inline double kl_divergence(const Matrix& mean, const Matrix& logvar) {
  return 0.5 * (mean.array().square() + logvar.array().exp() - 1.0 - logvar.array()).sum();
}

inline double reconstruction_mse(const ParamSet& ps, const CodecConfig& cfg, const std::vector<MotionSequence>& seqs) {
  if (seqs.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& s : seqs) {
    const Matrix rec = vae_decode(ps, cfg, vae_encode(ps, cfg, s.frames).mean);
    sum += (rec - s.frames).squaredNorm() / static_cast<double>(s.frames.size());
  }
  return sum / static_cast<double>(seqs.size());
}

struct CodecTrainResult {
  ParamSet params;
  std::vector<double> loss_log;
  double train_mse = 0.0;
};

// One optimization step on a batch of sequences. With kl_weight == 0 the codec
// trains as a deterministic autoencoder (no latent sampling).
inline double codec_train_step(ParamSet& ps, const CodecConfig& cfg, const CodecTrainConfig& tc, Adam& opt,
                               const std::vector<const MotionSequence*>& batch, Rng& rng) {
  using namespace ad;
  const Index B = static_cast<Index>(batch.size());
  Matrix x(B, cfg.frame_size());
  for (Index i = 0; i < B; ++i) x.row(i) = flatten_rows(batch[static_cast<size_t>(i)]->frames);
  Tape t;
  Var xv = t.constant(x);
  CodecVars enc = codec_encode_on_tape(t, ps, xv);
  Var z = enc.mean;
  Var kl_term;
  if (tc.kl_weight > 0.0) {
    Var noise = t.constant(randn(B, cfg.latent_size(), rng));
    z = add(t, enc.mean, hadamard(t, exp(t, scale(t, enc.logvar, 0.5)), noise));
    // 0.5 * sum(mu^2 + exp(lv) - 1 - lv) / B
    Var kl = add(t, hadamard(t, enc.mean, enc.mean), sub(t, exp(t, enc.logvar), add_scalar(t, enc.logvar, 1.0)));
    kl_term = scale(t, sum_all(t, kl), 0.5 * tc.kl_weight / static_cast<double>(B));
  }
  Var rec = codec_decode_flat_on_tape(t, ps, z);
  Var loss = mean_square(t, sub(t, rec, xv));
  if (kl_term.valid()) loss = add(t, loss, kl_term);
  t.backward(loss);
  auto grads = t.param_grads();
  grads.erase("codec.norm.shift");
  grads.erase("codec.norm.scale");
  opt.step(ps, grads);
  return t.value(loss)(0, 0);
}

// Per-dimension shift and a single global scale so standardized latents are
// zero-mean with unit average variance over the training set.
inline void fit_latent_standardization(ParamSet& ps, const CodecConfig& cfg, const std::vector<MotionSequence>& seqs) {
  const Index z = cfg.latent_size();
  Matrix means(static_cast<Index>(seqs.size()), z);
  for (size_t i = 0; i < seqs.size(); ++i) means.row(static_cast<Index>(i)) = flatten_rows(vae_encode(ps, cfg, seqs[i].frames).mean);
  const RowVector shift = means.colwise().mean();
  const double var = (means.rowwise() - shift).squaredNorm() / static_cast<double>(means.size());
  const double s = std::max(std::sqrt(var), 1e-6);
  ps.set("codec.norm.shift", Matrix(shift));
  ps.set("codec.norm.scale", Matrix::Constant(1, z, s));
}

inline CodecTrainResult train_codec(const std::vector<MotionSequence>& corpus, const CodecConfig& cfg,
                                    const CodecTrainConfig& tc) {
  cfg.validate();
  tc.validate();
  if (corpus.empty()) throw PreconditionError("cannot train codec on an empty corpus");
  Rng rng(tc.seed);
  CodecTrainResult out;
  out.params = init_codec_params(cfg, rng);
  Adam::Options ao;
  ao.lr = tc.lr;
  ao.clip_norm = 5.0;
  Adam opt(ao);
  std::uniform_int_distribution<size_t> pick(0, corpus.size() - 1);
  for (int step = 0; step < tc.steps; ++step) {
    std::vector<const MotionSequence*> batch;
    for (int b = 0; b < tc.batch; ++b) batch.push_back(&corpus[pick(rng)]);
    if (step == tc.steps * 3 / 4) opt.set_lr(tc.lr * 0.3);
    out.loss_log.push_back(codec_train_step(out.params, cfg, tc, opt, batch, rng));
  }
  out.params.round_to_f32();
  fit_latent_standardization(out.params, cfg, corpus);
  out.params.round_to_f32();
  out.train_mse = reconstruction_mse(out.params, cfg, corpus);
  return out;
}

}  // namespace protostyle
