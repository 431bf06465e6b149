#pragma once

// Transformer-style sequence encoder producing per-frame features f_m and the
// mean-pooled global (f_g) and windowed local (f_l) style features.

#include "protostyle/autodiff.hpp"
#include "protostyle/corpus.hpp"
#include "protostyle/params.hpp"

#include <string>

namespace protostyle {

struct EncoderConfig {
  int in_channels = 8;    // D
  int width = 64;         // d'
  int layers = 2;
  int mlp_hidden = 128;
  int window = 8;         // w
  bool temporal_mixing = true;  // false: attention and positional encoding are skipped

  void validate() const {
    if (in_channels < 1) throw ConfigError("in_channels", "must be >= 1");
    if (width < 1) throw ConfigError("encoder_width", "must be >= 1");
    if (layers < 0) throw ConfigError("encoder_layers", "must be >= 0");
    if (mlp_hidden < 1) throw ConfigError("encoder_mlp_hidden", "must be >= 1");
    if (window < 1) throw ConfigError("window", "must be >= 1");
  }
};

struct StyleFeature {
  Matrix f_m;   // L x d'
  RowVector f_g;  // d'
  Matrix f_l;   // L_w x d'
  int window = 1;

  Index segments() const { return f_l.rows(); }

  // (L_w + 1) x d' style tokens: f_g followed by the rows of f_l.
  Matrix tokens() const {
    Matrix out(f_l.rows() + 1, f_l.cols());
    out << f_g, f_l;
    return out;
  }
};

struct EncoderVars {
  ad::Var f_m;
  ad::Var f_g;
  ad::Var f_l;
};

inline std::string enc_layer(int i, const char* leaf) { return "enc.l" + std::to_string(i) + "." + leaf; }

inline ParamSet init_encoder_params(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamSet p;
  const int d = cfg.width;
  auto glorot = [&](int fan_in, int fan_out) { return randn(fan_in, fan_out, rng, 1.0 / std::sqrt(fan_in)); };
  p.set("enc.in.w", glorot(cfg.in_channels, d));
  p.set("enc.in.b", Matrix::Zero(1, d));
  for (int i = 0; i < cfg.layers; ++i) {
    p.set(enc_layer(i, "wq"), glorot(d, d));
    p.set(enc_layer(i, "wk"), glorot(d, d));
    p.set(enc_layer(i, "wv"), glorot(d, d));
    p.set(enc_layer(i, "wo"), glorot(d, d) * 0.5);
    p.set(enc_layer(i, "mlp.w1"), glorot(d, cfg.mlp_hidden));
    p.set(enc_layer(i, "mlp.b1"), Matrix::Zero(1, cfg.mlp_hidden));
    p.set(enc_layer(i, "mlp.w2"), glorot(cfg.mlp_hidden, d) * 0.5);
    p.set(enc_layer(i, "mlp.b2"), Matrix::Zero(1, d));
  }
  return p;
}

inline Matrix sinusoidal_positions(Index length, Index width) {
  Matrix pe(length, width);
  for (Index pos = 0; pos < length; ++pos)
    for (Index j = 0; j < width; ++j) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (j / 2)) / static_cast<double>(width));
      pe(pos, j) = (j % 2 == 0) ? std::sin(pos * rate) : std::cos(pos * rate);
    }
  return pe;
}

// Builds the encoder graph on `t` for an L x D frame variable.
inline EncoderVars encode_on_tape(ad::Tape& t, const ParamSet& ps, const EncoderConfig& cfg, ad::Var frames) {
  const Index rows = t.value(frames).rows();
  const Index cols = t.value(frames).cols();
  require_shape(cols == cfg.in_channels,
                "encoder expects " + std::to_string(cfg.in_channels) + " channels, got " + std::to_string(cols));
  require_shape(rows > 0 && rows % cfg.window == 0,
                "sequence length " + std::to_string(rows) + " is not a multiple of window " + std::to_string(cfg.window));
  using namespace ad;
  Var h = linear(t, frames, P(t, ps, "enc.in.w"), P(t, ps, "enc.in.b"));
  if (cfg.temporal_mixing && cfg.layers > 0) h = add(t, h, t.constant(sinusoidal_positions(rows, cfg.width)));
  for (int i = 0; i < cfg.layers; ++i) {
    if (cfg.temporal_mixing) {
      Var n = layer_norm_rows(t, h);
      Var q = matmul(t, n, P(t, ps, enc_layer(i, "wq")));
      Var k = matmul(t, n, P(t, ps, enc_layer(i, "wk")));
      Var v = matmul(t, n, P(t, ps, enc_layer(i, "wv")));
      Var a = attention(t, q, k, v, cfg.width);
      h = add(t, h, matmul(t, a, P(t, ps, enc_layer(i, "wo"))));
    }
    Var n = layer_norm_rows(t, h);
    Var m = silu(t, linear(t, n, P(t, ps, enc_layer(i, "mlp.w1")), P(t, ps, enc_layer(i, "mlp.b1"))));
    h = add(t, h, linear(t, m, P(t, ps, enc_layer(i, "mlp.w2")), P(t, ps, enc_layer(i, "mlp.b2"))));
  }
  EncoderVars out;
  out.f_m = h;
  out.f_g = mean_rows(t, h);
  out.f_l = segment_mean(t, h, cfg.window);
  return out;
}

inline StyleFeature feature_values(const ad::Tape& t, const EncoderVars& v, int window) {
  StyleFeature f;
  f.f_m = t.value(v.f_m);
  f.f_g = t.value(v.f_g).row(0);
  f.f_l = t.value(v.f_l);
  f.window = window;
  return f;
}

inline StyleFeature encode(const ParamSet& ps, const EncoderConfig& cfg, const Matrix& frames) {
  ad::Tape t;
  const EncoderVars v = encode_on_tape(t, ps, cfg, t.constant(frames));
  return feature_values(t, v, cfg.window);
}

inline StyleFeature encode(const ParamSet& ps, const EncoderConfig& cfg, const MotionSequence& seq) {
  return encode(ps, cfg, seq.frames);
}

// Parameter gradients given upstream gradients on f_g (1 x d') and f_l (L_w x d').
inline ad::GradMap encode_backward(const ParamSet& ps, const EncoderConfig& cfg, const Matrix& frames,
                                   const RowVector& grad_fg, const Matrix& grad_fl) {
  if (!grad_fg.allFinite() || !grad_fl.allFinite()) throw PreconditionError("upstream encoder gradients must be finite");
  ad::Tape t;
  const EncoderVars v = encode_on_tape(t, ps, cfg, t.constant(frames));
  require_shape(grad_fg.size() == t.value(v.f_g).cols(), "grad_fg has wrong width");
  require_shape(grad_fl.rows() == t.value(v.f_l).rows() && grad_fl.cols() == t.value(v.f_l).cols(),
                "grad_fl shape " + shape_str(grad_fl) + " vs f_l " + shape_str(t.value(v.f_l)));
  t.seed(v.f_g, Matrix(grad_fg));
  t.seed(v.f_l, grad_fl);
  t.run_backward();
  return t.param_grads();
}

}  // namespace protostyle
