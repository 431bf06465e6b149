#pragma once

// Prototype contrastive losses with closed-form gradients on the features.
// Prototypes enter as constants; only the feature side receives gradient.

#include "protostyle/prototype_bank.hpp"

#include <string>
#include <vector>

namespace protostyle {

enum class Metric { cosine, l1, l2 };
enum class LossVariant { contrastive, entropy };

inline Metric parse_metric(const std::string& s) {
  if (s == "cosine" || s == "cos") return Metric::cosine;
  if (s == "l1" || s == "L1") return Metric::l1;
  if (s == "l2" || s == "L2") return Metric::l2;
  throw ConfigError("metric", "unknown metric '" + s + "' (cosine|l1|l2)");
}

inline std::string metric_name(Metric m) {
  switch (m) {
    case Metric::cosine: return "cosine";
    case Metric::l1: return "l1";
    default: return "l2";
  }
}

inline LossVariant parse_variant(const std::string& s) {
  if (s == "contrastive") return LossVariant::contrastive;
  if (s == "entropy") return LossVariant::entropy;
  throw ConfigError("variant", "unknown loss variant '" + s + "' (contrastive|entropy)");
}

inline std::string variant_name(LossVariant v) { return v == LossVariant::contrastive ? "contrastive" : "entropy"; }

struct StyleLossConfig {
  double tau = 0.05;
  double beta_same = 5.0;
  Metric metric = Metric::cosine;
  LossVariant variant = LossVariant::contrastive;
  bool use_inter = true;
  bool use_intra = true;

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("tau", "must be > 0");
    if (!(beta_same >= 1.0)) throw ConfigError("beta_same", "must be >= 1");
  }
};

struct LossGrad {
  double loss = 0.0;
  RowVector grad;  // d loss / d f
};

// Distance on normalized vectors and its gradient with respect to the raw f.
// cosine: 1 - cos; l1: |f^ - p^|_1; l2: |f^ - p^|_2. sign(0) = 0 at kinks.
inline LossGrad metric_distance(const RowVector& f, const RowVector& p, Metric metric) {
  const double nf = f.norm();
  const double np = p.norm();
  if (nf == 0.0 || np == 0.0) throw PreconditionError("distance to a zero vector");
  const RowVector fh = f / nf;
  const RowVector ph = p / np;
  RowVector g_hat;  // gradient with respect to f^
  LossGrad out;
  switch (metric) {
    case Metric::cosine:
      out.loss = 1.0 - fh.dot(ph);
      g_hat = -ph;
      break;
    case Metric::l1: {
      const RowVector diff = fh - ph;
      out.loss = diff.cwiseAbs().sum();
      g_hat = diff.unaryExpr([](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
      break;
    }
    case Metric::l2: {
      const RowVector diff = fh - ph;
      out.loss = diff.norm();
      g_hat = out.loss > 0.0 ? RowVector(diff / out.loss) : RowVector(RowVector::Zero(f.size()));
      break;
    }
  }
  // d f^ / d f = (I - f^ f^T) / |f|
  out.grad = (g_hat - fh * g_hat.dot(fh)) / nf;
  return out;
}

inline double stable_lse(const Vector& x) {
  const double m = x.maxCoeff();
  return m + std::log((x.array() - m).exp().sum());
}

// -log softmax(-d)_own with d_s = min_k dist(f, p_s^k); ties pick the lowest k.
inline LossGrad inter_style_loss(const RowVector& f, const PrototypeBank& bank, int own_style, Level level,
                                 const StyleLossConfig& cfg) {
  if (bank.styles < 1) throw PreconditionError("empty prototype bank");
  bank.check_style(own_style);
  if (!f.allFinite()) throw PreconditionError("feature must be finite");
  const int S = bank.styles;
  Vector d(S);
  std::vector<RowVector> dgrad(static_cast<size_t>(S));
  for (int s = 0; s < S; ++s) {
    const Matrix& protos = bank.level(s, level);
    double best = std::numeric_limits<double>::infinity();
    for (Index k = 0; k < protos.rows(); ++k) {
      LossGrad lg = metric_distance(f, protos.row(k), cfg.metric);
      if (lg.loss < best) {
        best = lg.loss;
        dgrad[static_cast<size_t>(s)] = std::move(lg.grad);
      }
    }
    d(s) = best;
  }
  const Vector neg = -d;
  const double lse = stable_lse(neg);
  LossGrad out;
  out.loss = d(own_style) + lse;
  if (S == 1) out.loss = 0.0;
  out.grad = RowVector::Zero(f.size());
  for (int s = 0; s < S; ++s) {
    const double q = std::exp(neg(s) - lse);
    const double coef = (s == own_style ? 1.0 : 0.0) - q;
    if (coef != 0.0) out.grad += coef * dgrad[static_cast<size_t>(s)];
  }
  return out;
}

struct PrototypeRef {
  int style = 0;
  int index = 0;
};

// InfoNCE against every prototype of the level; same-style negatives weighted by beta_same.
inline LossGrad intra_style_loss(const RowVector& f, PrototypeRef positive, const PrototypeBank& bank, Level level,
                                 const StyleLossConfig& cfg) {
  cfg.validate();
  if (positive.style < 0 || positive.style >= bank.styles || positive.index < 0 ||
      positive.index >= bank.level(positive.style, level).rows())
    throw PreconditionError("positive prototype (" + std::to_string(positive.style) + ", " +
                            std::to_string(positive.index) + ") is not in the bank");
  if (!f.allFinite()) throw PreconditionError("feature must be finite");
  std::vector<double> logits;
  std::vector<RowVector> grads;  // d logit / d f
  int pos_slot = -1;
  for (int s = 0; s < bank.styles; ++s) {
    const Matrix& protos = bank.level(s, level);
    for (Index k = 0; k < protos.rows(); ++k) {
      LossGrad lg = metric_distance(f, protos.row(k), cfg.metric);
      const bool is_pos = s == positive.style && k == positive.index;
      const double sim = 1.0 - lg.loss;
      double logit = sim / cfg.tau;
      if (!is_pos && s == positive.style) logit += std::log(cfg.beta_same);
      if (is_pos) pos_slot = static_cast<int>(logits.size());
      logits.push_back(logit);
      grads.push_back(-lg.grad / cfg.tau);
    }
  }
  LossGrad out;
  out.grad = RowVector::Zero(f.size());
  if (logits.size() == 1) return out;  // no negatives
  const Vector z = Eigen::Map<const Vector>(logits.data(), static_cast<Index>(logits.size()));
  const double lse = stable_lse(z);
  out.loss = lse - z(pos_slot);
  for (size_t j = 0; j < logits.size(); ++j) {
    const double w = std::exp(z(static_cast<Index>(j)) - lse) - (static_cast<int>(j) == pos_slot ? 1.0 : 0.0);
    out.grad += w * grads[j];
  }
  return out;
}

struct StylePositives {
  int global = 0;
  std::vector<int> local;  // one per f_l row
};

struct StyleLossResult {
  double total = 0.0;
  double global_inter = 0.0;
  double global_intra = 0.0;
  double local_inter = 0.0;
  double local_intra = 0.0;
  RowVector grad_fg;
  Matrix grad_fl;
};

// Global term on f_g plus the local term averaged over the rows of f_l.
inline StyleLossResult style_loss(const RowVector& f_g, const Matrix& f_l, const PrototypeBank& bank, int own_style,
                                  const StylePositives& positives, const StyleLossConfig& cfg) {
  cfg.validate();
  if (static_cast<Index>(positives.local.size()) != f_l.rows())
    throw PreconditionError("need one local positive per segment");
  StyleLossResult r;
  r.grad_fg = RowVector::Zero(f_g.size());
  r.grad_fl = Matrix::Zero(f_l.rows(), f_l.cols());
  if (cfg.use_inter) {
    LossGrad g = inter_style_loss(f_g, bank, own_style, Level::global, cfg);
    r.global_inter = g.loss;
    r.grad_fg += g.grad;
  }
  if (cfg.use_intra) {
    LossGrad g = intra_style_loss(f_g, {own_style, positives.global}, bank, Level::global, cfg);
    r.global_intra = g.loss;
    r.grad_fg += g.grad;
  }
  const double inv_rows = f_l.rows() > 0 ? 1.0 / static_cast<double>(f_l.rows()) : 0.0;
  for (Index i = 0; i < f_l.rows(); ++i) {
    const RowVector row = f_l.row(i);
    if (cfg.use_inter) {
      LossGrad g = inter_style_loss(row, bank, own_style, Level::local, cfg);
      r.local_inter += g.loss * inv_rows;
      r.grad_fl.row(i) += g.grad * inv_rows;
    }
    if (cfg.use_intra) {
      LossGrad g = intra_style_loss(row, {own_style, positives.local[static_cast<size_t>(i)]}, bank, Level::local, cfg);
      r.local_intra += g.loss * inv_rows;
      r.grad_fl.row(i) += g.grad * inv_rows;
    }
  }
  r.total = r.global_inter + r.global_intra + r.local_inter + r.local_intra;
  return r;
}

// ---- cross-entropy ablation -------------------------------------------------------

struct EntropyLossGrad {
  double loss = 0.0;
  RowVector grad_f;
  Matrix grad_w;     // d' x S
  RowVector grad_b;  // S
};

// Softmax cross-entropy of a linear head: logits = f W + b.
inline EntropyLossGrad entropy_variant_loss(const RowVector& f, const Matrix& W, const RowVector& b, int own_style) {
  require_shape(W.rows() == f.size() && W.cols() == b.size(), "entropy head shape mismatch");
  if (own_style < 0 || own_style >= W.cols()) throw PreconditionError("style label outside head");
  const RowVector logits = f * W + b;
  const double lse = stable_lse(logits.transpose());
  EntropyLossGrad out;
  out.loss = lse - logits(own_style);
  RowVector delta = (logits.array() - lse).exp().matrix();
  delta(own_style) -= 1.0;
  out.grad_f = delta * W.transpose();
  out.grad_w = f.transpose() * delta;
  out.grad_b = delta;
  return out;
}

struct EntropyStyleResult {
  double total = 0.0;
  RowVector grad_fg;
  Matrix grad_fl;
  Matrix grad_w_global, grad_w_local;
  RowVector grad_b_global, grad_b_local;
};

// Cross-entropy on f_g plus the average over f_l rows, with separate heads.
inline EntropyStyleResult entropy_style_loss(const RowVector& f_g, const Matrix& f_l, const Matrix& w_global,
                                             const RowVector& b_global, const Matrix& w_local, const RowVector& b_local,
                                             int own_style) {
  EntropyStyleResult r;
  EntropyLossGrad g = entropy_variant_loss(f_g, w_global, b_global, own_style);
  r.total = g.loss;
  r.grad_fg = g.grad_f;
  r.grad_w_global = g.grad_w;
  r.grad_b_global = g.grad_b;
  r.grad_fl = Matrix::Zero(f_l.rows(), f_l.cols());
  r.grad_w_local = Matrix::Zero(w_local.rows(), w_local.cols());
  r.grad_b_local = RowVector::Zero(b_local.size());
  const double inv = f_l.rows() > 0 ? 1.0 / static_cast<double>(f_l.rows()) : 0.0;
  for (Index i = 0; i < f_l.rows(); ++i) {
    EntropyLossGrad gl = entropy_variant_loss(f_l.row(i), w_local, b_local, own_style);
    r.total += gl.loss * inv;
    r.grad_fl.row(i) = gl.grad_f * inv;
    r.grad_w_local += gl.grad_w * inv;
    r.grad_b_local += gl.grad_b * inv;
  }
  return r;
}

}  // namespace protostyle
