#pragma once

// Central-difference gradient checks shared by the unit tests and the
// acceptance binary. Each check draws a random small instance and compares the
// analytic directional derivative along a direction v with
// (f(x + h v) - f(x - h v)) / 2h, one direction per tensor.

#include "protostyle/guidance.hpp"
#include "protostyle/style_losses.hpp"
#include "protostyle/style_training.hpp"

#include <functional>
#include <string>

namespace gradcheck {

using namespace protostyle;

inline constexpr double kStep = 1e-5;
inline constexpr double kTolerance = 1e-4;

struct Outcome {
  double worst = 0.0;  // worst relative error over all probes
  std::string where;   // tensor of the worst probe
  int probes = 0;
  bool ok() const { return worst < kTolerance; }
};

// |a - n| / max(|a|, |n|, floor). The central difference carries rounding
// noise of about eps |f| / h, so the floor scales with the function value:
// 1e-6 max(1, |f|) keeps that noise an order below the tolerance.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline void record(Outcome& o, double analytic, double numeric, const std::string& where, double f_scale = 0.0) {
  const double e = relative_error(analytic, numeric, 1e-6 * std::max(1.0, std::abs(f_scale)));
  if (o.probes++ == 0 || e >= o.worst) {
    o.worst = e;
    o.where = where;
  }
}

inline void merge(Outcome& into, const Outcome& o) {
  if (o.worst >= into.worst) {
    into.worst = o.worst;
    into.where = o.where;
  }
  into.probes += o.probes;
}

// Random direction tilted toward the analytic gradient, so the directional
// derivative cannot vanish by chance and drown in rounding noise. An error in
// any component of g still shows up through the random part.
inline Matrix probe_direction(const Matrix& g, Rng& rng) {
  Matrix v = randn(g.rows(), g.cols(), rng);
  const double gn = g.norm();
  if (gn > 0.0) v += (2.0 * v.norm() / gn) * g;
  return v;
}

// Probes every tensor in `ps` selected by `pick`.
inline void check_params(Outcome& out, ParamSet& ps, const ad::GradMap& grads, const std::function<double()>& f, Rng& rng,
                         const std::function<bool(const std::string&)>& pick = nullptr) {
  for (auto& [name, m] : ps.tensors()) {
    if (pick && !pick(name)) continue;
    auto it = grads.find(name);
    const Matrix g = it == grads.end() ? Matrix::Zero(m.rows(), m.cols()) : it->second;
    const Matrix v = probe_direction(g, rng);
    const Matrix orig = m;
    m = orig + kStep * v;
    const double fp = f();
    m = orig - kStep * v;
    const double fm = f();
    m = orig;
    record(out, g.cwiseProduct(v).sum(), (fp - fm) / (2.0 * kStep), name, 0.5 * (fp + fm));
  }
}

inline void check_input(Outcome& out, Matrix& x, const Matrix& g, const std::function<double()>& f, Rng& rng,
                        const std::string& name) {
  const Matrix v = probe_direction(g, rng);
  const Matrix orig = x;
  x = orig + kStep * v;
  const double fp = f();
  x = orig - kStep * v;
  const double fm = f();
  x = orig;
  record(out, g.cwiseProduct(v).sum(), (fp - fm) / (2.0 * kStep), name, 0.5 * (fp + fm));
}

// ---- instances ----------------------------------------------------------------

inline EncoderConfig small_encoder(Rng& rng, int channels = 4) {
  EncoderConfig e;
  e.in_channels = channels;
  e.width = 6 + static_cast<int>(rng() % 5);
  e.layers = 1 + static_cast<int>(rng() % 2);
  e.mlp_hidden = 8;
  e.window = 4;
  e.temporal_mixing = rng() % 4 != 0;
  return e;
}

inline Outcome encoder_instance(std::uint64_t seed) {
  Rng rng(seed);
  const EncoderConfig ec = small_encoder(rng);
  ParamSet ps = init_encoder_params(ec, rng);
  const Matrix frames = randn(4 * (2 + static_cast<Index>(rng() % 3)), ec.in_channels, rng);
  const StyleFeature f0 = encode(ps, ec, frames);
  const RowVector gfg = randn(1, ec.width, rng);
  const Matrix gfl = randn(f0.f_l.rows(), ec.width, rng);
  auto f = [&]() {
    const StyleFeature f1 = encode(ps, ec, frames);
    return f1.f_g.dot(gfg) + f1.f_l.cwiseProduct(gfl).sum();
  };
  Outcome out;
  const ad::GradMap grads = encode_backward(ps, ec, frames, gfg, gfl);
  check_params(out, ps, grads, f, rng);
  return out;
}

inline PrototypeBank random_bank(Rng& rng, int styles, int kg, int kl, int dim) {
  PrototypeBank bank;
  bank.styles = styles;
  bank.k_global = kg;
  bank.k_local = kl;
  bank.dim = dim;
  for (int s = 0; s < styles; ++s) {
    bank.global.push_back(normalize_rows(randn(kg, dim, rng)));
    bank.local.push_back(normalize_rows(randn(kl, dim, rng)));
  }
  return bank;
}

inline bool near_kink(const Matrix& features, const PrototypeBank& bank, double margin = 1e-3) {
  const Matrix f = normalize_rows(features);
  for (int s = 0; s < bank.styles; ++s)
    for (const Matrix* p : {&bank.global[static_cast<size_t>(s)], &bank.local[static_cast<size_t>(s)]})
      for (Index i = 0; i < f.rows(); ++i)
        for (Index k = 0; k < p->rows(); ++k)
          if ((f.row(i) - p->row(k)).cwiseAbs().minCoeff() < margin) return true;
  return false;
}

// The inter-style loss takes the nearest prototype of each style, which has a
// kink wherever two prototypes are equally near.
inline bool near_tie(const Matrix& features, const PrototypeBank& bank, Metric metric, double margin = 1e-3) {
  for (int s = 0; s < bank.styles; ++s)
    for (const Matrix* p : {&bank.global[static_cast<size_t>(s)], &bank.local[static_cast<size_t>(s)]}) {
      if (p->rows() < 2) continue;
      for (Index i = 0; i < features.rows(); ++i) {
        std::vector<double> d;
        for (Index k = 0; k < p->rows(); ++k) d.push_back(metric_distance(features.row(i), p->row(k), metric).loss);
        std::sort(d.begin(), d.end());
        if (d[1] - d[0] < margin) return true;
      }
    }
  return false;
}

inline Outcome contrastive_loss_instance(std::uint64_t seed) {
  Rng rng(seed);
  const int S = 2 + static_cast<int>(rng() % 3);
  const int dim = 3 + static_cast<int>(rng() % 6);
  const PrototypeBank bank = random_bank(rng, S, 1 + static_cast<int>(rng() % 3), 2 + static_cast<int>(rng() % 3), dim);
  StyleLossConfig cfg;
  cfg.metric = static_cast<Metric>(rng() % 3);
  cfg.tau = 0.05 + 0.5 * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  Matrix fg = randn(1, dim, rng);
  Matrix fl = randn(2 + static_cast<Index>(rng() % 3), dim, rng);
  // Keep clear of the loss's kinks: L1 coordinate crossings and nearest-prototype ties.
  while ((cfg.metric == Metric::l1 && (near_kink(fg, bank) || near_kink(fl, bank))) || near_tie(fg, bank, cfg.metric) ||
         near_tie(fl, bank, cfg.metric)) {
    fg = randn(1, dim, rng);
    fl = randn(fl.rows(), dim, rng);
  }
  const int own = static_cast<int>(rng() % static_cast<unsigned>(S));
  StylePositives pos;
  pos.global = static_cast<int>(rng() % static_cast<unsigned>(bank.k_global));
  for (Index i = 0; i < fl.rows(); ++i) pos.local.push_back(static_cast<int>(rng() % static_cast<unsigned>(bank.k_local)));
  auto f = [&]() { return style_loss(fg.row(0), fl, bank, own, pos, cfg).total; };
  const StyleLossResult r = style_loss(fg.row(0), fl, bank, own, pos, cfg);
  Outcome out;
  check_input(out, fg, r.grad_fg, f, rng, std::string("f_g/") + metric_name(cfg.metric));
  check_input(out, fl, r.grad_fl, f, rng, std::string("f_l/") + metric_name(cfg.metric));
  return out;
}

inline Outcome entropy_loss_instance(std::uint64_t seed) {
  Rng rng(seed);
  const int S = 2 + static_cast<int>(rng() % 4);
  const int dim = 3 + static_cast<int>(rng() % 6);
  Matrix fg = randn(1, dim, rng);
  Matrix fl = randn(3, dim, rng);
  Matrix wg = randn(dim, S, rng);
  Matrix bg = randn(1, S, rng);
  Matrix wl = randn(dim, S, rng);
  Matrix bl = randn(1, S, rng);
  const int own = static_cast<int>(rng() % static_cast<unsigned>(S));
  auto eval = [&]() { return entropy_style_loss(fg.row(0), fl, wg, bg.row(0), wl, bl.row(0), own); };
  auto f = [&]() { return eval().total; };
  const EntropyStyleResult r = eval();
  Outcome out;
  check_input(out, fg, r.grad_fg, f, rng, "f_g");
  check_input(out, fl, r.grad_fl, f, rng, "f_l");
  check_input(out, wg, r.grad_w_global, f, rng, "w_global");
  check_input(out, bg, r.grad_b_global, f, rng, "b_global");
  check_input(out, wl, r.grad_w_local, f, rng, "w_local");
  check_input(out, bl, r.grad_b_local, f, rng, "b_local");
  return out;
}

inline DenoiserConfig small_denoiser(Rng& rng) {
  DenoiserConfig d;
  d.tokens = 2 + static_cast<int>(rng() % 2);
  d.token_width = 4;
  d.width = 8;
  d.blocks = 1 + static_cast<int>(rng() % 2);
  d.mlp_hidden = 12;
  d.contents = 2;
  d.content_tokens = 2;
  d.style_width = 6;
  d.time_width = 8;
  return d;
}

inline Outcome denoiser_instance(std::uint64_t seed) {
  Rng rng(seed);
  const DenoiserConfig dc = small_denoiser(rng);
  ParamSet ps = init_denoiser_params(dc, rng);
  for (int b = 0; b < dc.blocks; ++b) ps.set(den_block(b, "sma.lambda"), randn(1, 1, rng));
  const Matrix z = randn(dc.tokens, dc.token_width, rng);
  const Matrix eps = randn(dc.tokens, dc.token_width, rng);
  const int t = 1 + static_cast<int>(rng() % 1000);
  const int content = static_cast<int>(rng() % 3) - 1;
  const bool with_style = rng() % 3 != 0;
  const Matrix style = randn(3, dc.style_width, rng);
  auto loss_on = [&](ad::Tape& tape) {
    ad::Var s = with_style ? tape.constant(style) : ad::Var{};
    ad::Var pred = denoise_on_tape(tape, ps, dc, tape.constant(z), t, content, s);
    return ad::mean_square(tape, ad::sub(tape, pred, tape.constant(eps)));
  };
  auto f = [&]() {
    ad::Tape tape;
    return tape.value(loss_on(tape))(0, 0);
  };
  ad::Tape tape;
  tape.backward(loss_on(tape));
  Outcome out;
  check_params(out, ps, tape.param_grads(), f, rng);
  return out;
}

inline CodecConfig small_codec(Rng& rng) {
  CodecConfig c;
  c.length = 8;
  c.channels = 3;
  c.tokens = 2;
  c.token_width = 3;
  c.hidden = 10 + static_cast<int>(rng() % 6);
  return c;
}

// Reconstruction plus KL objective with the reparameterization noise held fixed.
inline Outcome codec_instance(std::uint64_t seed) {
  Rng rng(seed);
  const CodecConfig cc = small_codec(rng);
  ParamSet ps = init_codec_params(cc, rng);
  const Index B = 3;
  const Matrix x = randn(B, cc.frame_size(), rng);
  const Matrix noise = randn(B, cc.latent_size(), rng);
  const double kl_weight = 0.1;
  auto loss_on = [&](ad::Tape& t) {
    using namespace ad;
    Var xv = t.constant(x);
    CodecVars enc = codec_encode_on_tape(t, ps, xv);
    Var z = add(t, enc.mean, hadamard(t, exp(t, scale(t, enc.logvar, 0.5)), t.constant(noise)));
    Var kl = add(t, hadamard(t, enc.mean, enc.mean), sub(t, exp(t, enc.logvar), add_scalar(t, enc.logvar, 1.0)));
    Var rec = codec_decode_flat_on_tape(t, ps, z);
    return add(t, mean_square(t, sub(t, rec, xv)), scale(t, sum_all(t, kl), 0.5 * kl_weight / static_cast<double>(B)));
  };
  auto f = [&]() {
    ad::Tape t;
    return t.value(loss_on(t))(0, 0);
  };
  ad::Tape t;
  t.backward(loss_on(t));
  Outcome out;
  check_params(out, ps, t.param_grads(), f, rng, [](const std::string& n) { return n.rfind("codec.norm.", 0) != 0; });
  return out;
}

// Tiny inference stack for guidance gradients.
struct ToyPipeline {
  ParamSet codec;
  ParamSet model;
  NoiseSchedule sched;
  PrototypeBank bank;
  Pipeline p;

  explicit ToyPipeline(Rng& rng) : sched(cosine_schedule(1000)) {
    CodecConfig cc;
    cc.length = 8;
    cc.channels = 4;
    cc.tokens = 2;
    cc.token_width = 3;
    cc.hidden = 12;
    codec = init_codec_params(cc, rng);
    codec.set("codec.norm.shift", randn(1, cc.latent_size(), rng, 0.1));
    codec.set("codec.norm.scale", Matrix::Constant(1, cc.latent_size(), 0.8));
    EncoderConfig ec = small_encoder(rng, cc.channels);
    ec.layers = 2;
    model = init_encoder_params(ec, rng);
    bank = random_bank(rng, 2, 2, 3, ec.width);
    freeze(bank);
    p.codec = &codec;
    p.codec_cfg = cc;
    p.model = &model;
    p.enc = ec;
    p.sched = &sched;
    p.bank = &bank;
  }
  ToyPipeline(const ToyPipeline&) = delete;
};

inline Outcome guidance_instance(std::uint64_t seed) {
  Rng rng(seed);
  ToyPipeline toy(rng);
  const Pipeline& p = toy.p;
  Matrix z = randn(p.codec_cfg.tokens, p.codec_cfg.token_width, rng);
  const Matrix eps = randn(z.rows(), z.cols(), rng);
  const int t = 1 + static_cast<int>(rng() % 299);
  const int segs = p.codec_cfg.length / p.enc.window;
  // G is a sum of absolute values: keep every token clear of its reference.
  const Matrix own = encode(*p.model, p.enc, decode_standardized(*p.codec, p.codec_cfg, predict_clean(z, t, eps, *p.sched))).tokens();
  Matrix ref = randn(segs + 1, p.enc.width, rng);
  while ((own - ref).cwiseAbs().minCoeff() < 1e-2) ref = randn(segs + 1, p.enc.width, rng);
  Outcome out;
  {
    const GuidanceGrad g = classifier_guidance_grad(p, z, t, eps, ref, 300);
    check_input(out, z, g.grad, [&]() { return classifier_guidance_grad(p, z, t, eps, ref, 300).value; }, rng, "classifier");
  }
  {
    const PrototypeTarget target = global_target(toy.bank, 1, 0);
    const GuidanceGrad g = prototype_guidance_grad(p, z, t, eps, target, 1.0);
    check_input(out, z, g.grad, [&]() { return prototype_guidance_grad(p, z, t, eps, target, 1.0).value; }, rng,
                "prototype-global");
  }
  {
    std::vector<int> idx;
    for (int i = 0; i < segs; ++i) idx.push_back(static_cast<int>(rng() % 3));
    const PrototypeTarget target = local_target(toy.bank, 0, idx);
    const GuidanceGrad g = prototype_guidance_grad(p, z, t, eps, target, 1.0);
    check_input(out, z, g.grad, [&]() { return prototype_guidance_grad(p, z, t, eps, target, 1.0).value; }, rng,
                "prototype-local");
  }
  return out;
}

struct Suite {
  const char* name;
  Outcome (*instance)(std::uint64_t);
};

inline const std::vector<Suite>& suites() {
  static const std::vector<Suite> s = {{"encoder", encoder_instance},
                                       {"contrastive-loss", contrastive_loss_instance},
                                       {"entropy-loss", entropy_loss_instance},
                                       {"denoiser", denoiser_instance},
                                       {"codec", codec_instance},
                                       {"guidance", guidance_instance}};
  return s;
}

inline Outcome run_suite(const Suite& s, int instances, std::uint64_t seed = 1) {
  Outcome total;
  for (int i = 0; i < instances; ++i) {
    Outcome o = s.instance(mix_seed(seed, static_cast<std::uint64_t>(i)));
    if (!o.ok()) o.where += " (instance " + std::to_string(i) + ")";
    merge(total, o);
  }
  return total;
}

}  // namespace gradcheck
