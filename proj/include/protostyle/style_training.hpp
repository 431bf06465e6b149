#pragma once

// Stylization training: style encoder plus the adapter's style branch on top of
// a pretrained base denoiser. Prototypes follow the EMA schedule until the
// freeze point and stay constant afterwards.

#include "protostyle/diffusion.hpp"
#include "protostyle/style_encoder.hpp"
#include "protostyle/style_losses.hpp"

#include <map>

namespace protostyle {

struct StyleTrainConfig {
  int iterations = 1500;
  int batch = 16;
  double lr = 1e-3;
  double lambda_style = 1.0;
  double cond_drop_prob = 0.1;
  double freeze_fraction = 0.3;  // bank EMA runs for the first fraction of iterations
  int memory = 256;              // FIFO features per style for the transport problem
  int k_global = 3;
  int k_local = 30;
  double momentum = 0.95;
  SinkhornConfig sinkhorn;
  StyleLossConfig loss;
  std::uint64_t seed = 31;

  int freeze_at() const { return static_cast<int>(std::lround(iterations * freeze_fraction)); }

  void validate() const {
    if (iterations < 0) throw ConfigError("style_iterations", "must be >= 0");
    if (batch < 1) throw ConfigError("batch", "must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("style_lr", "must be > 0");
    if (!(lambda_style >= 0.0)) throw ConfigError("lambda_style", "must be >= 0");
    if (!(cond_drop_prob >= 0.0 && cond_drop_prob <= 1.0)) throw ConfigError("cond_drop_prob", "must lie in [0, 1]");
    if (!(freeze_fraction >= 0.0 && freeze_fraction <= 1.0)) throw ConfigError("freeze_fraction", "must lie in [0, 1]");
    if (memory < 1) throw ConfigError("memory", "must be >= 1");
    if (k_global < 1) throw ConfigError("k_global", "must be >= 1");
    if (k_local < 1) throw ConfigError("k_local", "must be >= 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum", "must lie in [0, 1)");
    sinkhorn.validate();
    loss.validate();
  }
};

struct StyleExample {
  const MotionSequence* seq = nullptr;
  Matrix z0;  // standardized codec latent of seq
};

struct TrainReport {
  int step = 0;
  double diff_style = 0.0;    // L_diff^s
  double diff_content = 0.0;  // L_diff^c
  double style = 0.0;         // L_style
  double total = 0.0;
  bool bank_updated = false;
  int empty_clusters = 0;
};

inline bool is_entropy_head(const std::string& name) { return name.rfind("ent.", 0) == 0; }

// Tensors stylization may move: encoder, the adapter's style branch and the
// cross-entropy heads of the ablation variant.
inline bool is_stylization_trainable(const std::string& name) {
  return name.rfind("enc.", 0) == 0 || is_style_branch(name) || is_entropy_head(name);
}

inline void init_entropy_heads(ParamSet& ps, int styles, int width, Rng& rng) {
  ps.set("ent.w_g", randn(width, styles, rng, 1.0 / std::sqrt(width)));
  ps.set("ent.b_g", Matrix::Zero(1, styles));
  ps.set("ent.w_l", randn(width, styles, rng, 1.0 / std::sqrt(width)));
  ps.set("ent.b_l", Matrix::Zero(1, styles));
}

inline std::vector<StyleFeature> encode_all(const ParamSet& ps, const EncoderConfig& cfg,
                                            const std::vector<const MotionSequence*>& seqs) {
  std::vector<StyleFeature> out;
  out.reserve(seqs.size());
  for (const auto* s : seqs) out.push_back(encode(ps, cfg, s->frames));
  return out;
}

inline Matrix stack_rows(const std::vector<RowVector>& rows) {
  if (rows.empty()) return Matrix(0, 0);
  Matrix m(static_cast<Index>(rows.size()), rows.front().size());
  for (size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Index>(i)) = rows[i];
  return m;
}

// Balanced hard assignment of feature rows to one style's prototypes.
inline AssignmentMatrix assign_rows(const Matrix& rows, const Matrix& prototypes, const SinkhornConfig& cfg) {
  return sinkhorn_assign(normalize_rows(rows).transpose(), prototypes.transpose(), cfg);
}

// Seeds every style's prototypes from the current encoder's features.
inline PrototypeBank init_bank(const ParamSet& ps, const EncoderConfig& enc, const std::vector<StyleExample>& data,
                               int styles, int k_global, int k_local, double momentum) {
  PrototypeBank bank;
  bank.styles = styles;
  bank.k_global = k_global;
  bank.k_local = k_local;
  bank.dim = enc.width;
  bank.momentum = momentum;
  for (int s = 0; s < styles; ++s) {
    std::vector<RowVector> g;
    std::vector<RowVector> l;
    for (const auto& ex : data) {
      if (ex.seq->style_id != s) continue;
      StyleFeature f = encode(ps, enc, ex.seq->frames);
      g.push_back(f.f_g);
      for (Index i = 0; i < f.f_l.rows(); ++i) l.push_back(f.f_l.row(i));
    }
    if (g.empty()) throw PreconditionError("style " + std::to_string(s) + " has no training sequences");
    bank.global.push_back(init_prototypes(stack_rows(g), k_global));
    bank.local.push_back(init_prototypes(stack_rows(l), k_local));
  }
  return bank;
}

// Freezes the bank and records what prototype-driven sampling needs: mean
// feature norms and, per global prototype, the dominant local prototype of
// each segment among the sequences assigned to it.
inline void finalize_bank(PrototypeBank& bank, const ParamSet& ps, const EncoderConfig& enc,
                          const std::vector<StyleExample>& data, const SinkhornConfig& sk) {
  bank.global_norm.assign(static_cast<size_t>(bank.styles), 0.0);
  bank.local_norm.assign(static_cast<size_t>(bank.styles), 0.0);
  bank.local_defaults.assign(static_cast<size_t>(bank.styles), {});
  for (int s = 0; s < bank.styles; ++s) {
    std::vector<StyleFeature> feats;
    for (const auto& ex : data)
      if (ex.seq->style_id == s) feats.push_back(encode(ps, enc, ex.seq->frames));
    if (feats.empty()) throw PreconditionError("style " + std::to_string(s) + " has no training sequences");
    const Index segs = feats.front().f_l.rows();
    std::vector<RowVector> g;
    std::vector<RowVector> l;
    double gn = 0.0;
    double ln = 0.0;
    for (const auto& f : feats) {
      g.push_back(f.f_g);
      gn += f.f_g.norm();
      for (Index i = 0; i < segs; ++i) {
        l.push_back(f.f_l.row(i));
        ln += f.f_l.row(i).norm();
      }
    }
    bank.global_norm[static_cast<size_t>(s)] = gn / static_cast<double>(g.size());
    bank.local_norm[static_cast<size_t>(s)] = ln / static_cast<double>(l.size());
    const AssignmentMatrix ga = assign_rows(stack_rows(g), bank.global[static_cast<size_t>(s)], sk);
    const AssignmentMatrix la = assign_rows(stack_rows(l), bank.local[static_cast<size_t>(s)], sk);
    auto& defaults = bank.local_defaults[static_cast<size_t>(s)];
    defaults.assign(static_cast<size_t>(bank.k_global), std::vector<int>(static_cast<size_t>(segs), 0));
    for (int k = 0; k < bank.k_global; ++k) {
      for (Index i = 0; i < segs; ++i) {
        std::map<int, int> votes;
        for (size_t n = 0; n < feats.size(); ++n)
          if (ga.hard[n] == k) ++votes[la.hard[n * static_cast<size_t>(segs) + static_cast<size_t>(i)]];
        if (votes.empty()) {
          // Nearest local prototype to the global prototype when no sequence is assigned.
          Index best = 0;
          (bank.local[static_cast<size_t>(s)] * bank.global[static_cast<size_t>(s)].row(k).transpose()).maxCoeff(&best);
          defaults[static_cast<size_t>(k)][static_cast<size_t>(i)] = static_cast<int>(best);
          continue;
        }
        int best = votes.begin()->first;
        int best_count = 0;
        for (const auto& [proto, count] : votes)
          if (count > best_count) {
            best = proto;
            best_count = count;
          }
        defaults[static_cast<size_t>(k)][static_cast<size_t>(i)] = best;
      }
    }
  }
  freeze(bank);
}

class StyleTrainer {
 public:
  StyleTrainer(ParamSet& params, PrototypeBank& bank, const EncoderConfig& enc, const DenoiserConfig& den,
               const NoiseSchedule& sched, std::vector<StyleExample> style_data, std::vector<LatentExample> content_data,
               const StyleTrainConfig& cfg)
      : ps_(params),
        bank_(bank),
        enc_(enc),
        den_(den),
        sched_(sched),
        style_(std::move(style_data)),
        content_(std::move(content_data)),
        cfg_(cfg),
        rng_(cfg.seed),
        global_mem_(bank.styles, static_cast<size_t>(cfg.memory)),
        local_mem_(bank.styles, static_cast<size_t>(cfg.memory)) {
    cfg_.validate();
    if (style_.empty() || content_.empty()) throw PreconditionError("stylization needs style and content data");
    if (bank_.styles < 1) throw PreconditionError("prototype bank is empty");
    if (bank_.dim != enc_.width || den_.style_width != enc_.width)
      throw ConfigError("encoder_width", "encoder width must match bank and adapter widths");
    if (bank_.frozen && step_ < cfg_.freeze_at())
      throw StateError("bank is frozen before the configured freeze point");
    Adam::Options ao;
    ao.lr = cfg_.lr;
    ao.clip_norm = 1.0;
    opt_ = Adam(ao);
  }

  int step() const { return step_; }

  TrainReport train_step() {
    using namespace ad;
    const int B = cfg_.batch;
    const bool update_bank = step_ < cfg_.freeze_at();
    if (update_bank && bank_.frozen) throw StateError("bank frozen while EMA updates are scheduled");
    if (!update_bank && !bank_.frozen) throw StateError("bank must be frozen after the freeze point");

    std::uniform_int_distribution<size_t> pick_style(0, style_.size() - 1);
    std::uniform_int_distribution<size_t> pick_content(0, content_.size() - 1);
    std::uniform_int_distribution<int> tdist(1, sched_.T);
    std::bernoulli_distribution drop(cfg_.cond_drop_prob);

    TrainReport rep;
    rep.step = step_;
    GradMap grads;
    auto add_grads = [&](const GradMap& g) {
      for (const auto& [name, m] : g) {
        auto it = grads.find(name);
        if (it == grads.end())
          grads.emplace(name, m);
        else
          it->second += m;
      }
    };

    // Pass 1: features for the batch (assignment and positives).
    std::vector<const StyleExample*> batch(static_cast<size_t>(B));
    for (auto& b : batch) b = &style_[pick_style(rng_)];
    std::vector<StyleFeature> feats;
    feats.reserve(batch.size());
    for (const auto* ex : batch) feats.push_back(encode(ps_, enc_, ex->seq->frames));
    const Index segs = feats.front().f_l.rows();

    std::vector<StylePositives> positives(batch.size());
    for (int s = 0; s < bank_.styles; ++s) {
      std::vector<size_t> members;
      for (size_t i = 0; i < batch.size(); ++i)
        if (batch[i]->seq->style_id == s) members.push_back(i);
      if (members.empty()) continue;
      std::vector<RowVector> g;
      std::vector<RowVector> l;
      for (size_t i : members) {
        g.push_back(feats[i].f_g);
        for (Index r = 0; r < segs; ++r) l.push_back(feats[i].f_l.row(r));
      }
      const AssignmentMatrix ga = assign_with_memory(stack_rows(g), global_mem_.matrix(s), bank_.global[static_cast<size_t>(s)]);
      const AssignmentMatrix la = assign_with_memory(stack_rows(l), local_mem_.matrix(s), bank_.local[static_cast<size_t>(s)]);
      for (size_t j = 0; j < members.size(); ++j) {
        StylePositives& p = positives[members[j]];
        p.global = ga.hard[j];
        p.local.resize(static_cast<size_t>(segs));
        for (Index r = 0; r < segs; ++r) p.local[static_cast<size_t>(r)] = la.hard[j * static_cast<size_t>(segs) + static_cast<size_t>(r)];
      }
      if (update_bank) {
        AssignmentMatrix gb = ga;
        gb.hard.resize(members.size());
        AssignmentMatrix lb = la;
        lb.hard.resize(members.size() * static_cast<size_t>(segs));
        rep.empty_clusters += ema_update(bank_, s, Level::global, gb, stack_rows(g)).empty_clusters;
        rep.empty_clusters += ema_update(bank_, s, Level::local, lb, stack_rows(l)).empty_clusters;
        rep.bank_updated = true;
      }
    }

    // Pass 2: diffusion losses on tape, style loss gradients injected at the features.
    const double invB = 1.0 / B;
    for (size_t i = 0; i < batch.size(); ++i) {
      const StyleExample& ex = *batch[i];
      const int ts = tdist(rng_);
      const Matrix eps = randn(ex.z0.rows(), ex.z0.cols(), rng_);
      const bool drop_content = drop(rng_);
      const bool drop_style = drop(rng_);
      Tape t;
      EncoderVars ev = encode_on_tape(t, ps_, enc_, t.constant(ex.seq->frames));
      Var style_tokens = drop_style ? Var{} : concat_rows(t, ev.f_g, ev.f_l);
      Var pred = denoise_on_tape(t, ps_, den_, t.constant(forward_diffuse(ex.z0, ts, eps, sched_)), ts,
                                 drop_content ? kNullContent : ex.seq->content_id, style_tokens);
      Var l = mean_square(t, sub(t, pred, t.constant(eps)));
      rep.diff_style += t.value(l)(0, 0) * invB;
      t.seed(l, Matrix::Constant(1, 1, invB));

      const StyleFeature& f = feats[i];
      const int own = ex.seq->style_id;
      if (cfg_.loss.variant == LossVariant::contrastive) {
        const StyleLossResult sl = style_loss(f.f_g, f.f_l, bank_, own, positives[i], cfg_.loss);
        rep.style += sl.total * invB;
        if (cfg_.lambda_style > 0.0) {
          t.seed(ev.f_g, sl.grad_fg * (cfg_.lambda_style * invB));
          t.seed(ev.f_l, sl.grad_fl * (cfg_.lambda_style * invB));
        }
      } else {
        const EntropyStyleResult el =
            entropy_style_loss(f.f_g, f.f_l, ps_.at("ent.w_g"), ps_.at("ent.b_g"), ps_.at("ent.w_l"), ps_.at("ent.b_l"), own);
        rep.style += el.total * invB;
        if (cfg_.lambda_style > 0.0) {
          const double c = cfg_.lambda_style * invB;
          t.seed(ev.f_g, el.grad_fg * c);
          t.seed(ev.f_l, el.grad_fl * c);
          add_grads({{"ent.w_g", el.grad_w_global * c},
                     {"ent.b_g", el.grad_b_global * c},
                     {"ent.w_l", el.grad_w_local * c},
                     {"ent.b_l", el.grad_b_local * c}});
        }
      }
      t.run_backward();
      add_grads(t.param_grads());
    }

    for (int i = 0; i < B; ++i) {
      const LatentExample& ex = content_[pick_content(rng_)];
      const int ts = tdist(rng_);
      const Matrix eps = randn(ex.z0.rows(), ex.z0.cols(), rng_);
      const bool drop_content = drop(rng_);
      Tape t;
      Var pred = denoise_on_tape(t, ps_, den_, t.constant(forward_diffuse(ex.z0, ts, eps, sched_)), ts,
                                 drop_content ? kNullContent : ex.content, {});
      Var l = mean_square(t, sub(t, pred, t.constant(eps)));
      rep.diff_content += t.value(l)(0, 0) * invB;
      t.seed(l, Matrix::Constant(1, 1, invB));
      t.run_backward();
      add_grads(t.param_grads());
    }

    opt_.step(ps_, grads, is_stylization_trainable);

    for (size_t i = 0; i < batch.size(); ++i) {
      const int s = batch[i]->seq->style_id;
      global_mem_.push(s, feats[i].f_g);
      for (Index r = 0; r < segs; ++r) local_mem_.push(s, feats[i].f_l.row(r));
    }
    rep.total = rep.diff_style + rep.diff_content + cfg_.lambda_style * rep.style;
    ++step_;
    return rep;
  }

 private:
  // Batch rows first, memory rows after; the caller reads only the batch slots.
  AssignmentMatrix assign_with_memory(const Matrix& batch_rows, const Matrix& memory, const Matrix& prototypes) const {
    Matrix all(batch_rows.rows() + memory.rows(), batch_rows.cols());
    all.topRows(batch_rows.rows()) = batch_rows;
    if (memory.rows() > 0) all.bottomRows(memory.rows()) = memory;
    return assign_rows(all, prototypes, cfg_.sinkhorn);
  }

  ParamSet& ps_;
  PrototypeBank& bank_;
  EncoderConfig enc_;
  DenoiserConfig den_;
  const NoiseSchedule& sched_;
  std::vector<StyleExample> style_;
  std::vector<LatentExample> content_;
  StyleTrainConfig cfg_;
  Rng rng_;
  Adam opt_;
  FeatureMemory global_mem_;
  FeatureMemory local_mem_;
  int step_ = 0;
};

}  // namespace protostyle
