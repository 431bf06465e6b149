#pragma once

// Non-learnable style prototypes: seeding, balanced Sinkhorn assignment, EMA
// centroid updates and the freeze switch.

#include "protostyle/core.hpp"
#include "protostyle/params.hpp"

#include <deque>
#include <limits>
#include <string>
#include <vector>

namespace protostyle {

enum class Level { global, local };

inline const char* level_name(Level l) { return l == Level::global ? "global" : "local"; }

struct SinkhornConfig {
  double mu = 0.05;
  int max_iters = 100;
  double tol = 1e-6;
  bool record_objective = false;

  void validate() const {
    if (!(mu > 0.0)) throw ConfigError("sinkhorn_mu", "must be > 0");
    if (max_iters < 1) throw ConfigError("sinkhorn_max_iters", "must be >= 1");
    if (!(tol > 0.0)) throw ConfigError("sinkhorn_tol", "must be > 0");
  }
};

struct AssignmentMatrix {
  Matrix relaxed;         // K x N, columns sum to 1, rows to N/K
  std::vector<int> hard;  // per-column argmax
  bool converged = false;
  int iterations = 0;
  double row_residual = 0.0;
  double col_residual = 0.0;
  std::vector<double> objective;  // dual objective per iteration when recorded

  Index prototypes() const { return relaxed.rows(); }
  Index features() const { return relaxed.cols(); }
};

// Columns of `m` must be unit norm within `tol`.
inline void require_unit_columns(const Matrix& m, const char* what, double tol = 1e-4) {
  for (Index j = 0; j < m.cols(); ++j) {
    const double n = m.col(j).norm();
    if (std::abs(n - 1.0) > tol)
      throw PreconditionError(std::string(what) + " column " + std::to_string(j) + " has norm " + std::to_string(n));
  }
}

inline Matrix normalize_columns(Matrix m) {
  for (Index j = 0; j < m.cols(); ++j) {
    const double n = m.col(j).norm();
    if (n > 0.0) m.col(j) /= n;
  }
  return m;
}

inline Matrix normalize_rows(Matrix m) {
  for (Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (n > 0.0) m.row(i) /= n;
  }
  return m;
}

namespace sinkhorn_detail {

inline double log_sum_exp(const Eigen::Ref<const RowVector>& x) {
  const double m = x.maxCoeff();
  return m + std::log((x.array() - m).exp().sum());
}

}  // namespace sinkhorn_detail

// Entropy-regularized balanced assignment of N features to K prototypes.
// Maximizes <S, L> - mu * sum L (log L - 1) with S = P^T F, subject to column
// sums 1 and row sums N/K. Runs in the log domain: L = exp(S/mu + a_k + b_n).
inline AssignmentMatrix sinkhorn_assign(const Matrix& features, const Matrix& prototypes, const SinkhornConfig& cfg) {
  cfg.validate();
  require_shape(features.rows() == prototypes.rows(),
                "feature dim " + std::to_string(features.rows()) + " vs prototype dim " + std::to_string(prototypes.rows()));
  const Index N = features.cols();
  const Index K = prototypes.cols();
  if (N < 1 || K < 1) throw PreconditionError("sinkhorn needs N >= 1 and K >= 1");
  require_unit_columns(features, "feature");
  require_unit_columns(prototypes, "prototype");

  const Matrix logits = (prototypes.transpose() * features) / cfg.mu;  // K x N
  const double row_target = static_cast<double>(N) / static_cast<double>(K);
  const double log_row_target = std::log(row_target);
  RowVector b = RowVector::Zero(N);
  Vector a = Vector::Zero(K);

  AssignmentMatrix out;
  Matrix plan(K, N);
  auto build_plan = [&]() {
    for (Index k = 0; k < K; ++k)
      for (Index n = 0; n < N; ++n) plan(k, n) = std::exp(logits(k, n) + a(k) + b(n));
  };
  auto dual = [&]() {
    // g(a, b) = mu * sum L - mu * (a . r + b . c); Sinkhorn steps minimize g.
    // The negated value is reported so that it is non-decreasing.
    const double mass = plan.sum();
    return cfg.mu * (a.sum() * row_target + b.sum() - mass);
  };

  for (int it = 1; it <= cfg.max_iters; ++it) {
    for (Index k = 0; k < K; ++k) a(k) = log_row_target - sinkhorn_detail::log_sum_exp(logits.row(k) + b);
    for (Index n = 0; n < N; ++n) {
      RowVector col = (logits.col(n) + a).transpose();
      b(n) = -sinkhorn_detail::log_sum_exp(col);
    }
    build_plan();
    out.iterations = it;
    out.row_residual = (plan.rowwise().sum().array() - row_target).abs().maxCoeff();
    out.col_residual = (plan.colwise().sum().array() - 1.0).abs().maxCoeff();
    if (cfg.record_objective) out.objective.push_back(dual());
    if (out.row_residual < cfg.tol && out.col_residual < cfg.tol) {
      out.converged = true;
      break;
    }
  }
  out.relaxed = plan;
  out.hard.resize(static_cast<size_t>(N));
  for (Index n = 0; n < N; ++n) {
    Index best = 0;
    plan.col(n).maxCoeff(&best);  // first maximum on ties
    out.hard[static_cast<size_t>(n)] = static_cast<int>(best);
  }
  return out;
}

// Farthest-point seeding on normalized features followed by one
// assign-and-average refinement. Returns K x d' unit rows. Rows of `features`
// are samples.
inline Matrix init_prototypes(const Matrix& features, int K) {
  if (K < 1) throw ConfigError("prototypes", "K must be >= 1");
  if (features.rows() < K)
    throw PreconditionError("insufficient data: " + std::to_string(features.rows()) + " features for " + std::to_string(K) +
                            " prototypes");
  if (!features.allFinite()) throw PreconditionError("features must be finite");
  const Matrix f = normalize_rows(features);
  const Index N = f.rows();
  const Index d = f.cols();

  RowVector mean_dir = normalized_row(f.colwise().mean());
  Matrix seeds(K, d);
  if (mean_dir.norm() == 0.0) {
    seeds.row(0) = f.row(0);
  } else {
    Index first = 0;
    (f * mean_dir.transpose()).maxCoeff(&first);
    seeds.row(0) = f.row(first);
  }
  Vector min_dist = (f.rowwise() - seeds.row(0)).rowwise().squaredNorm();
  for (int k = 1; k < K; ++k) {
    Index far = 0;
    const double best = min_dist.maxCoeff(&far);
    RowVector seed = f.row(far);
    if (best < 1e-12) {
      // Degenerate (duplicate) features: jitter a copy of the previous seed.
      seed = seeds.row(k - 1);
      seed(k % d) += 1e-3 * k;
      seed(0) -= 1e-3;
      seed = normalized_row(seed);
    }
    seeds.row(k) = seed;
    min_dist = min_dist.cwiseMin((f.rowwise() - seed).rowwise().squaredNorm());
  }

  // One refinement: nearest-seed assignment, mean, renormalize; empty clusters keep their seed.
  Matrix sums = Matrix::Zero(K, d);
  std::vector<int> counts(static_cast<size_t>(K), 0);
  for (Index n = 0; n < N; ++n) {
    Index best = 0;
    (seeds * f.row(n).transpose()).maxCoeff(&best);
    sums.row(best) += f.row(n);
    ++counts[static_cast<size_t>(best)];
  }
  for (int k = 0; k < K; ++k) {
    if (counts[static_cast<size_t>(k)] == 0) continue;
    RowVector c = normalized_row(sums.row(k));
    if (c.norm() > 0.0) seeds.row(k) = c;
  }
  return seeds;
}

struct PrototypeBank {
  int styles = 0;
  int k_global = 3;
  int k_local = 30;
  int dim = 0;
  double momentum = 0.95;  // lambda_p
  std::vector<Matrix> global;  // per style: K_g x d' unit rows
  std::vector<Matrix> local;   // per style: K_l x d' unit rows
  bool frozen = false;
  long update_count = 0;

  // Statistics recorded at freeze time for building style tokens from prototypes.
  std::vector<double> global_norm;            // mean ||f_g|| per style
  std::vector<double> local_norm;             // mean ||f_l row|| per style
  std::vector<std::vector<std::vector<int>>> local_defaults;  // [s][k_global][segment] -> local prototype

  const Matrix& level(int s, Level l) const {
    check_style(s);
    return l == Level::global ? global[static_cast<size_t>(s)] : local[static_cast<size_t>(s)];
  }
  Matrix& level(int s, Level l) {
    check_style(s);
    return l == Level::global ? global[static_cast<size_t>(s)] : local[static_cast<size_t>(s)];
  }
  int count(Level l) const { return l == Level::global ? k_global : k_local; }

  void check_style(int s) const {
    if (s < 0 || s >= styles) throw PreconditionError("style index " + std::to_string(s) + " outside bank");
  }

  bool all_unit(double tol = 1e-6) const {
    for (const auto* set : {&global, &local})
      for (const auto& m : *set)
        for (Index k = 0; k < m.rows(); ++k)
          if (std::abs(m.row(k).norm() - 1.0) > tol) return false;
    return true;
  }
};

struct EmaReport {
  int empty_clusters = 0;
};

// p <- lambda_p p + (1 - lambda_p) mean(assigned), then renormalized.
// `features` holds one sample per row; rows are normalized before averaging.
inline EmaReport ema_update(PrototypeBank& bank, int style, Level level, const AssignmentMatrix& assignment,
                            const Matrix& features) {
  if (bank.frozen) throw StateError("prototype bank is frozen");
  Matrix& protos = bank.level(style, level);
  if (static_cast<Index>(assignment.hard.size()) != features.rows())
    throw PreconditionError("assignment covers " + std::to_string(assignment.hard.size()) + " features, got " +
                            std::to_string(features.rows()));
  require_shape(features.cols() == protos.cols(), "feature width does not match prototypes");
  const Matrix f = normalize_rows(features);
  Matrix sums = Matrix::Zero(protos.rows(), protos.cols());
  std::vector<int> counts(static_cast<size_t>(protos.rows()), 0);
  for (Index n = 0; n < f.rows(); ++n) {
    const int k = assignment.hard[static_cast<size_t>(n)];
    if (k < 0 || k >= protos.rows()) throw PreconditionError("assignment index out of range");
    sums.row(k) += f.row(n);
    ++counts[static_cast<size_t>(k)];
  }
  EmaReport report;
  const double lam = bank.momentum;
  for (Index k = 0; k < protos.rows(); ++k) {
    const int c = counts[static_cast<size_t>(k)];
    if (c == 0) {
      ++report.empty_clusters;
      continue;
    }
    RowVector updated = lam * protos.row(k) + (1.0 - lam) * (sums.row(k) / c);
    const double n = updated.norm();
    if (n > 0.0) protos.row(k) = updated / n;
  }
  ++bank.update_count;
  return report;
}

inline PrototypeBank& freeze(PrototypeBank& bank) {
  bank.frozen = true;
  return bank;
}

// ---- FIFO feature memory used to approximate the per-style transport problem --

class FeatureMemory {
 public:
  FeatureMemory() = default;
  FeatureMemory(int styles, size_t capacity) : capacity_(capacity), rows_(static_cast<size_t>(styles)) {}

  void push(int style, const RowVector& f) {
    auto& q = rows_.at(static_cast<size_t>(style));
    q.push_back(normalized_row(f));
    while (q.size() > capacity_) q.pop_front();
  }

  size_t size(int style) const { return rows_.at(static_cast<size_t>(style)).size(); }
  size_t capacity() const { return capacity_; }

  Matrix matrix(int style) const {
    const auto& q = rows_.at(static_cast<size_t>(style));
    if (q.empty()) return Matrix(0, 0);
    Matrix m(static_cast<Index>(q.size()), q.front().size());
    Index i = 0;
    for (const auto& r : q) m.row(i++) = r;
    return m;
  }

 private:
  size_t capacity_ = 256;
  std::vector<std::deque<RowVector>> rows_;
};

// ---- serialization ------------------------------------------------------------

inline void bank_to_params(const PrototypeBank& bank, ParamSet& out) {
  Matrix meta(1, 6);
  meta << bank.styles, bank.k_global, bank.k_local, bank.dim, bank.frozen ? 1.0 : 0.0, static_cast<double>(bank.update_count);
  out.set("bank.meta", meta);
  out.set("bank.momentum", Matrix::Constant(1, 1, bank.momentum));
  for (int s = 0; s < bank.styles; ++s) {
    out.set("bank.global.s" + std::to_string(s), bank.global[static_cast<size_t>(s)]);
    out.set("bank.local.s" + std::to_string(s), bank.local[static_cast<size_t>(s)]);
  }
  if (!bank.global_norm.empty()) {
    Matrix norms(2, bank.styles);
    for (int s = 0; s < bank.styles; ++s) {
      norms(0, s) = bank.global_norm[static_cast<size_t>(s)];
      norms(1, s) = bank.local_norm[static_cast<size_t>(s)];
    }
    out.set("bank.norms", norms);
  }
  if (!bank.local_defaults.empty()) {
    const Index segs = static_cast<Index>(bank.local_defaults[0][0].size());
    Matrix defaults(bank.styles * bank.k_global, segs);
    for (int s = 0; s < bank.styles; ++s)
      for (int k = 0; k < bank.k_global; ++k)
        for (Index i = 0; i < segs; ++i)
          defaults(s * bank.k_global + k, i) = bank.local_defaults[static_cast<size_t>(s)][static_cast<size_t>(k)][static_cast<size_t>(i)];
    out.set("bank.local_defaults", defaults);
  }
}

inline PrototypeBank bank_from_params(const ParamSet& ps) {
  PrototypeBank bank;
  const Matrix& meta = ps.at("bank.meta");
  bank.styles = static_cast<int>(meta(0, 0));
  bank.k_global = static_cast<int>(meta(0, 1));
  bank.k_local = static_cast<int>(meta(0, 2));
  bank.dim = static_cast<int>(meta(0, 3));
  bank.frozen = meta(0, 4) != 0.0;
  bank.update_count = static_cast<long>(meta(0, 5));
  bank.momentum = ps.at("bank.momentum")(0, 0);
  for (int s = 0; s < bank.styles; ++s) {
    bank.global.push_back(ps.at("bank.global.s" + std::to_string(s)));
    bank.local.push_back(ps.at("bank.local.s" + std::to_string(s)));
  }
  if (ps.contains("bank.norms")) {
    const Matrix& n = ps.at("bank.norms");
    for (int s = 0; s < bank.styles; ++s) {
      bank.global_norm.push_back(n(0, s));
      bank.local_norm.push_back(n(1, s));
    }
  }
  if (ps.contains("bank.local_defaults")) {
    const Matrix& d = ps.at("bank.local_defaults");
    bank.local_defaults.assign(static_cast<size_t>(bank.styles),
                               std::vector<std::vector<int>>(static_cast<size_t>(bank.k_global)));
    for (int s = 0; s < bank.styles; ++s)
      for (int k = 0; k < bank.k_global; ++k)
        for (Index i = 0; i < d.cols(); ++i)
          bank.local_defaults[static_cast<size_t>(s)][static_cast<size_t>(k)].push_back(
              static_cast<int>(d(s * bank.k_global + k, i)));
  }
  return bank;
}

}  // namespace protostyle
