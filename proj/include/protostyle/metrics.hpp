#pragma once

// Desk-scale evaluation: gated style oracle, SRA, diversity, content score,
// prototype NMI and usage, and the report writers.

#include "protostyle/corpus.hpp"
#include "protostyle/params.hpp"

#include <fstream>
#include <map>
#include <sstream>
#include <vector>

namespace protostyle {

// Nearest-centroid classifier over (style, sub-style) cells on the posture
// channels of raw frames; the predicted style is the nearest cell's style.
class StyleOracle {
 public:
  static constexpr double kGate = 0.95;

  void fit(const std::vector<MotionSequence>& train) {
    if (train.empty()) throw PreconditionError("oracle needs training sequences");
    std::map<std::pair<int, int>, std::pair<RowVector, int>> acc;
    for (const auto& s : train) {
      const RowVector x = features(s.frames);
      auto [it, inserted] = acc.try_emplace({s.style_id, s.substyle_id}, RowVector::Zero(x.size()), 0);
      if (it->second.first.size() != x.size()) throw ShapeError("oracle training sequences differ in shape");
      it->second.first += x;
      ++it->second.second;
    }
    centroids_ = Matrix(static_cast<Index>(acc.size()), acc.begin()->second.first.size());
    cell_style_.clear();
    Index r = 0;
    for (const auto& [key, v] : acc) {
      centroids_.row(r++) = v.first / v.second;
      cell_style_.push_back(key.first);
    }
    rows_ = train.front().frames.rows();
    cols_ = train.front().frames.cols();
    gated_ = false;
    eval_accuracy_ = 0.0;
  }

  int predict(const Matrix& frames) const {
    if (centroids_.rows() == 0) throw StateError("oracle is not fitted");
    require_shape(frames.rows() == rows_ && frames.cols() == cols_, "oracle expects " + std::to_string(rows_) + "x" +
                                                                       std::to_string(cols_) + " frames, got " + shape_str(frames));
    const RowVector x = features(frames);
    Index best = 0;
    (centroids_.rowwise() - x).rowwise().squaredNorm().minCoeff(&best);
    return cell_style_[static_cast<size_t>(best)];
  }

  double accuracy(const std::vector<MotionSequence>& seqs) const {
    if (seqs.empty()) throw PreconditionError("accuracy of an empty set");
    int hit = 0;
    for (const auto& s : seqs) hit += predict(s.frames) == s.style_id ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(seqs.size());
  }

  // Measures held-out accuracy and opens the gate when it reaches kGate.
  double gate(const std::vector<MotionSequence>& held_out) {
    eval_accuracy_ = accuracy(held_out);
    gated_ = eval_accuracy_ >= kGate;
    return eval_accuracy_;
  }

  bool gated() const { return gated_; }
  double eval_accuracy() const { return eval_accuracy_; }
  int cells() const { return static_cast<int>(centroids_.rows()); }

  void to_params(ParamSet& ps) const {
    ps.set("oracle.centroids", centroids_);
    Matrix meta(1, 4 + cell_style_.size());
    meta(0, 0) = static_cast<double>(rows_);
    meta(0, 1) = static_cast<double>(cols_);
    meta(0, 2) = gated_ ? 1.0 : 0.0;
    meta(0, 3) = eval_accuracy_;
    for (size_t i = 0; i < cell_style_.size(); ++i) meta(0, 4 + static_cast<Index>(i)) = cell_style_[i];
    ps.set("oracle.meta", meta);
  }

  static StyleOracle from_params(const ParamSet& ps) {
    StyleOracle o;
    o.centroids_ = ps.at("oracle.centroids");
    const Matrix& meta = ps.at("oracle.meta");
    o.rows_ = static_cast<Index>(meta(0, 0));
    o.cols_ = static_cast<Index>(meta(0, 1));
    o.gated_ = meta(0, 2) != 0.0;
    o.eval_accuracy_ = meta(0, 3);
    for (Index i = 4; i < meta.cols(); ++i) o.cell_style_.push_back(static_cast<int>(meta(0, i)));
    if (static_cast<Index>(o.cell_style_.size()) != o.centroids_.rows()) throw IoError("oracle tensors disagree");
    return o;
  }

 private:
  static RowVector features(const Matrix& frames) {
    const int nt = corpus_detail::trajectory_channels(static_cast<int>(frames.cols()));
    return flatten_rows(frames.rightCols(frames.cols() - nt));
  }

  Matrix centroids_;
  std::vector<int> cell_style_;
  Index rows_ = 0;
  Index cols_ = 0;
  bool gated_ = false;
  double eval_accuracy_ = 0.0;
};

inline double oracle_sra(const std::vector<Matrix>& samples, const std::vector<int>& intended, const StyleOracle& oracle) {
  if (!oracle.gated()) throw PreconditionError("oracle has not passed its accuracy gate");
  if (samples.size() != intended.size()) throw PreconditionError("one intended style per sample is required");
  if (samples.empty()) throw PreconditionError("sra of an empty set");
  int hit = 0;
  for (size_t i = 0; i < samples.size(); ++i) hit += oracle.predict(samples[i]) == intended[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(samples.size());
}

// Mean pairwise Euclidean distance over flattened frames.
inline double diversity_score(const std::vector<Matrix>& seqs) {
  if (seqs.size() < 2) throw PreconditionError("diversity needs at least 2 sequences");
  double sum = 0.0;
  size_t pairs = 0;
  for (size_t i = 0; i < seqs.size(); ++i)
    for (size_t j = i + 1; j < seqs.size(); ++j) {
      require_shape(seqs[i].rows() == seqs[j].rows() && seqs[i].cols() == seqs[j].cols(), "diversity shape mismatch");
      sum += (seqs[i] - seqs[j]).norm();
      ++pairs;
    }
  return sum / static_cast<double>(pairs);
}

// NMI with arithmetic-mean normalization: 2 I(A; B) / (H(A) + H(B)).
// Two single-cluster labelings count as identical (1).
inline double prototype_nmi(const std::vector<int>& assignments, const std::vector<int>& labels) {
  if (assignments.size() != labels.size()) throw PreconditionError("assignment and label lengths differ");
  if (assignments.empty()) throw PreconditionError("nmi of an empty labeling");
  const double n = static_cast<double>(assignments.size());
  std::map<std::pair<int, int>, double> joint;
  std::map<int, double> pa;
  std::map<int, double> pb;
  for (size_t i = 0; i < assignments.size(); ++i) {
    joint[{assignments[i], labels[i]}] += 1.0;
    pa[assignments[i]] += 1.0;
    pb[labels[i]] += 1.0;
  }
  auto entropy = [n](const std::map<int, double>& p) {
    double h = 0.0;
    for (const auto& [_, c] : p) h -= c / n * std::log(c / n);
    return h;
  };
  const double ha = entropy(pa);
  const double hb = entropy(pb);
  if (pa.size() == 1 && pb.size() == 1) return 1.0;
  if (ha + hb <= 0.0) return 0.0;
  double mi = 0.0;
  for (const auto& [key, c] : joint) mi += c / n * std::log(c * n / (pa[key.first] * pb[key.second]));
  return std::clamp(2.0 * mi / (ha + hb), 0.0, 1.0);
}

// Pearson correlation between the trajectory channels and the clean content program.
inline double content_score(const Matrix& frames, int content) {
  const int nt = corpus_detail::trajectory_channels(static_cast<int>(frames.cols()));
  if (nt == 0) throw PreconditionError("content score needs trajectory channels");
  const Matrix ref = content_trajectory(content, static_cast<int>(frames.rows()));
  const RowVector a = flatten_rows(frames.leftCols(nt));
  const RowVector b = flatten_rows(ref);
  const RowVector ac = a.array() - a.mean();
  const RowVector bc = b.array() - b.mean();
  const double den = ac.norm() * bc.norm();
  return den > 0.0 ? ac.dot(bc) / den : 0.0;
}

inline std::vector<int> usage_histogram(const std::vector<int>& assignments, int k) {
  std::vector<int> h(static_cast<size_t>(k), 0);
  for (int a : assignments) {
    if (a < 0 || a >= k) throw PreconditionError("assignment " + std::to_string(a) + " outside [0, " + std::to_string(k) + ")");
    ++h[static_cast<size_t>(a)];
  }
  return h;
}

struct MetricsReport {
  double sra = 0.0;            // reference-guided samples
  double sra_prototype = 0.0;  // prototype-guided samples
  double sra_transfer = 0.0;
  double content_score = 0.0;
  double diversity = 0.0;
  double nmi_global = 0.0;
  double nmi_local = 0.0;
  double oracle_accuracy = 0.0;
  std::vector<std::vector<int>> usage;  // per style, per global prototype

  void check() const {
    auto unit = [](double v, const char* f) {
      if (!(v >= 0.0 && v <= 1.0)) throw StateError(std::string(f) + " outside [0, 1]");
    };
    unit(sra, "sra");
    unit(sra_prototype, "sra_prototype");
    unit(sra_transfer, "sra_transfer");
    unit(nmi_global, "nmi_global");
    unit(nmi_local, "nmi_local");
    if (!(diversity >= 0.0)) throw StateError("diversity is negative");
  }

  json to_json() const {
    return {{"sra", sra},
            {"sra_prototype", sra_prototype},
            {"sra_transfer", sra_transfer},
            {"content_score", content_score},
            {"diversity", diversity},
            {"nmi_global", nmi_global},
            {"nmi_local", nmi_local},
            {"oracle_accuracy", oracle_accuracy},
            {"usage", usage}};
  }

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "metric,value\n";
    os << "sra," << sra << "\n";
    os << "sra_prototype," << sra_prototype << "\n";
    os << "sra_transfer," << sra_transfer << "\n";
    os << "content_score," << content_score << "\n";
    os << "diversity," << diversity << "\n";
    os << "nmi_global," << nmi_global << "\n";
    os << "nmi_local," << nmi_local << "\n";
    os << "oracle_accuracy," << oracle_accuracy << "\n";
    for (size_t s = 0; s < usage.size(); ++s)
      for (size_t k = 0; k < usage[s].size(); ++k) os << "usage_s" << s << "_k" << k << "," << usage[s][k] << "\n";
    return os.str();
  }
};

}  // namespace protostyle
