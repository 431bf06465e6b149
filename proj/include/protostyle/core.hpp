#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace protostyle {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;
using Rng = std::mt19937_64;

// Error hierarchy. The CLI maps each category onto an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* category() const noexcept { return "error"; }
};

class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error("config error [" + field + "]: " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }
  const char* category() const noexcept override { return "config"; }

 private:
  std::string field_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape error: " + what) {}
  const char* category() const noexcept override { return "shape"; }
};

class PreconditionError : public Error {
 public:
  explicit PreconditionError(const std::string& what) : Error("precondition violated: " + what) {}
  const char* category() const noexcept override { return "precondition"; }
};

class StateError : public Error {
 public:
  explicit StateError(const std::string& what) : Error("state error: " + what) {}
  const char* category() const noexcept override { return "state"; }
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io error: " + what) {}
  const char* category() const noexcept override { return "io"; }
};

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

// splitmix64 finalizer; derives independent child seeds from a parent seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline Matrix randn(Index rows, Index cols, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

// Row-major flatten / unflatten; Eigen storage is column-major, the on-disk and
// token layouts are row-major.
inline RowVector flatten_rows(const Matrix& m) {
  RowVector out(m.size());
  Index k = 0;
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) out(k++) = m(i, j);
  return out;
}

inline Matrix unflatten_rows(const RowVector& v, Index rows, Index cols) {
  require_shape(v.size() == rows * cols, "unflatten size mismatch");
  Matrix m(rows, cols);
  Index k = 0;
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = v(k++);
  return m;
}

inline double round_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

inline void round_to_f32(Matrix& m) {
  m = m.unaryExpr([](double x) { return round_f32(x); });
}

inline RowVector normalized_row(const RowVector& v) {
  const double n = v.norm();
  if (n == 0.0) return v;
  return v / n;
}

}  // namespace protostyle
