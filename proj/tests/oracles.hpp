#pragma once

// Independent reference implementations used to check the library.

#include "protostyle/core.hpp"

#include <cmath>
#include <map>
#include <vector>

namespace oracle {

using protostyle::Index;
using protostyle::Matrix;

// Plain Sinkhorn scaling in long double on K = exp(S / mu), iterated until
// both marginals are met to `tol` or `max_iters` passes. Returns the K x N plan.
inline Matrix reference_sinkhorn(const Matrix& features, const Matrix& prototypes, double mu, long double tol = 1e-15L,
                                 int max_iters = 1000000) {
  using ld = long double;
  const Index N = features.cols();
  const Index K = prototypes.cols();
  const Matrix scores = prototypes.transpose() * features;
  const ld row_target = static_cast<ld>(N) / static_cast<ld>(K);
  // Shift by the global maximum so the kernel stays representable.
  const ld top = static_cast<ld>(scores.maxCoeff());
  std::vector<ld> kern(static_cast<size_t>(K * N));
  for (Index k = 0; k < K; ++k)
    for (Index n = 0; n < N; ++n) kern[static_cast<size_t>(k * N + n)] = std::exp((static_cast<ld>(scores(k, n)) - top) / mu);
  std::vector<ld> u(static_cast<size_t>(K), 1.0L), v(static_cast<size_t>(N), 1.0L);
  auto entry = [&](Index k, Index n) { return u[static_cast<size_t>(k)] * kern[static_cast<size_t>(k * N + n)] * v[static_cast<size_t>(n)]; };
  for (int it = 0; it < max_iters; ++it) {
    for (Index k = 0; k < K; ++k) {
      ld s = 0.0L;
      for (Index n = 0; n < N; ++n) s += kern[static_cast<size_t>(k * N + n)] * v[static_cast<size_t>(n)];
      u[static_cast<size_t>(k)] = row_target / s;
    }
    for (Index n = 0; n < N; ++n) {
      ld s = 0.0L;
      for (Index k = 0; k < K; ++k) s += u[static_cast<size_t>(k)] * kern[static_cast<size_t>(k * N + n)];
      v[static_cast<size_t>(n)] = 1.0L / s;
    }
    // Columns are exact after the v pass; only rows need checking.
    ld worst = 0.0L;
    for (Index k = 0; k < K; ++k) {
      ld s = 0.0L;
      for (Index n = 0; n < N; ++n) s += entry(k, n);
      worst = std::max(worst, std::fabs(s - row_target));
    }
    if (worst < tol) break;
  }
  Matrix plan(K, N);
  for (Index k = 0; k < K; ++k)
    for (Index n = 0; n < N; ++n) plan(k, n) = static_cast<double>(entry(k, n));
  return plan;
}

// NMI = 2 I / (H(A) + H(B)) with I = H(A) + H(B) - H(A, B), from raw counts.
inline double brute_force_nmi(const std::vector<int>& a, const std::vector<int>& b) {
  const size_t n = a.size();
  auto entropy_of = [n](const std::map<std::vector<int>, int>& counts) {
    long double h = 0.0L;
    for (const auto& [_, c] : counts) {
      const long double p = static_cast<long double>(c) / static_cast<long double>(n);
      h -= p * std::log(p);
    }
    return h;
  };
  std::map<std::vector<int>, int> ca, cb, cab;
  for (size_t i = 0; i < n; ++i) {
    ++ca[{a[i]}];
    ++cb[{b[i]}];
    ++cab[{a[i], b[i]}];
  }
  if (ca.size() == 1 && cb.size() == 1) return 1.0;
  const long double ha = entropy_of(ca), hb = entropy_of(cb), hab = entropy_of(cab);
  if (ha + hb <= 0.0L) return 0.0;
  const long double mi = ha + hb - hab;
  return static_cast<double>(std::max(0.0L, std::min(1.0L, 2.0L * mi / (ha + hb))));
}

// One-sided paired sign-flip test of mean(diff) > 0, enumerated exactly over
// all 2^n sign patterns (n <= 24).
inline double paired_sign_flip_p(const std::vector<double>& diff) {
  const size_t n = diff.size();
  if (n == 0 || n > 24) throw protostyle::PreconditionError("exact sign-flip test supports 1..24 pairs");
  double observed = 0.0;
  for (double d : diff) observed += d;
  const std::uint64_t patterns = std::uint64_t{1} << n;
  std::uint64_t at_least = 0;
  for (std::uint64_t m = 0; m < patterns; ++m) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) s += (m >> i & 1) ? -diff[i] : diff[i];
    if (s >= observed - 1e-12 * std::max(1.0, std::abs(observed))) ++at_least;
  }
  return static_cast<double>(at_least) / static_cast<double>(patterns);
}

}  // namespace oracle
