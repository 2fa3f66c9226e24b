#include "ilalab/linalg.hpp"

#include <cmath>
#include <string>

#include <spdlog/spdlog.h>

#include "ilalab/errors.hpp"

namespace ilalab {
namespace {

// In-place lower Cholesky factor; false on a non-positive pivot.
bool cholesky(Matrix& a) {
  const std::size_t n = a.rows;
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    const double* rj = &a.values[j * n];
    for (std::size_t k = 0; k < j; ++k) d -= rj[k] * rj[k];
    if (!(d > 0.0) || !std::isfinite(d)) return false;
    const double ljj = std::sqrt(d);
    a(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      const double* ri = &a.values[i * n];
      for (std::size_t k = 0; k < j; ++k) s -= ri[k] * rj[k];
      a(i, j) = s / ljj;
    }
  }
  return true;
}

std::vector<double> cholesky_solve(const Matrix& l, std::span<const double> b) {
  const std::size_t n = l.rows;
  std::vector<double> y(b.begin(), b.end());
  for (std::size_t i = 0; i < n; ++i) {
    double s = y[i];
    for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
    y[i] = s / l(i, i);
  }
  for (std::size_t i = n; i-- > 0;) {
    double s = y[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= l(k, i) * y[k];
    y[i] = s / l(i, i);
  }
  return y;
}

}  // namespace

Matrix gram_rows(const Matrix& a) {
  Matrix g(a.rows, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      const double v = dot(a.row(i), a.row(j));
      g(i, j) = v;
      g(j, i) = v;
    }
  }
  return g;
}

Matrix gram_cols(const Matrix& a) {
  Matrix g(a.cols, a.cols);
  for (std::size_t r = 0; r < a.rows; ++r) {
    const auto row = a.row(r);
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double ri = row[i];
      if (ri == 0.0) continue;
      double* gi = &g.values[i * a.cols];
      for (std::size_t j = 0; j <= i; ++j) gi[j] += ri * row[j];
    }
  }
  for (std::size_t i = 0; i < a.cols; ++i) {
    for (std::size_t j = 0; j < i; ++j) g(j, i) = g(i, j);
  }
  return g;
}

std::vector<double> mul_transposed(const Matrix& a, std::span<const double> v) {
  if (v.size() != a.rows) throw ShapeError("mul_transposed: size mismatch");
  std::vector<double> out(a.cols, 0.0);
  for (std::size_t r = 0; r < a.rows; ++r) {
    const auto row = a.row(r);
    for (std::size_t c = 0; c < a.cols; ++c) out[c] += row[c] * v[r];
  }
  return out;
}

std::vector<double> mul(const Matrix& a, std::span<const double> v) {
  if (v.size() != a.cols) throw ShapeError("mul: size mismatch");
  std::vector<double> out(a.rows);
  for (std::size_t r = 0; r < a.rows; ++r) out[r] = dot(a.row(r), v);
  return out;
}

SpdSolve solve_spd(Matrix a, std::span<const double> b) {
  if (a.rows != a.cols || b.size() != a.rows) throw ShapeError("solve_spd: size mismatch");
  const std::size_t n = a.rows;
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean_diag += a(i, i);
  mean_diag = n > 0 ? mean_diag / static_cast<double>(n) : 0.0;
  if (!std::isfinite(mean_diag)) throw NonFiniteError("solve_spd: non-finite system matrix");
  const Matrix original = a;
  double jitter = 0.0;
  for (int attempt = 0;; ++attempt) {
    if (cholesky(a)) break;
    if (attempt == 0) {
      jitter = 1e-12;
    } else {
      jitter *= 10.0;
    }
    if (jitter > 1e-6 * (1 + 1e-9)) {
      throw NonFiniteError("solve_spd: system is not positive definite even with 1e-6 diagonal jitter");
    }
    spdlog::warn("solve_spd: Cholesky failed, retrying with relative diagonal jitter {:g}", jitter);
    a = original;
    const double shift = jitter * (mean_diag > 0 ? mean_diag : 1.0);
    for (std::size_t i = 0; i < n; ++i) a(i, i) += shift;
  }
  SpdSolve out{cholesky_solve(a, b), jitter};
  for (double v : out.x) {
    if (!std::isfinite(v)) throw NonFiniteError("solve_spd: non-finite solution");
  }
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = norm2(a), nb = norm2(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

}  // namespace ilalab
