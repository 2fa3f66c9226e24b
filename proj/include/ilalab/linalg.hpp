#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace ilalab {

// Row-major dense matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, 0.0) {}

  double& operator()(std::size_t i, std::size_t j) { return values[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
  std::span<const double> row(std::size_t i) const { return std::span<const double>(values).subspan(i * cols, cols); }
};

// A A^T (rows x rows) and A^T A (cols x cols).
Matrix gram_rows(const Matrix& a);
Matrix gram_cols(const Matrix& a);
// A^T v and A v.
std::vector<double> mul_transposed(const Matrix& a, std::span<const double> v);
std::vector<double> mul(const Matrix& a, std::span<const double> v);

struct SpdSolve {
  std::vector<double> x;
  double jitter = 0.0;  // diagonal shift that was needed, relative to the mean diagonal
};

// Solves a x = b for symmetric positive definite a by Cholesky. On a
// non-positive pivot the diagonal is shifted by 1e-12 .. 1e-6 times its mean
// (each escalation is logged); throws NonFiniteError if that still fails.
SpdSolve solve_spd(Matrix a, std::span<const double> b);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
double cosine(std::span<const double> a, std::span<const double> b);

}  // namespace ilalab
