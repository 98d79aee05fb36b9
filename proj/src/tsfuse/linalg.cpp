#include "tsfuse/linalg.hpp"

#include <algorithm>
#include <cmath>

#include "tsfuse/error.hpp"

namespace tsfuse {

std::vector<double> singular_values(const Tensor& matrix) {
  if (matrix.rank() != 2) throw ShapeError("singular_values expects a matrix, got " + shape_string(matrix.shape()));
  std::size_t rows = matrix.dim(0);
  std::size_t cols = matrix.dim(1);
  // Work on the orientation with fewer columns; singular values are shared.
  const bool flip = cols > rows;
  if (flip) std::swap(rows, cols);
  // column-major copy: column j occupies a[j * rows .. j * rows + rows)
  std::vector<double> a(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      a[j * rows + i] = flip ? matrix.at(j, i) : matrix.at(i, j);

  constexpr double kTol = 1e-12;
  constexpr int kMaxSweeps = 100;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < cols; ++p)
      for (std::size_t q = p + 1; q < cols; ++q) {
        double* cp = a.data() + p * rows;
        double* cq = a.data() + q * rows;
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < rows; ++i) {
          alpha += cp[i] * cp[i];
          beta += cq[i] * cq[i];
          gamma += cp[i] * cq[i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= kTol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < rows; ++i) {
          const double xp = cp[i];
          const double xq = cq[i];
          cp[i] = c * xp - s * xq;
          cq[i] = s * xp + c * xq;
        }
      }
    if (!rotated) break;
  }

  std::vector<double> sv(cols);
  for (std::size_t j = 0; j < cols; ++j) {
    double norm = 0.0;
    for (std::size_t i = 0; i < rows; ++i) norm += a[j * rows + i] * a[j * rows + i];
    sv[j] = std::sqrt(norm);
  }
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  Tensor out({a.dim(0), b.dim(1)}, 0.0);
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t k = 0; k < a.dim(1); ++k)
      for (std::size_t j = 0; j < b.dim(1); ++j) out.at(i, j) += a.at(i, k) * b.at(k, j);
  return out;
}

double frobenius_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

}  // namespace tsfuse
