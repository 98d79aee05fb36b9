#pragma once

#include <vector>

#include "tsfuse/tensor.hpp"

namespace tsfuse {

// Singular values of a [rows x cols] matrix in descending order, by one-sided
// Jacobi rotations. Sweeps stop once every column pair is orthogonal to
// 1e-12 relative.
std::vector<double> singular_values(const Tensor& matrix);

// Dense product of two matrices, outside any graph.
Tensor matmul(const Tensor& a, const Tensor& b);

double frobenius_norm(const Tensor& t);

}  // namespace tsfuse
