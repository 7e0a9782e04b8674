#pragma once

#include <cstddef>
#include <vector>

#include "doprompt/tensor.hpp"

// Dense row-major kernels. Each output element is accumulated in a fixed
// order, so results do not depend on buffer alignment.
namespace doprompt::kernels {

/// C[m x n] += A[m x k] * B[k x n]
void gemm_acc(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n);

/// C[k x n] += A[m x k]^T * B[m x n]
void gemm_at_b_acc(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k,
                   std::size_t n);

std::vector<Real> transpose(const Real* a, std::size_t rows, std::size_t cols);

}  // namespace doprompt::kernels
