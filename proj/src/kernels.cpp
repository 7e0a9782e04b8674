#include "doprompt/kernels.hpp"

namespace doprompt::kernels {

void gemm_acc(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    Real* __restrict crow = c + i * n;
    const Real* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = arow[p];
      const Real* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_at_b_acc(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k,
                   std::size_t n) {
  for (std::size_t r = 0; r < m; ++r) {
    const Real* arow = a + r * k;
    const Real* __restrict brow = b + r * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = arow[p];
      Real* __restrict crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::vector<Real> transpose(const Real* a, std::size_t rows, std::size_t cols) {
  std::vector<Real> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  }
  return out;
}

}  // namespace doprompt::kernels
