// SPDX-License-Identifier: Apache-2.0
//
// Dense products over contiguous row-major buffers, backed by Eigen. All
// kernels accumulate into the output (C += ...), callers zero it first when
// needed.
#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cstddef>
#include <vector>

namespace cycleadapt::diff::kernels {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

inline Eigen::Index ix(std::size_t v) { return static_cast<Eigen::Index>(v); }

// Eigen picks its product path from the row count, so the same row can round
// differently in batches of different sizes. Forward products always run on
// zero-padded blocks of this many rows, which keeps each output row a function
// of its input row alone.
inline constexpr std::size_t kRowBlock = 16;

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  const ConstMap bm(b, ix(k), ix(n));
  const std::size_t full = m - m % kRowBlock;
  for (std::size_t i = 0; i < full; i += kRowBlock)
    Map(c + i * n, ix(kRowBlock), ix(n)).noalias() += ConstMap(a + i * k, ix(kRowBlock), ix(k)) * bm;
  const std::size_t rest = m - full;
  if (rest == 0) return;
  thread_local std::vector<double> pa, pc;
  pa.assign(kRowBlock * k, 0.0);
  pc.assign(kRowBlock * n, 0.0);
  std::copy(a + full * k, a + m * k, pa.begin());
  std::copy(c + full * n, c + m * n, pc.begin());
  Map(pc.data(), ix(kRowBlock), ix(n)).noalias() += ConstMap(pa.data(), ix(kRowBlock), ix(k)) * bm;
  std::copy(pc.begin(), pc.begin() + static_cast<std::ptrdiff_t>(rest * n), c + full * n);
}

// C[m x n] += A[m x k] * B[n x k]^T
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  Map(c, ix(m), ix(n)).noalias() += ConstMap(a, ix(m), ix(k)) * ConstMap(b, ix(n), ix(k)).transpose();
}

// C[k x n] += A[m x k]^T * B[m x n]
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  Map(c, ix(k), ix(n)).noalias() += ConstMap(a, ix(m), ix(k)).transpose() * ConstMap(b, ix(m), ix(n));
}

}  // namespace cycleadapt::diff::kernels
