#pragma once

// Dense compute kernels behind the autodiff ops.
//
// Every kernel has two implementations: the OpenMP one used by the model and
// a plain serial one in `reference` kept for tests and benchmarks. The
// parallel kernels only split work over independent output rows, so results
// do not depend on the worker count.

#include <cstddef>
#include <span>

namespace mscada::kernels {

struct GemmDims {
  std::size_t m = 0;
  std::size_t n = 0;
  std::size_t k = 0;
};

// All matrices are row-major. When `accumulate` is false the output is
// overwritten, otherwise the product is added to it.

// C[m×n] = A[m×k] · B[k×n]
void gemm_nn(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c, bool accumulate = false);
// C[m×n] = A[m×k] · B[n×k]ᵀ
void gemm_nt(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c, bool accumulate = false);
// C[m×n] = A[k×m]ᵀ · B[k×n]
void gemm_tn(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c, bool accumulate = false);

struct ConvGeom {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t ksize = 3;  // odd, stride 1, padding ksize/2
};

// Unfolds one C×H×W image into a (C·k·k)×(H·W) column matrix.
void im2col(ConvGeom g, std::span<const double> image, std::span<double> col);
// Adjoint of im2col: scatters columns back, accumulating into `image`.
void col2im(ConvGeom g, std::span<const double> col, std::span<double> image);

// Sets the OpenMP worker count used by the parallel kernels (0 keeps the
// runtime default). Returns the count in effect.
int set_num_threads(int n);
int num_threads();

namespace reference {

void gemm_nn(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c, bool accumulate = false);
void gemm_nt(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c, bool accumulate = false);
void gemm_tn(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c, bool accumulate = false);
void im2col(ConvGeom g, std::span<const double> image, std::span<double> col);
void col2im(ConvGeom g, std::span<const double> col, std::span<double> image);

}  // namespace reference

}  // namespace mscada::kernels
