#include "mscada/kernels.hpp"

#include <algorithm>
#include <cassert>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mscada::kernels {

namespace {

constexpr std::size_t kTileRows = 4;
constexpr std::size_t kTileCols = 32;

// A is addressed as a[i·row_stride + p·col_stride], so one kernel serves
// both A and Aᵀ operands.
struct StridedA {
  const double* data;
  std::size_t row_stride;
  std::size_t col_stride;
  double at(std::size_t i, std::size_t p) const { return data[i * row_stride + p * col_stride]; }
};

// Full 4×32 register tile: C[i0:i0+4, 0:32] (+)= A[i0:i0+4, :] · B[:, 0:32].
void tile_full(StridedA a, std::size_t i0, const double* b, std::size_t ldb, double* c,
               std::size_t ldc, std::size_t depth, bool accumulate) {
  double t0[kTileCols], t1[kTileCols], t2[kTileCols], t3[kTileCols];
  if (accumulate) {
    for (std::size_t j = 0; j < kTileCols; ++j) {
      t0[j] = c[j];
      t1[j] = c[ldc + j];
      t2[j] = c[2 * ldc + j];
      t3[j] = c[3 * ldc + j];
    }
  } else {
    std::fill_n(t0, kTileCols, 0.0);
    std::fill_n(t1, kTileCols, 0.0);
    std::fill_n(t2, kTileCols, 0.0);
    std::fill_n(t3, kTileCols, 0.0);
  }
  for (std::size_t p = 0; p < depth; ++p) {
    const double* br = b + p * ldb;
    const double a0 = a.at(i0, p);
    const double a1 = a.at(i0 + 1, p);
    const double a2 = a.at(i0 + 2, p);
    const double a3 = a.at(i0 + 3, p);
#pragma omp simd
    for (std::size_t j = 0; j < kTileCols; ++j) {
      t0[j] += a0 * br[j];
      t1[j] += a1 * br[j];
      t2[j] += a2 * br[j];
      t3[j] += a3 * br[j];
    }
  }
  for (std::size_t j = 0; j < kTileCols; ++j) {
    c[j] = t0[j];
    c[ldc + j] = t1[j];
    c[2 * ldc + j] = t2[j];
    c[3 * ldc + j] = t3[j];
  }
}

// Ragged edge tile, rows ≤ 4 and cols ≤ 32.
void tile_edge(StridedA a, std::size_t i0, const double* b, std::size_t ldb, double* c,
               std::size_t ldc, std::size_t rows, std::size_t cols, std::size_t depth,
               bool accumulate) {
  double t[kTileRows][kTileCols];
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) t[r][j] = accumulate ? c[r * ldc + j] : 0.0;
  }
  for (std::size_t p = 0; p < depth; ++p) {
    const double* br = b + p * ldb;
    for (std::size_t r = 0; r < rows; ++r) {
      const double av = a.at(i0 + r, p);
#pragma omp simd
      for (std::size_t j = 0; j < cols; ++j) t[r][j] += av * br[j];
    }
  }
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) c[r * ldc + j] = t[r][j];
  }
}

void gemm_strided(GemmDims d, StridedA a, const double* bp, double* cp, bool accumulate) {
  if (d.m == 0 || d.n == 0) return;
  if (d.k == 0) {
    if (!accumulate) std::fill_n(cp, d.m * d.n, 0.0);
    return;
  }
  const auto row_blocks = static_cast<long>((d.m + kTileRows - 1) / kTileRows);
#pragma omp parallel for schedule(static)
  for (long rb = 0; rb < row_blocks; ++rb) {
    const std::size_t i0 = static_cast<std::size_t>(rb) * kTileRows;
    const std::size_t rows = std::min(kTileRows, d.m - i0);
    for (std::size_t j0 = 0; j0 < d.n; j0 += kTileCols) {
      const std::size_t cols = std::min(kTileCols, d.n - j0);
      double* ct = cp + i0 * d.n + j0;
      if (rows == kTileRows && cols == kTileCols) {
        tile_full(a, i0, bp + j0, d.n, ct, d.n, d.k, accumulate);
      } else {
        tile_edge(a, i0, bp + j0, d.n, ct, d.n, rows, cols, d.k, accumulate);
      }
    }
  }
}

}  // namespace

void gemm_nn(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c, bool accumulate) {
  assert(a.size() >= d.m * d.k && b.size() >= d.k * d.n && c.size() >= d.m * d.n);
  gemm_strided(d, StridedA{a.data(), d.k, 1}, b.data(), c.data(), accumulate);
}

void gemm_tn(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c, bool accumulate) {
  assert(a.size() >= d.m * d.k && b.size() >= d.k * d.n && c.size() >= d.m * d.n);
  gemm_strided(d, StridedA{a.data(), 1, d.m}, b.data(), c.data(), accumulate);
}

void gemm_nt(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c, bool accumulate) {
  assert(a.size() >= d.m * d.k && b.size() >= d.n * d.k && c.size() >= d.m * d.n);
  // Rows of A and B are both contiguous along k: blocked dot products.
  const double* ap = a.data();
  const double* bp = b.data();
  double* cp = c.data();
#pragma omp parallel for schedule(static)
  for (long li = 0; li < static_cast<long>(d.m); ++li) {
    const auto i = static_cast<std::size_t>(li);
    const double* ar = ap + i * d.k;
    std::size_t j = 0;
    for (; j + 4 <= d.n; j += 4) {
      const double* b0 = bp + j * d.k;
      const double* b1 = b0 + d.k;
      const double* b2 = b1 + d.k;
      const double* b3 = b2 + d.k;
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
#pragma omp simd reduction(+ : s0, s1, s2, s3)
      for (std::size_t p = 0; p < d.k; ++p) {
        s0 += ar[p] * b0[p];
        s1 += ar[p] * b1[p];
        s2 += ar[p] * b2[p];
        s3 += ar[p] * b3[p];
      }
      double* cr = cp + i * d.n + j;
      if (accumulate) {
        cr[0] += s0;
        cr[1] += s1;
        cr[2] += s2;
        cr[3] += s3;
      } else {
        cr[0] = s0;
        cr[1] = s1;
        cr[2] = s2;
        cr[3] = s3;
      }
    }
    for (; j < d.n; ++j) {
      const double* br = bp + j * d.k;
      double s = 0.0;
#pragma omp simd reduction(+ : s)
      for (std::size_t p = 0; p < d.k; ++p) s += ar[p] * br[p];
      cp[i * d.n + j] = accumulate ? cp[i * d.n + j] + s : s;
    }
  }
}

void im2col(ConvGeom g, std::span<const double> image, std::span<double> col) {
  const std::size_t hw = g.height * g.width;
  const auto pad = static_cast<long>(g.ksize / 2);
  const auto h = static_cast<long>(g.height);
  const auto w = static_cast<long>(g.width);
  assert(image.size() >= g.channels * hw && col.size() >= g.channels * g.ksize * g.ksize * hw);
#pragma omp parallel for schedule(static)
  for (long ch = 0; ch < static_cast<long>(g.channels); ++ch) {
    const double* src = image.data() + static_cast<std::size_t>(ch) * hw;
    for (std::size_t ky = 0; ky < g.ksize; ++ky) {
      for (std::size_t kx = 0; kx < g.ksize; ++kx) {
        const std::size_t row = (static_cast<std::size_t>(ch) * g.ksize + ky) * g.ksize + kx;
        double* dst = col.data() + row * hw;
        const long dy = static_cast<long>(ky) - pad;
        const long dx = static_cast<long>(kx) - pad;
        for (long y = 0; y < h; ++y) {
          const long sy = y + dy;
          double* out = dst + y * w;
          if (sy < 0 || sy >= h) {
            std::fill_n(out, w, 0.0);
            continue;
          }
          const double* in = src + sy * w;
          for (long x = 0; x < w; ++x) {
            const long sx = x + dx;
            out[x] = (sx >= 0 && sx < w) ? in[sx] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(ConvGeom g, std::span<const double> col, std::span<double> image) {
  const std::size_t hw = g.height * g.width;
  const auto pad = static_cast<long>(g.ksize / 2);
  const auto h = static_cast<long>(g.height);
  const auto w = static_cast<long>(g.width);
#pragma omp parallel for schedule(static)
  for (long ch = 0; ch < static_cast<long>(g.channels); ++ch) {
    double* dst = image.data() + static_cast<std::size_t>(ch) * hw;
    for (std::size_t ky = 0; ky < g.ksize; ++ky) {
      for (std::size_t kx = 0; kx < g.ksize; ++kx) {
        const std::size_t row = (static_cast<std::size_t>(ch) * g.ksize + ky) * g.ksize + kx;
        const double* src = col.data() + row * hw;
        const long dy = static_cast<long>(ky) - pad;
        const long dx = static_cast<long>(kx) - pad;
        for (long y = 0; y < h; ++y) {
          const long sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          const double* in = src + y * w;
          double* out = dst + sy * w;
          const long x0 = std::max(0L, -dx);
          const long x1 = std::min(w, w - dx);
          for (long x = x0; x < x1; ++x) out[x + dx] += in[x];
        }
      }
    }
  }
}

int set_num_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
  return omp_get_max_threads();
#else
  (void)n;
  return 1;
#endif
}

int num_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace reference {

void gemm_nn(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c, bool accumulate) {
  for (std::size_t i = 0; i < d.m; ++i) {
    for (std::size_t j = 0; j < d.n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < d.k; ++p) s += a[i * d.k + p] * b[p * d.n + j];
      c[i * d.n + j] = accumulate ? c[i * d.n + j] + s : s;
    }
  }
}

void gemm_nt(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c, bool accumulate) {
  for (std::size_t i = 0; i < d.m; ++i) {
    for (std::size_t j = 0; j < d.n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < d.k; ++p) s += a[i * d.k + p] * b[j * d.k + p];
      c[i * d.n + j] = accumulate ? c[i * d.n + j] + s : s;
    }
  }
}

void gemm_tn(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c, bool accumulate) {
  for (std::size_t i = 0; i < d.m; ++i) {
    for (std::size_t j = 0; j < d.n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < d.k; ++p) s += a[p * d.m + i] * b[p * d.n + j];
      c[i * d.n + j] = accumulate ? c[i * d.n + j] + s : s;
    }
  }
}

void im2col(ConvGeom g, std::span<const double> image, std::span<double> col) {
  const auto pad = static_cast<long>(g.ksize / 2);
  const auto h = static_cast<long>(g.height);
  const auto w = static_cast<long>(g.width);
  std::size_t idx = 0;
  for (std::size_t ch = 0; ch < g.channels; ++ch) {
    for (long ky = 0; ky < static_cast<long>(g.ksize); ++ky) {
      for (long kx = 0; kx < static_cast<long>(g.ksize); ++kx) {
        for (long y = 0; y < h; ++y) {
          for (long x = 0; x < w; ++x) {
            const long sy = y + ky - pad;
            const long sx = x + kx - pad;
            const bool inside = sy >= 0 && sy < h && sx >= 0 && sx < w;
            col[idx++] = inside ? image[ch * g.height * g.width + static_cast<std::size_t>(sy * w + sx)] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(ConvGeom g, std::span<const double> col, std::span<double> image) {
  const auto pad = static_cast<long>(g.ksize / 2);
  const auto h = static_cast<long>(g.height);
  const auto w = static_cast<long>(g.width);
  std::size_t idx = 0;
  for (std::size_t ch = 0; ch < g.channels; ++ch) {
    for (long ky = 0; ky < static_cast<long>(g.ksize); ++ky) {
      for (long kx = 0; kx < static_cast<long>(g.ksize); ++kx) {
        for (long y = 0; y < h; ++y) {
          for (long x = 0; x < w; ++x, ++idx) {
            const long sy = y + ky - pad;
            const long sx = x + kx - pad;
            if (sy >= 0 && sy < h && sx >= 0 && sx < w) {
              image[ch * g.height * g.width + static_cast<std::size_t>(sy * w + sx)] += col[idx];
            }
          }
        }
      }
    }
  }
}

}  // namespace reference

}  // namespace mscada::kernels
