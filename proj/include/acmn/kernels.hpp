#pragma once

#include <algorithm>
#include <cstddef>

#include "acmn/common.hpp"

// Dense kernels shared by the tape ops.  All matrices are row-major and
// contiguous.  Every routine has a fixed, documented accumulation order so
// results are reproducible run to run; inner loops are written so gcc can
// vectorize them under strict IEEE semantics (independent accumulators, no
// reductions across the vector lane).

namespace acmn::kernels {

// Accumulation order: ascending i, 8 partial sums combined pairwise, tail last.
template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc0 = 0, acc1 = 0, acc2 = 0, acc3 = 0, acc4 = 0, acc5 = 0, acc6 = 0,
    acc7 = 0;
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 += a[i + 0] * b[i + 0];
    acc1 += a[i + 1] * b[i + 1];
    acc2 += a[i + 2] * b[i + 2];
    acc3 += a[i + 3] * b[i + 3];
    acc4 += a[i + 4] * b[i + 4];
    acc5 += a[i + 5] * b[i + 5];
    acc6 += a[i + 6] * b[i + 6];
    acc7 += a[i + 7] * b[i + 7];
  }
  T sum = ((acc0 + acc4) + (acc1 + acc5)) + ((acc2 + acc6) + (acc3 + acc7));
  for (; i < n; ++i) sum += a[i] * b[i];
  return sum;
}

template <typename T>
void axpy(T* y, T alpha, const T* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void scale(T* x, T alpha, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

// c[m,n] = a[m,k] * b[k,n]; Acc accumulates into c instead of overwriting.
// Per output element the k index ascends, matching a naive triple loop.
template <typename T, bool Acc = false>
void gemm_nn(T* c, const T* a, const T* b, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + std::size_t(i) * n;
    if (!Acc) std::fill(crow, crow + n, T(0));
    const T* arow = a + std::size_t(i) * k;
    for (int l = 0; l < k; ++l) {
      T av = arow[l];
      const T* brow = b + std::size_t(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,n] = a[m,k] * b[n,k]^T  (both operands traversed along contiguous rows).
// Fine for the small matmul backwards; for conv-sized operands prefer the
// transpose + gemm_tn route, which streams each operand once instead of
// re-reading b per output row.
template <typename T, bool Acc = false>
void gemm_nt(T* c, const T* a, const T* b, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + std::size_t(i) * k;
    T* crow = c + std::size_t(i) * n;
    for (int j = 0; j < n; ++j) {
      T v = dot(arow, b + std::size_t(j) * k, std::size_t(k));
      if (Acc)
        crow[j] += v;
      else
        crow[j] = v;
    }
  }
}

// dst[cols,rows] = src[rows,cols], 32x32 tiles to keep both sides cache-local.
template <typename T>
void transpose(T* dst, const T* src, int rows, int cols) {
  constexpr int kTile = 32;
  for (int r0 = 0; r0 < rows; r0 += kTile) {
    int r1 = std::min(r0 + kTile, rows);
    for (int c0 = 0; c0 < cols; c0 += kTile) {
      int c1 = std::min(c0 + kTile, cols);
      for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c)
          dst[std::size_t(c) * rows + r] = src[std::size_t(r) * cols + c];
    }
  }
}

// c[k,n] = a[m,k]^T * b[m,n].  The i loop stays outermost per output (each
// c element accumulates over ascending i exactly as the naive loop does),
// but c is walked in four-row blocks over column chunks sized to stay in L1
// while the 24-odd b rows stream past, instead of re-streaming the whole of
// c from memory once per i.
template <typename T, bool Acc = false>
void gemm_tn(T* c, const T* a, const T* b, int m, int k, int n) {
  if (!Acc) std::fill(c, c + std::size_t(k) * n, T(0));
  constexpr int kChunk = 1024;
  for (int j0 = 0; j0 < n; j0 += kChunk) {
    int jn = std::min(kChunk, n - j0);
    int l = 0;
    for (; l + 4 <= k; l += 4) {
      T* c0 = c + (std::size_t(l) + 0) * n + j0;
      T* c1 = c + (std::size_t(l) + 1) * n + j0;
      T* c2 = c + (std::size_t(l) + 2) * n + j0;
      T* c3 = c + (std::size_t(l) + 3) * n + j0;
      for (int i = 0; i < m; ++i) {
        const T* arow = a + std::size_t(i) * k + l;
        const T* br = b + std::size_t(i) * n + j0;
        T av0 = arow[0], av1 = arow[1], av2 = arow[2], av3 = arow[3];
        for (int j = 0; j < jn; ++j) {
          T bv = br[j];
          c0[j] += av0 * bv;
          c1[j] += av1 * bv;
          c2[j] += av2 * bv;
          c3[j] += av3 * bv;
        }
      }
    }
    for (; l < k; ++l) {
      T* crow = c + std::size_t(l) * n + j0;
      for (int i = 0; i < m; ++i) {
        T av = a[std::size_t(i) * k + l];
        const T* br = b + std::size_t(i) * n + j0;
        for (int j = 0; j < jn; ++j) crow[j] += av * br[j];
      }
    }
  }
}

// y[m] = a[m,k] * x[k].
template <typename T, bool Acc = false>
void gemv(T* y, const T* a, const T* x, int m, int k) {
  for (int i = 0; i < m; ++i) {
    T v = dot(a + std::size_t(i) * k, x, std::size_t(k));
    if (Acc)
      y[i] += v;
    else
      y[i] = v;
  }
}

// y[k] += a[m,k]^T * x[m].
template <typename T>
void gemv_t_acc(T* y, const T* a, const T* x, int m, int k) {
  for (int i = 0; i < m; ++i) {
    T xv = x[i];
    const T* arow = a + std::size_t(i) * k;
    for (int j = 0; j < k; ++j) y[j] += xv * arow[j];
  }
}

inline int conv_out_dim(int in, int kernel, int stride, int pad) {
  int span = in + 2 * pad - kernel;
  if (span < 0) throw ShapeError("conv: kernel larger than padded input");
  return span / stride + 1;
}

// Lowers x[ci,h,w] to col[ci*kh*kw, oh*ow] with row index (ci, ky, kx) in
// that order, so a plain gemm over col reproduces the naive convolution's
// accumulation order exactly.
template <typename T>
void im2col(const T* x, int ci, int h, int w, int kh, int kw, int stride,
            int pad, int oh, int ow, T* col) {
  for (int c = 0; c < ci; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        T* row = col + (std::size_t(c) * kh * kw + std::size_t(ky) * kw + kx) *
                           (std::size_t(oh) * ow);
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride + ky - pad;
          T* dst = row + std::size_t(oy) * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          const T* src = x + (std::size_t(c) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride + kx - pad;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

// Scatter-add inverse of im2col.
template <typename T>
void col2im_acc(const T* col, int ci, int h, int w, int kh, int kw, int stride,
                int pad, int oh, int ow, T* x) {
  for (int c = 0; c < ci; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const T* row = col + (std::size_t(c) * kh * kw + std::size_t(ky) * kw +
                              kx) *
                                 (std::size_t(oh) * ow);
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          T* dst = x + (std::size_t(c) * h + iy) * w;
          const T* src = row + std::size_t(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace acmn::kernels
