// SPDX-License-Identifier: Apache-2.0
//
// AVX2 lane. Mirrors the scalar reference element by element: broadcast
// matmul keeps the i-k-j accumulation order, every kernel uses separate
// mul/add (no FMA), and sqrt/div map to the correctly-rounded vector
// instructions. Equivalence tests assert bit-identity against the scalar
// lane, not a tolerance.
#include "esft/kernels.hpp"

#ifdef ESFT_HAVE_AVX2

#include <cmath>
#include <immintrin.h>

namespace esft::kernels {
namespace {

void matmul_acc_avx2(double* c, const double* a, const double* b, int m, int k, int n) {
    const int n4 = n & ~3;
    for (int i = 0; i < m; ++i) {
        double* crow = c + static_cast<long>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const double aik = a[static_cast<long>(i) * k + kk];
            const double* brow = b + static_cast<long>(kk) * n;
            const __m256d va = _mm256_set1_pd(aik);
            int j = 0;
            for (; j < n4; j += 4) {
                const __m256d vb = _mm256_loadu_pd(brow + j);
                const __m256d vc = _mm256_loadu_pd(crow + j);
                _mm256_storeu_pd(crow + j, _mm256_add_pd(vc, _mm256_mul_pd(va, vb)));
            }
            for (; j < n; ++j) {
                crow[j] += aik * brow[j];
            }
        }
    }
}

void transpose_avx2(double* dst, const double* src, int rows, int cols) {
    // Pure data movement; the scalar loop is already fine.
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            dst[static_cast<long>(c) * rows + r] = src[static_cast<long>(r) * cols + c];
        }
    }
}

void add_avx2(double* out, const double* a, const double* b, int n) {
    int i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    }
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_avx2(double* out, const double* a, const double* b, int n) {
    int i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    }
    for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_avx2(double* out, const double* a, const double* b, int n) {
    int i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    }
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_avx2(double* out, const double* a, double alpha, int n) {
    const __m256d va = _mm256_set1_pd(alpha);
    int i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), va));
    }
    for (; i < n; ++i) out[i] = a[i] * alpha;
}

void axpy_avx2(double* y, double alpha, const double* x, int n) {
    const __m256d va = _mm256_set1_pd(alpha);
    int i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d vx = _mm256_loadu_pd(x + i);
        const __m256d vy = _mm256_loadu_pd(y + i);
        _mm256_storeu_pd(y + i, _mm256_add_pd(vy, _mm256_mul_pd(va, vx)));
    }
    for (; i < n; ++i) y[i] = y[i] + alpha * x[i];
}

void adam_update_avx2(double* param, double* m, double* v, const double* g, int n,
                      double lr, double beta1, double beta2, double eps, double bc1, double bc2) {
    const __m256d vb1 = _mm256_set1_pd(beta1);
    const __m256d vb2 = _mm256_set1_pd(beta2);
    const __m256d vomb1 = _mm256_set1_pd(1.0 - beta1);
    const __m256d vomb2 = _mm256_set1_pd(1.0 - beta2);
    const __m256d vbc1 = _mm256_set1_pd(bc1);
    const __m256d vbc2 = _mm256_set1_pd(bc2);
    const __m256d veps = _mm256_set1_pd(eps);
    const __m256d vlr = _mm256_set1_pd(lr);
    int i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d vg = _mm256_loadu_pd(g + i);
        const __m256d vm = _mm256_add_pd(_mm256_mul_pd(vb1, _mm256_loadu_pd(m + i)),
                                         _mm256_mul_pd(vomb1, vg));
        const __m256d vv = _mm256_add_pd(_mm256_mul_pd(vb2, _mm256_loadu_pd(v + i)),
                                         _mm256_mul_pd(vomb2, _mm256_mul_pd(vg, vg)));
        _mm256_storeu_pd(m + i, vm);
        _mm256_storeu_pd(v + i, vv);
        const __m256d mhat = _mm256_div_pd(vm, vbc1);
        const __m256d vhat = _mm256_div_pd(vv, vbc2);
        const __m256d denom = _mm256_add_pd(_mm256_sqrt_pd(vhat), veps);
        const __m256d step = _mm256_mul_pd(vlr, _mm256_div_pd(mhat, denom));
        _mm256_storeu_pd(param + i, _mm256_sub_pd(_mm256_loadu_pd(param + i), step));
    }
    const double omb1 = 1.0 - beta1;
    const double omb2 = 1.0 - beta2;
    for (; i < n; ++i) {
        const double gi = g[i];
        const double mi = beta1 * m[i] + omb1 * gi;
        const double vi = beta2 * v[i] + omb2 * (gi * gi);
        m[i] = mi;
        v[i] = vi;
        param[i] = param[i] - lr * ((mi / bc1) / (std::sqrt(vi / bc2) + eps));
    }
}

} // namespace

const Ops& avx2_ops() {
    static const Ops table{
        matmul_acc_avx2, transpose_avx2, add_avx2,  sub_avx2,
        mul_avx2,        scale_avx2,     axpy_avx2, adam_update_avx2,
    };
    return table;
}

} // namespace esft::kernels

#endif // ESFT_HAVE_AVX2
