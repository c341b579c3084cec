// SPDX-License-Identifier: Apache-2.0
//
// Reference lane. The i-k-j matmul order and the explicit mul-then-add in
// every kernel define the exact floating-point semantics the SIMD lane must
// reproduce bit for bit. Do not "optimize" these into FMA or reassociated
// reductions.
#include "esft/kernels.hpp"

#include <cmath>

namespace esft::kernels {
namespace {

void matmul_acc_scalar(double* c, const double* a, const double* b, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        double* crow = c + static_cast<long>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const double aik = a[static_cast<long>(i) * k + kk];
            const double* brow = b + static_cast<long>(kk) * n;
            for (int j = 0; j < n; ++j) {
                crow[j] += aik * brow[j];
            }
        }
    }
}

void transpose_scalar(double* dst, const double* src, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            dst[static_cast<long>(c) * rows + r] = src[static_cast<long>(r) * cols + c];
        }
    }
}

void add_scalar(double* out, const double* a, const double* b, int n) {
    for (int i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_scalar(double* out, const double* a, const double* b, int n) {
    for (int i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_scalar(double* out, const double* a, const double* b, int n) {
    for (int i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_scalar(double* out, const double* a, double alpha, int n) {
    for (int i = 0; i < n; ++i) out[i] = a[i] * alpha;
}

void axpy_scalar(double* y, double alpha, const double* x, int n) {
    for (int i = 0; i < n; ++i) y[i] = y[i] + alpha * x[i];
}

void adam_update_scalar(double* param, double* m, double* v, const double* g, int n,
                        double lr, double beta1, double beta2, double eps, double bc1, double bc2) {
    const double omb1 = 1.0 - beta1;
    const double omb2 = 1.0 - beta2;
    for (int i = 0; i < n; ++i) {
        const double gi = g[i];
        const double mi = beta1 * m[i] + omb1 * gi;
        const double vi = beta2 * v[i] + omb2 * (gi * gi);
        m[i] = mi;
        v[i] = vi;
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        param[i] = param[i] - lr * (mhat / (std::sqrt(vhat) + eps));
    }
}

} // namespace

const Ops& scalar_ops() {
    static const Ops table{
        matmul_acc_scalar, transpose_scalar, add_scalar,  sub_scalar,
        mul_scalar,        scale_scalar,     axpy_scalar, adam_update_scalar,
    };
    return table;
}

} // namespace esft::kernels
