// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 inner-loop kernels: one scalar reference implementation and an
// AVX2 variant selected at runtime. Both lanes execute the same per-element
// operation sequence (mul then add, never FMA; sqrt/div are correctly
// rounded), so their results are bit-identical and backend choice can never
// change a training run.
#pragma once

#include <string>

namespace esft::kernels {

enum class Backend { scalar, avx2 };

struct Ops {
    // c[m x n] += a[m x k] * b[k x n], row-major, i-k-j accumulation order.
    void (*matmul_acc)(double* c, const double* a, const double* b, int m, int k, int n);
    // dst[cols x rows] = transpose of src[rows x cols].
    void (*transpose)(double* dst, const double* src, int rows, int cols);
    void (*add)(double* out, const double* a, const double* b, int n);
    void (*sub)(double* out, const double* a, const double* b, int n);
    void (*mul)(double* out, const double* a, const double* b, int n);
    void (*scale)(double* out, const double* a, double alpha, int n);
    // y[i] += alpha * x[i]
    void (*axpy)(double* y, double alpha, const double* x, int n);
    // Adam with bias correction; bc1 = 1 - beta1^t, bc2 = 1 - beta2^t.
    void (*adam_update)(double* param, double* m, double* v, const double* g, int n,
                        double lr, double beta1, double beta2, double eps, double bc1, double bc2);
};

// Scalar reference lane; always available.
const Ops& scalar_ops();

// AVX2 lane; only callable when avx2_available() is true.
const Ops& avx2_ops();

bool avx2_compiled_in();
bool avx2_available(); // compiled in AND supported by this CPU

// Active table. Defaults to the best available lane; the ESFT_KERNELS
// environment variable ("scalar" or "avx2") overrides on first use.
const Ops& active();
Backend active_backend();
void set_backend(Backend b); // throws ConfigError if the lane is unavailable

std::string backend_name(Backend b);

} // namespace esft::kernels
