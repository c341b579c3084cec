// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Every op validates shapes, records exactly one
// tape node, and checks its output for non-finite values. Gradients
// accumulate additively into input grad buffers, so fan-out sums naturally.
#pragma once

#include <functional>
#include <vector>

#include "esft/tensor.hpp"

namespace esft::ops {

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b); // elementwise
Tensor scale(Tape& tape, const Tensor& a, double alpha);
Tensor sum(Tape& tape, const Tensor& a); // -> [1]

// c[m x n] = a[m x k] * b[k x n]
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape& tape, const Tensor& a);

// out[t] = table[ids[t], :]; ids are validated against the table row count.
Tensor embedding_lookup(Tape& tape, const Tensor& table, const std::vector<int>& ids);
Tensor gather_rows(Tape& tape, const Tensor& x, const std::vector<int>& rows);
// out[n_rows x cols], out[rows[i], :] += x[i, :]; other rows zero.
Tensor scatter_rows(Tape& tape, const Tensor& x, const std::vector<int>& rows, int n_rows);
// out[i] = x[rows[i], cols[i]] as a 1-d tensor.
Tensor gather_scalars(Tape& tape, const Tensor& x, const std::vector<int>& rows,
                      const std::vector<int>& cols);
// out[i, :] = x[i, :] * s[i]; s is 1-d of length rows(x).
Tensor scale_rows(Tape& tape, const Tensor& x, const Tensor& s);

Tensor silu(Tape& tape, const Tensor& x);
// Per-row RMS normalization with a learned gain vector of length cols(x).
Tensor rmsnorm(Tape& tape, const Tensor& x, const Tensor& gain);
// Row-wise softmax, stabilized by row-max subtraction.
Tensor softmax_rows(Tape& tape, const Tensor& x);
// Square input; row t is a softmax over columns 0..t, columns above t are 0.
Tensor causal_softmax(Tape& tape, const Tensor& x);
// Mean over rows of (logsumexp(row) - row[target]); returns a scalar.
Tensor cross_entropy_mean(Tape& tape, const Tensor& logits, const std::vector<int>& targets);

// Central-difference gradient verification. f builds a fresh forward pass on
// the given tape and returns a scalar loss; it must hold any discrete
// choices (top-k routing) fixed so the loss is differentiable around the
// base point. Returns max over all input coordinates of
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
double grad_check(const std::function<Tensor(Tape&)>& f, const std::vector<Tensor>& inputs,
                  double eps);

} // namespace esft::ops
