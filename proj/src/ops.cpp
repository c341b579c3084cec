// SPDX-License-Identifier: Apache-2.0
#include "esft/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "esft/kernels.hpp"

namespace esft::ops {
namespace {

using kernels::active;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

void require_2d(const Tensor& t, const char* op) {
    if (t.ndim() != 2) {
        throw ShapeError(std::string(op) + ": expected a 2-d tensor, got " + shape_str(t.shape()));
    }
}

// Elementwise binary op helper; fwd and bwd take raw buffers.
Tensor binary_op(Tape& tape, const char* name, const Tensor& a, const Tensor& b,
                 void (*fwd)(double*, const double*, const double*, int),
                 std::function<void(const Tensor&, const Tensor&, const Tensor&)> bwd) {
    require_same_shape(a, b, name);
    Tensor out = Tensor::zeros(a.shape());
    fwd(out.data_mut().data(), a.data().data(), b.data().data(), static_cast<int>(a.numel()));
    assert_finite(out, name);
    tape.record(name, {a, b}, out, [a, b, out, bwd]() {
        if (!out.has_grad()) return;
        bwd(a, b, out);
    });
    return out;
}

} // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    return binary_op(tape, "add", a, b, active().add,
                     [](const Tensor& a, const Tensor& b, const Tensor& out) {
                         const int n = static_cast<int>(out.numel());
                         const double* g = out.grad().data();
                         active().axpy(a.grad_mut().data(), 1.0, g, n);
                         active().axpy(b.grad_mut().data(), 1.0, g, n);
                     });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    return binary_op(tape, "sub", a, b, active().sub,
                     [](const Tensor& a, const Tensor& b, const Tensor& out) {
                         const int n = static_cast<int>(out.numel());
                         const double* g = out.grad().data();
                         active().axpy(a.grad_mut().data(), 1.0, g, n);
                         active().axpy(b.grad_mut().data(), -1.0, g, n);
                     });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    return binary_op(tape, "mul", a, b, active().mul,
                     [](const Tensor& a, const Tensor& b, const Tensor& out) {
                         const int n = static_cast<int>(out.numel());
                         const double* g = out.grad().data();
                         std::vector<double> tmp(static_cast<size_t>(n));
                         active().mul(tmp.data(), g, b.data().data(), n);
                         active().axpy(a.grad_mut().data(), 1.0, tmp.data(), n);
                         active().mul(tmp.data(), g, a.data().data(), n);
                         active().axpy(b.grad_mut().data(), 1.0, tmp.data(), n);
                     });
}

Tensor scale(Tape& tape, const Tensor& a, double alpha) {
    Tensor out = Tensor::zeros(a.shape());
    active().scale(out.data_mut().data(), a.data().data(), alpha, static_cast<int>(a.numel()));
    assert_finite(out, "scale");
    tape.record("scale", {a}, out, [a, out, alpha]() {
        if (!out.has_grad()) return;
        active().axpy(a.grad_mut().data(), alpha, out.grad().data(), static_cast<int>(a.numel()));
    });
    return out;
}

Tensor sum(Tape& tape, const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    Tensor out = Tensor::scalar(acc);
    assert_finite(out, "sum");
    tape.record("sum", {a}, out, [a, out]() {
        if (!out.has_grad()) return;
        const double g = out.grad()[0];
        std::vector<double>& ga = a.grad_mut();
        for (double& v : ga) v += g;
    });
    return out;
}

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = Tensor::zeros({m, n});
    active().matmul_acc(out.data_mut().data(), a.data().data(), b.data().data(), m, k, n);
    assert_finite(out, "matmul");
    tape.record("matmul", {a, b}, out, [a, b, out, m, k, n]() {
        if (!out.has_grad()) return;
        const double* g = out.grad().data();
        // dA += dC * B^T
        std::vector<double> bt(static_cast<size_t>(k) * n);
        active().transpose(bt.data(), b.data().data(), k, n);
        active().matmul_acc(a.grad_mut().data(), g, bt.data(), m, n, k);
        // dB += A^T * dC
        std::vector<double> at(static_cast<size_t>(m) * k);
        active().transpose(at.data(), a.data().data(), m, k);
        active().matmul_acc(b.grad_mut().data(), at.data(), g, k, m, n);
    });
    return out;
}

Tensor transpose(Tape& tape, const Tensor& a) {
    require_2d(a, "transpose");
    const int m = a.rows(), n = a.cols();
    Tensor out = Tensor::zeros({n, m});
    active().transpose(out.data_mut().data(), a.data().data(), m, n);
    tape.record("transpose", {a}, out, [a, out, m, n]() {
        if (!out.has_grad()) return;
        std::vector<double> gt(static_cast<size_t>(m) * n);
        active().transpose(gt.data(), out.grad().data(), n, m);
        active().axpy(a.grad_mut().data(), 1.0, gt.data(), m * n);
    });
    return out;
}

Tensor embedding_lookup(Tape& tape, const Tensor& table, const std::vector<int>& ids) {
    require_2d(table, "embedding_lookup");
    const int vocab = table.rows(), d = table.cols();
    const int t_count = static_cast<int>(ids.size());
    if (t_count == 0) throw ShapeError("embedding_lookup: empty id sequence");
    for (int id : ids) {
        if (id < 0 || id >= vocab) {
            throw InputError("token id " + std::to_string(id) + " out of range for vocab " +
                             std::to_string(vocab));
        }
    }
    Tensor out = Tensor::zeros({t_count, d});
    for (int t = 0; t < t_count; ++t) {
        std::copy_n(table.data().data() + static_cast<long>(ids[static_cast<size_t>(t)]) * d, d,
                    out.data_mut().data() + static_cast<long>(t) * d);
    }
    tape.record("embedding_lookup", {table}, out, [table, out, ids, d, t_count]() {
        if (!out.has_grad()) return;
        const double* g = out.grad().data();
        double* gt = table.grad_mut().data();
        for (int t = 0; t < t_count; ++t) {
            active().axpy(gt + static_cast<long>(ids[static_cast<size_t>(t)]) * d, 1.0,
                          g + static_cast<long>(t) * d, d);
        }
    });
    return out;
}

Tensor gather_rows(Tape& tape, const Tensor& x, const std::vector<int>& rows) {
    require_2d(x, "gather_rows");
    const int m = x.rows(), n = x.cols();
    const int k = static_cast<int>(rows.size());
    if (k == 0) throw ShapeError("gather_rows: empty row list");
    for (int r : rows) {
        if (r < 0 || r >= m) throw ContractError("gather_rows: row " + std::to_string(r) + " out of range");
    }
    Tensor out = Tensor::zeros({k, n});
    for (int i = 0; i < k; ++i) {
        std::copy_n(x.data().data() + static_cast<long>(rows[static_cast<size_t>(i)]) * n, n,
                    out.data_mut().data() + static_cast<long>(i) * n);
    }
    tape.record("gather_rows", {x}, out, [x, out, rows, n, k]() {
        if (!out.has_grad()) return;
        const double* g = out.grad().data();
        double* gx = x.grad_mut().data();
        for (int i = 0; i < k; ++i) {
            active().axpy(gx + static_cast<long>(rows[static_cast<size_t>(i)]) * n, 1.0,
                          g + static_cast<long>(i) * n, n);
        }
    });
    return out;
}

Tensor scatter_rows(Tape& tape, const Tensor& x, const std::vector<int>& rows, int n_rows) {
    require_2d(x, "scatter_rows");
    const int k = x.rows(), n = x.cols();
    if (static_cast<int>(rows.size()) != k) {
        throw ShapeError("scatter_rows: row list length " + std::to_string(rows.size()) +
                         " does not match input rows " + std::to_string(k));
    }
    for (int r : rows) {
        if (r < 0 || r >= n_rows) throw ContractError("scatter_rows: row " + std::to_string(r) + " out of range");
    }
    Tensor out = Tensor::zeros({n_rows, n});
    for (int i = 0; i < k; ++i) {
        active().axpy(out.data_mut().data() + static_cast<long>(rows[static_cast<size_t>(i)]) * n, 1.0,
                      x.data().data() + static_cast<long>(i) * n, n);
    }
    tape.record("scatter_rows", {x}, out, [x, out, rows, n, k]() {
        if (!out.has_grad()) return;
        const double* g = out.grad().data();
        double* gx = x.grad_mut().data();
        for (int i = 0; i < k; ++i) {
            active().axpy(gx + static_cast<long>(i) * n, 1.0,
                          g + static_cast<long>(rows[static_cast<size_t>(i)]) * n, n);
        }
    });
    return out;
}

Tensor gather_scalars(Tape& tape, const Tensor& x, const std::vector<int>& rows,
                      const std::vector<int>& cols) {
    require_2d(x, "gather_scalars");
    if (rows.size() != cols.size() || rows.empty()) {
        throw ShapeError("gather_scalars: rows/cols lists must be non-empty and equal length");
    }
    const int m = x.rows(), n = x.cols();
    const int k = static_cast<int>(rows.size());
    for (int i = 0; i < k; ++i) {
        if (rows[static_cast<size_t>(i)] < 0 || rows[static_cast<size_t>(i)] >= m ||
            cols[static_cast<size_t>(i)] < 0 || cols[static_cast<size_t>(i)] >= n) {
            throw ContractError("gather_scalars: index out of range at position " + std::to_string(i));
        }
    }
    Tensor out = Tensor::zeros({k});
    for (int i = 0; i < k; ++i) {
        out.data_mut()[static_cast<size_t>(i)] =
            x.data()[static_cast<size_t>(rows[static_cast<size_t>(i)]) * n + cols[static_cast<size_t>(i)]];
    }
    tape.record("gather_scalars", {x}, out, [x, out, rows, cols, n, k]() {
        if (!out.has_grad()) return;
        const double* g = out.grad().data();
        double* gx = x.grad_mut().data();
        for (int i = 0; i < k; ++i) {
            gx[static_cast<size_t>(rows[static_cast<size_t>(i)]) * n + cols[static_cast<size_t>(i)]] += g[i];
        }
    });
    return out;
}

Tensor scale_rows(Tape& tape, const Tensor& x, const Tensor& s) {
    require_2d(x, "scale_rows");
    const int m = x.rows(), n = x.cols();
    if (s.ndim() != 1 || s.dim(0) != m) {
        throw ShapeError("scale_rows: scale vector " + shape_str(s.shape()) +
                         " does not match rows of " + shape_str(x.shape()));
    }
    Tensor out = Tensor::zeros({m, n});
    for (int i = 0; i < m; ++i) {
        active().scale(out.data_mut().data() + static_cast<long>(i) * n,
                       x.data().data() + static_cast<long>(i) * n, s.data()[static_cast<size_t>(i)], n);
    }
    assert_finite(out, "scale_rows");
    tape.record("scale_rows", {x, s}, out, [x, s, out, m, n]() {
        if (!out.has_grad()) return;
        const double* g = out.grad().data();
        double* gx = x.grad_mut().data();
        double* gs = s.grad_mut().data();
        for (int i = 0; i < m; ++i) {
            const double* grow = g + static_cast<long>(i) * n;
            const double* xrow = x.data().data() + static_cast<long>(i) * n;
            active().axpy(gx + static_cast<long>(i) * n, s.data()[static_cast<size_t>(i)], grow, n);
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += grow[j] * xrow[j];
            gs[i] += dot;
        }
    });
    return out;
}

Tensor silu(Tape& tape, const Tensor& x) {
    const int64_t n = x.numel();
    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> sig(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const double xi = x.data()[static_cast<size_t>(i)];
        const double s = 1.0 / (1.0 + std::exp(-xi));
        sig[static_cast<size_t>(i)] = s;
        out.data_mut()[static_cast<size_t>(i)] = xi * s;
    }
    assert_finite(out, "silu");
    tape.record("silu", {x}, out, [x, out, sig = std::move(sig), n]() {
        if (!out.has_grad()) return;
        const double* g = out.grad().data();
        double* gx = x.grad_mut().data();
        for (int64_t i = 0; i < n; ++i) {
            const double s = sig[static_cast<size_t>(i)];
            const double xi = x.data()[static_cast<size_t>(i)];
            gx[i] += g[i] * s * (1.0 + xi * (1.0 - s));
        }
    });
    return out;
}

Tensor rmsnorm(Tape& tape, const Tensor& x, const Tensor& gain) {
    require_2d(x, "rmsnorm");
    const int m = x.rows(), n = x.cols();
    if (gain.ndim() != 1 || gain.dim(0) != n) {
        throw ShapeError("rmsnorm: gain " + shape_str(gain.shape()) + " does not match cols of " +
                         shape_str(x.shape()));
    }
    constexpr double kEps = 1e-12;
    Tensor out = Tensor::zeros({m, n});
    std::vector<double> rms(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
        const double* xrow = x.data().data() + static_cast<long>(i) * n;
        double ms = 0.0;
        for (int j = 0; j < n; ++j) ms += xrow[j] * xrow[j];
        const double r = std::sqrt(ms / n + kEps);
        rms[static_cast<size_t>(i)] = r;
        double* orow = out.data_mut().data() + static_cast<long>(i) * n;
        for (int j = 0; j < n; ++j) orow[j] = xrow[j] / r * gain.data()[static_cast<size_t>(j)];
    }
    assert_finite(out, "rmsnorm");
    tape.record("rmsnorm", {x, gain}, out, [x, gain, out, rms = std::move(rms), m, n]() {
        if (!out.has_grad()) return;
        const double* g = out.grad().data();
        double* gx = x.grad_mut().data();
        double* gg = gain.grad_mut().data();
        for (int i = 0; i < m; ++i) {
            const double r = rms[static_cast<size_t>(i)];
            const double* grow = g + static_cast<long>(i) * n;
            const double* xrow = x.data().data() + static_cast<long>(i) * n;
            double dot = 0.0; // sum_j grow_j * gain_j * x_j
            for (int j = 0; j < n; ++j) dot += grow[j] * gain.data()[static_cast<size_t>(j)] * xrow[j];
            const double c = dot / (n * r * r * r);
            for (int j = 0; j < n; ++j) {
                gx[static_cast<long>(i) * n + j] += grow[j] * gain.data()[static_cast<size_t>(j)] / r - xrow[j] * c;
                gg[j] += grow[j] * xrow[j] / r;
            }
        }
    });
    return out;
}

Tensor softmax_rows(Tape& tape, const Tensor& x) {
    require_2d(x, "softmax_rows");
    const int m = x.rows(), n = x.cols();
    Tensor out = Tensor::zeros({m, n});
    for (int i = 0; i < m; ++i) {
        const double* xrow = x.data().data() + static_cast<long>(i) * n;
        double* orow = out.data_mut().data() + static_cast<long>(i) * n;
        double mx = xrow[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, xrow[j]);
        double denom = 0.0;
        for (int j = 0; j < n; ++j) {
            orow[j] = std::exp(xrow[j] - mx);
            denom += orow[j];
        }
        for (int j = 0; j < n; ++j) orow[j] /= denom;
    }
    assert_finite(out, "softmax_rows");
    tape.record("softmax_rows", {x}, out, [x, out, m, n]() {
        if (!out.has_grad()) return;
        const double* g = out.grad().data();
        double* gx = x.grad_mut().data();
        const double* y = out.data().data();
        for (int i = 0; i < m; ++i) {
            const double* grow = g + static_cast<long>(i) * n;
            const double* yrow = y + static_cast<long>(i) * n;
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += grow[j] * yrow[j];
            for (int j = 0; j < n; ++j) gx[static_cast<long>(i) * n + j] += yrow[j] * (grow[j] - dot);
        }
    });
    return out;
}

Tensor causal_softmax(Tape& tape, const Tensor& x) {
    require_2d(x, "causal_softmax");
    if (x.rows() != x.cols()) {
        throw ShapeError("causal_softmax: expected a square matrix, got " + shape_str(x.shape()));
    }
    const int t_count = x.rows();
    Tensor out = Tensor::zeros({t_count, t_count});
    for (int t = 0; t < t_count; ++t) {
        const double* xrow = x.data().data() + static_cast<long>(t) * t_count;
        double* orow = out.data_mut().data() + static_cast<long>(t) * t_count;
        double mx = xrow[0];
        for (int j = 1; j <= t; ++j) mx = std::max(mx, xrow[j]);
        double denom = 0.0;
        for (int j = 0; j <= t; ++j) {
            orow[j] = std::exp(xrow[j] - mx);
            denom += orow[j];
        }
        for (int j = 0; j <= t; ++j) orow[j] /= denom;
    }
    assert_finite(out, "causal_softmax");
    tape.record("causal_softmax", {x}, out, [x, out, t_count]() {
        if (!out.has_grad()) return;
        const double* g = out.grad().data();
        double* gx = x.grad_mut().data();
        const double* y = out.data().data();
        for (int t = 0; t < t_count; ++t) {
            const double* grow = g + static_cast<long>(t) * t_count;
            const double* yrow = y + static_cast<long>(t) * t_count;
            double dot = 0.0;
            for (int j = 0; j <= t; ++j) dot += grow[j] * yrow[j];
            for (int j = 0; j <= t; ++j) gx[static_cast<long>(t) * t_count + j] += yrow[j] * (grow[j] - dot);
        }
    });
    return out;
}

Tensor cross_entropy_mean(Tape& tape, const Tensor& logits, const std::vector<int>& targets) {
    require_2d(logits, "cross_entropy_mean");
    const int m = logits.rows(), n = logits.cols();
    if (static_cast<int>(targets.size()) != m) {
        throw ShapeError("cross_entropy_mean: target count " + std::to_string(targets.size()) +
                         " does not match logit rows " + std::to_string(m));
    }
    for (int t : targets) {
        if (t < 0 || t >= n) {
            throw InputError("target id " + std::to_string(t) + " out of range for vocab " +
                             std::to_string(n));
        }
    }
    std::vector<double> probs(static_cast<size_t>(m) * n);
    double loss = 0.0;
    for (int i = 0; i < m; ++i) {
        const double* xrow = logits.data().data() + static_cast<long>(i) * n;
        double* prow = probs.data() + static_cast<long>(i) * n;
        double mx = xrow[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, xrow[j]);
        double denom = 0.0;
        for (int j = 0; j < n; ++j) {
            prow[j] = std::exp(xrow[j] - mx);
            denom += prow[j];
        }
        for (int j = 0; j < n; ++j) prow[j] /= denom;
        const double lse = mx + std::log(denom);
        loss += lse - xrow[targets[static_cast<size_t>(i)]];
    }
    Tensor out = Tensor::scalar(loss / m);
    assert_finite(out, "cross_entropy_mean");
    tape.record("cross_entropy_mean", {logits}, out,
                [logits, out, probs = std::move(probs), targets, m, n]() {
                    if (!out.has_grad()) return;
                    const double g = out.grad()[0];
                    double* gx = logits.grad_mut().data();
                    for (int i = 0; i < m; ++i) {
                        const double* prow = probs.data() + static_cast<long>(i) * n;
                        const int tgt = targets[static_cast<size_t>(i)];
                        for (int j = 0; j < n; ++j) {
                            const double delta = (j == tgt) ? 1.0 : 0.0;
                            gx[static_cast<long>(i) * n + j] += g * (prow[j] - delta) / m;
                        }
                    }
                });
    return out;
}

double grad_check(const std::function<Tensor(Tape&)>& f, const std::vector<Tensor>& inputs,
                  double eps) {
    if (eps <= 0.0) throw ConfigError("grad_check: eps must be positive");

    for (const Tensor& t : inputs) {
        Tensor mutable_t = t;
        mutable_t.grad_mut(); // ensure allocated
        mutable_t.zero_grad();
    }
    Tape base_tape;
    Tensor loss = f(base_tape);
    if (loss.numel() != 1) {
        throw ContractError("grad_check: f must return a scalar loss");
    }
    if (!std::isfinite(loss.value())) {
        throw InputError("grad_check: loss is non-finite at the base point");
    }
    base_tape.backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (const Tensor& t : inputs) {
        analytic.push_back(t.has_grad() ? t.grad() : std::vector<double>(t.data().size(), 0.0));
    }

    double max_rel = 0.0;
    for (size_t ti = 0; ti < inputs.size(); ++ti) {
        Tensor t = inputs[ti];
        std::vector<double>& d = t.data_mut();
        for (size_t c = 0; c < d.size(); ++c) {
            const double orig = d[c];
            const std::string where =
                "input " + std::to_string(ti) + " coordinate " + std::to_string(c);
            auto eval = [&](double v) {
                d[c] = v;
                double result;
                try {
                    Tape tape;
                    result = f(tape).value();
                } catch (const InputError& e) {
                    d[c] = orig;
                    throw InputError("grad_check: non-finite intermediate while perturbing " +
                                     where + ": " + e.what());
                }
                return result;
            };
            const double lp = eval(orig + eps);
            const double lm = eval(orig - eps);
            d[c] = orig;
            if (!std::isfinite(lp) || !std::isfinite(lm)) {
                throw InputError("grad_check: non-finite loss while perturbing " + where);
            }
            const double numeric = (lp - lm) / (2.0 * eps);
            const double a = analytic[ti][c];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            max_rel = std::max(max_rel, std::fabs(a - numeric) / denom);
        }
    }
    return max_rel;
}

} // namespace esft::ops
