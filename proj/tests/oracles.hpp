// SPDX-License-Identifier: Apache-2.0
//
// Test-only reference implementations, independent of the library code they
// check: textbook loop orders, extended precision, and brute-force search.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

namespace oracles {

// Textbook i-j-k matrix product (the library accumulates i-k-j).
inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                        int m, int k, int n) {
    std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int kk = 0; kk < k; ++kk) {
                acc += a[static_cast<size_t>(i) * k + kk] * b[static_cast<size_t>(kk) * n + j];
            }
            c[static_cast<size_t>(i) * n + j] = acc;
        }
    }
    return c;
}

// Exp-normalize at extended precision, no stabilization shortcut.
inline std::vector<double> softmax_row_ld(const std::vector<double>& x) {
    long double mx = x[0];
    for (double v : x) mx = std::max<long double>(mx, v);
    long double denom = 0.0L;
    std::vector<long double> e(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        e[i] = expl(static_cast<long double>(x[i]) - mx);
    }
    for (long double v : e) denom += v;
    std::vector<double> out(x.size());
    for (size_t i = 0; i < x.size(); ++i) out[i] = static_cast<double>(e[i] / denom);
    return out;
}

// Indices of the k largest values; ties resolved toward the lower index.
inline std::vector<int> topk_by_sort(const std::vector<double>& row, int k) {
    std::vector<int> idx(row.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return row[static_cast<size_t>(a)] > row[static_cast<size_t>(b)]; });
    idx.resize(static_cast<size_t>(k));
    std::sort(idx.begin(), idx.end());
    return idx;
}

// Shortest descending-score prefix whose cumulative mass reaches
// min(p, total); ties by lower index; empty-total case selects nothing.
inline std::vector<int> prefix_select(const std::vector<double>& scores, double p) {
    std::vector<int> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
    });
    const double total = std::accumulate(scores.begin(), scores.end(), 0.0);
    if (total < p) {
        std::vector<int> all;
        for (size_t i = 0; i < scores.size(); ++i) {
            if (scores[i] > 0.0) all.push_back(static_cast<int>(i));
        }
        return all;
    }
    double cum = 0.0;
    std::vector<int> sel;
    for (int i : idx) {
        sel.push_back(i);
        cum += scores[static_cast<size_t>(i)];
        if (cum >= p) break;
    }
    std::sort(sel.begin(), sel.end());
    return sel;
}

// All size-k index subsets of {0..n-1}, lexicographic order.
inline std::vector<std::vector<int>> subsets_of_size(int n, int k) {
    std::vector<std::vector<int>> out;
    std::vector<int> cur;
    std::function<void(int)> rec = [&](int start) {
        if (static_cast<int>(cur.size()) == k) {
            out.push_back(cur);
            return;
        }
        for (int i = start; i < n; ++i) {
            cur.push_back(i);
            rec(i + 1);
            cur.pop_back();
        }
    };
    rec(0);
    return out;
}

// Regularized lower incomplete gamma P(s, x) by series/continued fraction,
// enough for chi-square p-values in tests.
inline double gamma_p(double s, double x) {
    if (x < 0.0 || s <= 0.0) return 0.0;
    if (x == 0.0) return 0.0;
    const double lg = std::lgamma(s);
    if (x < s + 1.0) {
        double term = 1.0 / s;
        double sum = term;
        double ap = s;
        for (int i = 0; i < 500; ++i) {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if (std::fabs(term) < std::fabs(sum) * 1e-15) break;
        }
        return sum * std::exp(-x + s * std::log(x) - lg);
    }
    // Lentz continued fraction for Q(s, x); P = 1 - Q.
    double b = x + 1.0 - s;
    double c = 1e300;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i < 500; ++i) {
        const double an = -static_cast<double>(i) * (static_cast<double>(i) - s);
        b += 2.0;
        d = an * d + b;
        if (std::fabs(d) < 1e-300) d = 1e-300;
        c = b + an / c;
        if (std::fabs(c) < 1e-300) c = 1e-300;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < 1e-15) break;
    }
    const double q = std::exp(-x + s * std::log(x) - lg) * h;
    return 1.0 - q;
}

// Chi-square upper-tail p-value for a given statistic and dof.
inline double chi_square_pvalue(double stat, int dof) {
    return 1.0 - gamma_p(dof / 2.0, stat / 2.0);
}

} // namespace oracles
