#pragma once

// Loop-based reference implementations used as independent oracles across
// the test suites. Everything here is deliberately written with plain
// nested loops and direct formula evaluation, never through the tape.

#include <cmath>
#include <cstddef>
#include <vector>

#include "mmx/attention.hpp"
#include "mmx/rng.hpp"

namespace oracle {

inline std::vector<double> random_values(mmx::Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(lo, hi);
    return v;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

// c = a [m x k] * b [k x n]
inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                  std::size_t k, std::size_t n) {
    std::vector<double> c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
    return c;
}

struct Attention {
    std::vector<double> weights, context;
};

// softmax(q k^T / sqrt(scale) + mask) v via direct exp/sum evaluation.
inline Attention attention(const std::vector<double>& q, const std::vector<double>& k, const std::vector<double>& v,
                           std::size_t n_q, std::size_t n_k, std::size_t dk, std::size_t dv, std::size_t scale_dim,
                           const mmx::AttentionMask* mask = nullptr) {
    Attention out;
    out.weights.assign(n_q * n_k, 0.0);
    out.context.assign(n_q * dv, 0.0);
    for (std::size_t i = 0; i < n_q; ++i) {
        std::vector<double> scores(n_k);
        for (std::size_t j = 0; j < n_k; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < dk; ++p) s += q[i * dk + p] * k[j * dk + p];
            scores[j] = s / std::sqrt(static_cast<double>(scale_dim));
            if (mask && !mask->at(i, j)) scores[j] = mmx::kMaskBias;
        }
        double mx = scores[0];
        for (double s : scores) mx = std::max(mx, s);
        double z = 0.0;
        for (std::size_t j = 0; j < n_k; ++j) {
            out.weights[i * n_k + j] = std::exp(scores[j] - mx);
            z += out.weights[i * n_k + j];
        }
        for (std::size_t j = 0; j < n_k; ++j) out.weights[i * n_k + j] /= z;
        for (std::size_t j = 0; j < n_k; ++j)
            for (std::size_t p = 0; p < dv; ++p) out.context[i * dv + p] += out.weights[i * n_k + j] * v[j * dv + p];
    }
    return out;
}

// Sum over heads of projected per-head attention.
inline std::vector<double> multi_head(const std::vector<double>& q, const std::vector<double>& k,
                                      const std::vector<double>& v, std::size_t n_q, std::size_t n_k,
                                      const mmx::MultiHeadParams& p, mmx::ScaleMode mode,
                                      const mmx::AttentionMask* mask = nullptr) {
    const std::size_t d = p.d_model, dh = p.d_head;
    std::vector<double> out(n_q * d, 0.0);
    for (std::size_t head = 0; head < p.h; ++head) {
        const auto qi = matmul(q, p.w_q[head], n_q, d, dh);
        const auto ki = matmul(k, p.w_k[head], n_k, d, dh);
        const auto vi = matmul(v, p.w_v[head], n_k, d, dh);
        const auto att = attention(qi, ki, vi, n_q, n_k, dh, dh, mode == mmx::ScaleMode::per_head ? dh : d, mask);
        const auto proj = matmul(att.context, p.w_o[head], n_q, dh, d);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += proj[i];
    }
    return out;
}

}  // namespace oracle
