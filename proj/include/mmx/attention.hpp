#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "mmx/error.hpp"
#include "mmx/rng.hpp"
#include "mmx/tensor.hpp"

namespace mmx {

// Which dimension the dot-product scores are scaled by: the per-head width
// (conventional) or the full model dimension. Both are supported; per_head
// is the default everywhere.
enum class ScaleMode { per_head, model_dim };

// Boolean visibility matrix for attention. visible[q * n_keys + k] == 1
// means query q may attend to key k.
struct AttentionMask {
    std::size_t n_queries = 0;
    std::size_t n_keys = 0;
    std::vector<std::uint8_t> visible;

    static AttentionMask causal(std::size_t n) {
        AttentionMask m;
        m.n_queries = m.n_keys = n;
        m.visible.assign(n * n, 0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j <= i; ++j) m.visible[i * n + j] = 1;
        return m;
    }

    static AttentionMask full(std::size_t n_q, std::size_t n_k) {
        AttentionMask m;
        m.n_queries = n_q;
        m.n_keys = n_k;
        m.visible.assign(n_q * n_k, 1);
        return m;
    }

    bool at(std::size_t q, std::size_t k) const { return visible[q * n_keys + k] != 0; }

    // Additive bias matrix: 0 where visible, the mask sentinel elsewhere.
    // Rejects rows with no visible key (the weight row would be undefined).
    std::vector<double> bias() const {
        std::vector<double> b(visible.size(), 0.0);
        for (std::size_t q = 0; q < n_queries; ++q) {
            bool any = false;
            for (std::size_t k = 0; k < n_keys; ++k) {
                if (visible[q * n_keys + k])
                    any = true;
                else
                    b[q * n_keys + k] = kMaskBias;
            }
            if (!any) throw ContractError("attention mask row " + std::to_string(q) + " hides every key");
        }
        return b;
    }
};

// Per-head projection families. w_q/w_k/w_v are h matrices [d x d_h] and
// w_o holds h output projections [d_h x d] applied before the head sum.
struct MultiHeadParams {
    std::size_t h = 0;
    std::size_t d_model = 0;
    std::size_t d_head = 0;
    std::vector<std::vector<double>> w_q, w_k, w_v, w_o;

    static MultiHeadParams init(std::size_t d, std::size_t h, Rng& rng) {
        if (h == 0 || d % h != 0)
            throw ConfigError("model dimension " + std::to_string(d) + " not divisible by " + std::to_string(h) + " heads");
        MultiHeadParams p;
        p.h = h;
        p.d_model = d;
        p.d_head = d / h;
        const double lim = std::sqrt(6.0 / static_cast<double>(d + p.d_head));
        auto mat = [&](std::size_t rows, std::size_t cols) {
            std::vector<double> m(rows * cols);
            for (double& v : m) v = rng.uniform(-lim, lim);
            return m;
        };
        for (std::size_t i = 0; i < h; ++i) {
            p.w_q.push_back(mat(d, p.d_head));
            p.w_k.push_back(mat(d, p.d_head));
            p.w_v.push_back(mat(d, p.d_head));
            p.w_o.push_back(mat(p.d_head, d));
        }
        return p;
    }
};

// Tape handles for one multi-head family.
struct MultiHeadIds {
    std::size_t h = 0;
    std::size_t d_model = 0;
    std::size_t d_head = 0;
    std::vector<TensorId> w_q, w_k, w_v, w_o;
};

inline MultiHeadIds load_multi_head(Tape& tape, const MultiHeadParams& p, bool requires_grad) {
    MultiHeadIds ids;
    ids.h = p.h;
    ids.d_model = p.d_model;
    ids.d_head = p.d_head;
    for (std::size_t i = 0; i < p.h; ++i) {
        ids.w_q.push_back(tape.leaf({p.d_model, p.d_head}, p.w_q[i], requires_grad));
        ids.w_k.push_back(tape.leaf({p.d_model, p.d_head}, p.w_k[i], requires_grad));
        ids.w_v.push_back(tape.leaf({p.d_model, p.d_head}, p.w_v[i], requires_grad));
        ids.w_o.push_back(tape.leaf({p.d_head, p.d_model}, p.w_o[i], requires_grad));
    }
    return ids;
}

struct AttentionResult {
    TensorId context;
    TensorId weights;
};

// softmax(q k^T / sqrt(scale_dim) + mask) v. Masked weights are exactly 0.
inline AttentionResult scaled_dot_attention(Tape& tape, TensorId q, TensorId k, TensorId v, std::size_t scale_dim,
                                            const AttentionMask* mask = nullptr) {
    const Tensor &tq = tape[q], &tk = tape[k], &tv = tape[v];
    if (tq.shape.size() != 2 || tk.shape.size() != 2 || tq.shape[1] != tk.shape[1])
        throw DimError("attention query/key widths " + shape_str(tq.shape) + " vs " + shape_str(tk.shape));
    if (tk.shape[0] != tv.rows())
        throw DimError("attention key/value counts " + shape_str(tk.shape) + " vs " + shape_str(tv.shape));
    if (mask && (mask->n_queries != tq.shape[0] || mask->n_keys != tk.shape[0]))
        throw DimError("attention mask is " + std::to_string(mask->n_queries) + "x" + std::to_string(mask->n_keys) +
                       " for " + std::to_string(tq.shape[0]) + " queries and " + std::to_string(tk.shape[0]) + " keys");
    TensorId scores = tape.scale(tape.matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(scale_dim)));
    if (mask) {
        TensorId bias = tape.leaf({mask->n_queries, mask->n_keys}, mask->bias(), false);
        scores = tape.add(scores, bias);
    }
    TensorId weights = tape.softmax_rows(scores);
    return {tape.matmul(weights, v), weights};
}

// Sum over heads of per-head attention outputs projected back to d. The
// scale dimension is d_head or d_model depending on mode.
inline TensorId multi_head_attention(Tape& tape, TensorId q_in, TensorId k_in, TensorId v_in, const MultiHeadIds& p,
                                     const AttentionMask* mask = nullptr, ScaleMode mode = ScaleMode::per_head) {
    const std::size_t scale_dim = mode == ScaleMode::per_head ? p.d_head : p.d_model;
    TensorId out = 0;
    for (std::size_t i = 0; i < p.h; ++i) {
        TensorId qi = tape.matmul(q_in, p.w_q[i]);
        TensorId ki = tape.matmul(k_in, p.w_k[i]);
        TensorId vi = tape.matmul(v_in, p.w_v[i]);
        TensorId head = scaled_dot_attention(tape, qi, ki, vi, scale_dim, mask).context;
        TensorId proj = tape.matmul(head, p.w_o[i]);
        out = i == 0 ? proj : tape.add(out, proj);
    }
    return out;
}

}  // namespace mmx
