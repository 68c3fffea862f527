#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "mmx/error.hpp"

namespace mmx {

using TensorId = std::uint32_t;

// Additive mask sentinel: the largest-negative finite double. Adding it to an
// attention score guarantees the softmax weight underflows to exactly 0.
inline constexpr double kMaskBias = -std::numeric_limits<double>::max();

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense row-major tensor of rank 1 or 2. Computation runs in 64-bit reals;
// only checkpoint files store 32-bit values.
struct Tensor {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until backward populates it

    std::size_t size() const { return data.size(); }
    std::size_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
    std::size_t cols() const { return shape.size() == 2 ? shape[1] : (shape.empty() ? 0 : shape[0]); }
    bool is_scalar() const { return data.size() == 1; }

    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
};

namespace detail {

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

// c += a[m x k] * b[k x n]
inline void mm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ar = a + i * k;
        double* cr = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ar[p];
            const double* br = b + p * n;
            for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

// c += a[m x k] * b[n x k]^T
inline void mm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ar = a + i * k;
        double* cr = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* br = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += ar[p] * br[p];
            cr[j] += acc;
        }
    }
}

// c += a[m x k]^T * b[m x n]  (result k x n)
inline void mm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ar = a + i * k;
        const double* br = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ar[p];
            double* cr = c + p * n;
            for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

}  // namespace detail

// Reverse-mode autodiff tape. Operations append value tensors and backward
// rules in topological order; backward() replays the rules in reverse.
//
// Single-writer: one thread builds and differentiates a tape. Pure forward
// evaluation over immutable inputs may run on many tapes concurrently.
class Tape {
  public:
    TensorId leaf(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (detail::shape_numel(shape) != data.size())
            throw DimError("leaf data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
        for (double v : data)
            if (std::isnan(v) || v > std::numeric_limits<double>::max() || v < kMaskBias)
                throw NumericError("non-finite value in leaf tensor");
        Tensor t;
        t.shape = std::move(shape);
        t.data = std::move(data);
        t.requires_grad = requires_grad;
        tensors_.push_back(std::move(t));
        return static_cast<TensorId>(tensors_.size() - 1);
    }

    TensorId scalar(double v) { return leaf({1}, {v}); }

    TensorId zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> d(detail::shape_numel(shape), 0.0);
        return leaf(std::move(shape), std::move(d), requires_grad);
    }

    const Tensor& operator[](TensorId id) const { return tensors_.at(id); }
    double value(TensorId id) const {
        const Tensor& t = tensors_.at(id);
        if (!t.is_scalar()) throw ContractError("value() requires a scalar tensor, got " + shape_str(t.shape));
        return t.data[0];
    }
    const std::vector<double>& grad(TensorId id) const { return tensors_.at(id).grad; }
    std::size_t node_count() const { return nodes_.size(); }
    std::size_t tensor_count() const { return tensors_.size(); }

    // ---- arithmetic ----

    TensorId matmul(TensorId a, TensorId b) {
        const Tensor &ta = tensors_.at(a), &tb = tensors_.at(b);
        if (ta.shape.size() != 2 || tb.shape.size() != 2 || ta.shape[1] != tb.shape[0])
            throw DimError("matmul shapes " + shape_str(ta.shape) + " x " + shape_str(tb.shape));
        const std::size_t m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
        std::vector<double> out(m * n, 0.0);
        detail::mm_acc(ta.data.data(), tb.data.data(), out.data(), m, k, n);
        TensorId id = result({m, n}, std::move(out), {a, b});
        if (tensors_[id].requires_grad) {
            record([this, a, b, id, m, k, n] {
                const std::vector<double>& g = tensors_[id].grad;
                if (tensors_[a].requires_grad)  // dA += G * B^T
                    detail::mm_nt_acc(g.data(), tensors_[b].data.data(), grad_buf(a), m, n, k);
                if (tensors_[b].requires_grad)  // dB += A^T * G
                    detail::mm_tn_acc(tensors_[a].data.data(), g.data(), grad_buf(b), m, k, n);
            });
        }
        return id;
    }

    // a * b^T for row-major b [n x k]; used for the tied output projection.
    TensorId matmul_nt(TensorId a, TensorId b) {
        const Tensor &ta = tensors_.at(a), &tb = tensors_.at(b);
        if (ta.shape.size() != 2 || tb.shape.size() != 2 || ta.shape[1] != tb.shape[1])
            throw DimError("matmul_nt shapes " + shape_str(ta.shape) + " x " + shape_str(tb.shape) + "^T");
        const std::size_t m = ta.shape[0], k = ta.shape[1], n = tb.shape[0];
        std::vector<double> out(m * n, 0.0);
        detail::mm_nt_acc(ta.data.data(), tb.data.data(), out.data(), m, k, n);
        TensorId id = result({m, n}, std::move(out), {a, b});
        if (tensors_[id].requires_grad) {
            record([this, a, b, id, m, k, n] {
                const std::vector<double>& g = tensors_[id].grad;
                if (tensors_[a].requires_grad)  // dA += G * B
                    detail::mm_acc(g.data(), tensors_[b].data.data(), grad_buf(a), m, n, k);
                if (tensors_[b].requires_grad)  // dB += G^T * A
                    detail::mm_tn_acc(g.data(), tensors_[a].data.data(), grad_buf(b), m, n, k);
            });
        }
        return id;
    }

    TensorId add(TensorId a, TensorId b) { return binary_elementwise(a, b, /*sub=*/false); }
    TensorId sub(TensorId a, TensorId b) { return binary_elementwise(a, b, /*sub=*/true); }

    TensorId mul(TensorId a, TensorId b) {
        const Tensor &ta = tensors_.at(a), &tb = tensors_.at(b);
        if (ta.shape != tb.shape)
            throw DimError("mul shapes " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
        std::vector<double> out(ta.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta.data[i] * tb.data[i];
        TensorId id = result(ta.shape, std::move(out), {a, b});
        if (tensors_[id].requires_grad) {
            record([this, a, b, id] {
                const std::vector<double>& g = tensors_[id].grad;
                if (tensors_[a].requires_grad) {
                    double* da = grad_buf(a);
                    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * tensors_[b].data[i];
                }
                if (tensors_[b].requires_grad) {
                    double* db = grad_buf(b);
                    for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * tensors_[a].data[i];
                }
            });
        }
        return id;
    }

    // [m x n] + row vector [n]
    TensorId add_row_vector(TensorId a, TensorId v) {
        const Tensor &ta = tensors_.at(a), &tv = tensors_.at(v);
        if (ta.shape.size() != 2 || tv.shape.size() != 1 || tv.shape[0] != ta.shape[1])
            throw DimError("add_row_vector shapes " + shape_str(ta.shape) + " + " + shape_str(tv.shape));
        const std::size_t m = ta.shape[0], n = ta.shape[1];
        std::vector<double> out(ta.data);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += tv.data[j];
        TensorId id = result(ta.shape, std::move(out), {a, v});
        if (tensors_[id].requires_grad) {
            record([this, a, v, id, m, n] {
                const std::vector<double>& g = tensors_[id].grad;
                if (tensors_[a].requires_grad) {
                    double* da = grad_buf(a);
                    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                }
                if (tensors_[v].requires_grad) {
                    double* dv = grad_buf(v);
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) dv[j] += g[i * n + j];
                }
            });
        }
        return id;
    }

    TensorId scale(TensorId a, double c) {
        const Tensor& ta = tensors_.at(a);
        std::vector<double> out(ta.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta.data[i] * c;
        TensorId id = result(ta.shape, std::move(out), {a});
        if (tensors_[id].requires_grad) {
            record([this, a, id, c] {
                const std::vector<double>& g = tensors_[id].grad;
                double* da = grad_buf(a);
                for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * c;
            });
        }
        return id;
    }

    TensorId add_scalar(TensorId a, double c) {
        const Tensor& ta = tensors_.at(a);
        std::vector<double> out(ta.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta.data[i] + c;
        TensorId id = result(ta.shape, std::move(out), {a});
        if (tensors_[id].requires_grad) {
            record([this, a, id] {
                const std::vector<double>& g = tensors_[id].grad;
                double* da = grad_buf(a);
                for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
            });
        }
        return id;
    }

    // ---- nonlinearities ----

    // Elementwise max(0, x). Subgradient at 0 is 0.
    TensorId relu(TensorId a) {
        const Tensor& ta = tensors_.at(a);
        std::vector<double> out(ta.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta.data[i] > 0.0 ? ta.data[i] : 0.0;
        TensorId id = result(ta.shape, std::move(out), {a});
        if (tensors_[id].requires_grad) {
            record([this, a, id] {
                const std::vector<double>& g = tensors_[id].grad;
                double* da = grad_buf(a);
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (tensors_[a].data[i] > 0.0) da[i] += g[i];
            });
        }
        return id;
    }

    TensorId sigmoid(TensorId a) {
        const Tensor& ta = tensors_.at(a);
        std::vector<double> out(ta.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-ta.data[i]));
        TensorId id = result(ta.shape, std::move(out), {a});
        if (tensors_[id].requires_grad) {
            record([this, a, id] {
                const std::vector<double>& g = tensors_[id].grad;
                const std::vector<double>& y = tensors_[id].data;
                double* da = grad_buf(a);
                for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * y[i] * (1.0 - y[i]);
            });
        }
        return id;
    }

    TensorId tanh_op(TensorId a) {
        const Tensor& ta = tensors_.at(a);
        std::vector<double> out(ta.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(ta.data[i]);
        TensorId id = result(ta.shape, std::move(out), {a});
        if (tensors_[id].requires_grad) {
            record([this, a, id] {
                const std::vector<double>& g = tensors_[id].grad;
                const std::vector<double>& y = tensors_[id].data;
                double* da = grad_buf(a);
                for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * (1.0 - y[i] * y[i]);
            });
        }
        return id;
    }

    // Row-wise softmax with per-row max subtraction. Entries at the mask
    // sentinel (or below) come out exactly 0.
    TensorId softmax_rows(TensorId a) {
        const Tensor& ta = tensors_.at(a);
        if (ta.shape.size() != 2 || ta.shape[1] == 0)
            throw DimError("softmax_rows needs a non-empty 2-d tensor, got " + shape_str(ta.shape));
        const std::size_t m = ta.shape[0], n = ta.shape[1];
        std::vector<double> out(m * n);
        for (std::size_t i = 0; i < m; ++i) {
            const double* row = ta.data.data() + i * n;
            double mx = row[0];
            for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
            if (mx <= kMaskBias) throw ContractError("softmax row " + std::to_string(i) + " is fully masked");
            double sum = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double e = std::exp(row[j] - mx);
                out[i * n + j] = e;
                sum += e;
            }
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= sum;
        }
        TensorId id = result(ta.shape, std::move(out), {a});
        if (tensors_[id].requires_grad) {
            record([this, a, id, m, n] {
                const std::vector<double>& g = tensors_[id].grad;
                const std::vector<double>& y = tensors_[id].data;
                double* da = grad_buf(a);
                for (std::size_t i = 0; i < m; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                    for (std::size_t j = 0; j < n; ++j) da[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                }
            });
        }
        return id;
    }

    // Per-row normalization to zero mean / unit variance, then affine
    // transform by gain and bias (both [d]). Population variance.
    TensorId layer_norm(TensorId x, TensorId gain, TensorId bias, double eps) {
        const Tensor &tx = tensors_.at(x), &tg = tensors_.at(gain), &tb = tensors_.at(bias);
        if (tx.shape.size() != 2) throw DimError("layer_norm input must be 2-d, got " + shape_str(tx.shape));
        const std::size_t m = tx.shape[0], d = tx.shape[1];
        if (d < 2) throw DimError("layer_norm needs feature width >= 2, got " + std::to_string(d));
        if (tg.size() != d || tb.size() != d)
            throw DimError("layer_norm gain/bias " + shape_str(tg.shape) + "," + shape_str(tb.shape) + " vs width " + std::to_string(d));
        std::vector<double> out(m * d);
        std::vector<double> inv_sd(m), xhat(m * d);
        for (std::size_t i = 0; i < m; ++i) {
            const double* row = tx.data.data() + i * d;
            double mu = 0.0;
            for (std::size_t j = 0; j < d; ++j) mu += row[j];
            mu /= static_cast<double>(d);
            double var = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double c = row[j] - mu;
                var += c * c;
            }
            var /= static_cast<double>(d);
            const double s = 1.0 / std::sqrt(var + eps);
            inv_sd[i] = s;
            for (std::size_t j = 0; j < d; ++j) {
                const double xh = (row[j] - mu) * s;
                xhat[i * d + j] = xh;
                out[i * d + j] = tg.data[j] * xh + tb.data[j];
            }
        }
        TensorId id = result(tx.shape, std::move(out), {x, gain, bias});
        if (tensors_[id].requires_grad) {
            record([this, x, gain, bias, id, m, d, inv_sd = std::move(inv_sd), xhat = std::move(xhat)] {
                const std::vector<double>& g = tensors_[id].grad;
                for (std::size_t i = 0; i < m; ++i) {
                    if (tensors_[gain].requires_grad) {
                        double* dg = grad_buf(gain);
                        for (std::size_t j = 0; j < d; ++j) dg[j] += g[i * d + j] * xhat[i * d + j];
                    }
                    if (tensors_[bias].requires_grad) {
                        double* db = grad_buf(bias);
                        for (std::size_t j = 0; j < d; ++j) db[j] += g[i * d + j];
                    }
                    if (tensors_[x].requires_grad) {
                        double* dx = grad_buf(x);
                        double mean_gh = 0.0, mean_ghx = 0.0;
                        for (std::size_t j = 0; j < d; ++j) {
                            const double gh = g[i * d + j] * tensors_[gain].data[j];
                            mean_gh += gh;
                            mean_ghx += gh * xhat[i * d + j];
                        }
                        mean_gh /= static_cast<double>(d);
                        mean_ghx /= static_cast<double>(d);
                        for (std::size_t j = 0; j < d; ++j) {
                            const double gh = g[i * d + j] * tensors_[gain].data[j];
                            dx[i * d + j] += inv_sd[i] * (gh - mean_gh - xhat[i * d + j] * mean_ghx);
                        }
                    }
                }
            });
        }
        return id;
    }

    // ---- reductions ----

    TensorId sum_all(TensorId a) {
        const Tensor& ta = tensors_.at(a);
        double s = 0.0;
        for (double v : ta.data) s += v;
        TensorId id = result({1}, {s}, {a});
        if (tensors_[id].requires_grad) {
            record([this, a, id] {
                const double g = tensors_[id].grad[0];
                double* da = grad_buf(a);
                for (std::size_t i = 0; i < tensors_[a].size(); ++i) da[i] += g;
            });
        }
        return id;
    }

    // Column sums of [m x n] -> [1 x n].
    TensorId sum_rows(TensorId a) { return reduce_rows(a, /*mean=*/false); }
    // Column means of [m x n] -> [1 x n].
    TensorId mean_rows(TensorId a) { return reduce_rows(a, /*mean=*/true); }

    // Gather rows of a table [V x d] by token id; backward scatters.
    TensorId embedding_rows(TensorId table, const std::vector<int>& ids) {
        const Tensor& tt = tensors_.at(table);
        if (tt.shape.size() != 2) throw DimError("embedding table must be 2-d");
        const std::size_t v = tt.shape[0], d = tt.shape[1];
        std::vector<double> out(ids.size() * d);
        for (std::size_t p = 0; p < ids.size(); ++p) {
            if (ids[p] < 0 || static_cast<std::size_t>(ids[p]) >= v)
                throw VocabError("token id " + std::to_string(ids[p]) + " outside vocabulary of size " + std::to_string(v));
            std::copy_n(tt.data.data() + static_cast<std::size_t>(ids[p]) * d, d, out.data() + p * d);
        }
        TensorId id = result({ids.size(), d}, std::move(out), {table});
        if (tensors_[id].requires_grad) {
            record([this, table, id, ids, d] {
                const std::vector<double>& g = tensors_[id].grad;
                double* dt = grad_buf(table);
                for (std::size_t p = 0; p < ids.size(); ++p)
                    for (std::size_t j = 0; j < d; ++j) dt[static_cast<std::size_t>(ids[p]) * d + j] += g[p * d + j];
            });
        }
        return id;
    }

    // Mean negative log-likelihood of targets under row-wise softmax of the
    // logits. Rows where include[i] == 0 are excluded from the mean.
    TensorId cross_entropy_mean(TensorId logits, const std::vector<int>& targets,
                                const std::vector<std::uint8_t>* include = nullptr) {
        const Tensor& tl = tensors_.at(logits);
        if (tl.shape.size() != 2) throw DimError("cross_entropy_mean logits must be 2-d");
        const std::size_t m = tl.shape[0], v = tl.shape[1];
        if (targets.size() != m)
            throw ContractError("cross_entropy_mean: " + std::to_string(m) + " logit rows vs " +
                                std::to_string(targets.size()) + " targets");
        if (include && include->size() != m) throw ContractError("cross_entropy_mean: include mask length mismatch");
        std::size_t active = 0;
        double total = 0.0;
        std::vector<double> log_z(m);
        for (std::size_t i = 0; i < m; ++i) {
            if (include && !(*include)[i]) continue;
            if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v)
                throw VocabError("target id " + std::to_string(targets[i]) + " outside vocabulary of size " + std::to_string(v));
            const double* row = tl.data.data() + i * v;
            double mx = row[0];
            for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            for (std::size_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
            log_z[i] = mx + std::log(sum);
            total += log_z[i] - row[targets[i]];
            ++active;
        }
        if (active == 0) throw ContractError("cross_entropy_mean: no included positions");
        TensorId id = result({1}, {total / static_cast<double>(active)}, {logits});
        if (tensors_[id].requires_grad) {
            std::vector<std::uint8_t> inc = include ? *include : std::vector<std::uint8_t>(m, 1);
            record([this, logits, id, targets, inc = std::move(inc), log_z = std::move(log_z), m, v, active] {
                const double g = tensors_[id].grad[0] / static_cast<double>(active);
                double* dl = grad_buf(logits);
                const std::vector<double>& l = tensors_[logits].data;
                for (std::size_t i = 0; i < m; ++i) {
                    if (!inc[i]) continue;
                    for (std::size_t j = 0; j < v; ++j) {
                        double p = std::exp(l[i * v + j] - log_z[i]);
                        dl[i * v + j] += g * (p - (static_cast<std::size_t>(targets[i]) == j ? 1.0 : 0.0));
                    }
                }
            });
        }
        return id;
    }

    // Cosine distance 1 - a.b / (|a||b|) between two equal-length tensors,
    // treated as flat vectors. Rejects zero-norm inputs.
    TensorId cosine_distance(TensorId a, TensorId b) {
        const Tensor &ta = tensors_.at(a), &tb = tensors_.at(b);
        if (ta.size() != tb.size())
            throw DimError("cosine_distance lengths " + std::to_string(ta.size()) + " vs " + std::to_string(tb.size()));
        double dot = 0.0, na2 = 0.0, nb2 = 0.0;
        for (std::size_t i = 0; i < ta.size(); ++i) {
            dot += ta.data[i] * tb.data[i];
            na2 += ta.data[i] * ta.data[i];
            nb2 += tb.data[i] * tb.data[i];
        }
        if (na2 == 0.0 || nb2 == 0.0) throw ContractError("cosine_distance: zero-norm vector");
        const double na = std::sqrt(na2), nb = std::sqrt(nb2);
        TensorId id = result({1}, {1.0 - dot / (na * nb)}, {a, b});
        if (tensors_[id].requires_grad) {
            record([this, a, b, id, dot, na, nb] {
                const double g = tensors_[id].grad[0];
                const std::vector<double>& va = tensors_[a].data;
                const std::vector<double>& vb = tensors_[b].data;
                if (tensors_[a].requires_grad) {
                    double* da = grad_buf(a);
                    for (std::size_t i = 0; i < va.size(); ++i)
                        da[i] += g * (dot * va[i] / (na * na * na * nb) - vb[i] / (na * nb));
                }
                if (tensors_[b].requires_grad) {
                    double* db = grad_buf(b);
                    for (std::size_t i = 0; i < vb.size(); ++i)
                        db[i] += g * (dot * vb[i] / (nb * nb * nb * na) - va[i] / (na * nb));
                }
            });
        }
        return id;
    }

    // Stack k row vectors [n] (or [1 x n]) into a [k x n] matrix.
    TensorId stack_rows(const std::vector<TensorId>& parts) {
        if (parts.empty()) throw ContractError("stack_rows: empty input");
        const std::size_t n = tensors_.at(parts[0]).size();
        std::vector<double> out;
        out.reserve(parts.size() * n);
        for (TensorId p : parts) {
            const Tensor& tp = tensors_.at(p);
            if (tp.size() != n) throw DimError("stack_rows: inconsistent row widths");
            out.insert(out.end(), tp.data.begin(), tp.data.end());
        }
        TensorId id = result({parts.size(), n}, std::move(out), parts);
        if (tensors_[id].requires_grad) {
            record([this, parts, id, n] {
                const std::vector<double>& g = tensors_[id].grad;
                for (std::size_t r = 0; r < parts.size(); ++r) {
                    if (!tensors_[parts[r]].requires_grad) continue;
                    double* dp = grad_buf(parts[r]);
                    for (std::size_t j = 0; j < n; ++j) dp[j] += g[r * n + j];
                }
            });
        }
        return id;
    }

    // ---- backward ----

    // Seeds d(loss)/d(loss) = 1 and replays every node's backward rule in
    // reverse topological order, each node exactly once. Every tensor with
    // requires_grad ends up with a populated gradient (zero if unreachable).
    // Re-running on the same tape reproduces identical gradient bits.
    void backward(TensorId loss) {
        const Tensor& tl = tensors_.at(loss);
        if (!tl.is_scalar()) throw ContractError("backward requires a scalar loss, got " + shape_str(tl.shape));
        for (Tensor& t : tensors_) {
            if (t.requires_grad)
                t.grad.assign(t.size(), 0.0);
            else
                t.grad.clear();
        }
        if (!tensors_[loss].requires_grad) return;  // loss independent of any parameter
        tensors_[loss].grad[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

  private:
    TensorId result(Shape shape, std::vector<double> data, const std::vector<TensorId>& inputs) {
        for (double v : data)
            if (!std::isfinite(v)) throw NumericError("non-finite value produced by tape operation");
        Tensor t;
        t.shape = std::move(shape);
        t.data = std::move(data);
        for (TensorId in : inputs) t.requires_grad = t.requires_grad || tensors_[in].requires_grad;
        tensors_.push_back(std::move(t));
        return static_cast<TensorId>(tensors_.size() - 1);
    }

    void record(std::function<void()> rule) { nodes_.push_back(std::move(rule)); }

    double* grad_buf(TensorId id) {
        Tensor& t = tensors_[id];
        if (t.grad.size() != t.size()) t.grad.assign(t.size(), 0.0);
        return t.grad.data();
    }

    TensorId binary_elementwise(TensorId a, TensorId b, bool sub) {
        const Tensor &ta = tensors_.at(a), &tb = tensors_.at(b);
        if (ta.shape != tb.shape)
            throw DimError(std::string(sub ? "sub" : "add") + " shapes " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
        std::vector<double> out(ta.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = sub ? ta.data[i] - tb.data[i] : ta.data[i] + tb.data[i];
        TensorId id = result(ta.shape, std::move(out), {a, b});
        if (tensors_[id].requires_grad) {
            record([this, a, b, id, sub] {
                const std::vector<double>& g = tensors_[id].grad;
                if (tensors_[a].requires_grad) {
                    double* da = grad_buf(a);
                    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                }
                if (tensors_[b].requires_grad) {
                    double* db = grad_buf(b);
                    for (std::size_t i = 0; i < g.size(); ++i) db[i] += sub ? -g[i] : g[i];
                }
            });
        }
        return id;
    }

    TensorId reduce_rows(TensorId a, bool mean) {
        const Tensor& ta = tensors_.at(a);
        if (ta.shape.size() != 2) throw DimError("row reduction needs a 2-d tensor, got " + shape_str(ta.shape));
        const std::size_t m = ta.shape[0], n = ta.shape[1];
        const double w = mean ? 1.0 / static_cast<double>(m) : 1.0;
        std::vector<double> out(n, 0.0);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[j] += ta.data[i * n + j] * w;
        TensorId id = result({1, n}, std::move(out), {a});
        if (tensors_[id].requires_grad) {
            record([this, a, id, m, n, w] {
                const std::vector<double>& g = tensors_[id].grad;
                double* da = grad_buf(a);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) da[i * n + j] += g[j] * w;
            });
        }
        return id;
    }

    std::vector<Tensor> tensors_;
    std::vector<std::function<void()>> nodes_;
};

// ---- gradient checking ----

struct NamedParam {
    std::string name;
    Shape shape;
    std::vector<double> value;
};

struct GradCheckReport {
    struct Entry {
        std::string name;
        double max_rel_err = 0.0;
    };
    std::vector<Entry> params;
    double max_rel_err = 0.0;
    bool passed(double tol) const { return max_rel_err <= tol; }
};

// Relative error with an absolute floor so that finite-difference noise on
// near-zero gradients does not dominate.
inline double gradient_rel_err(double analytic, double numeric) {
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-5});
    return std::fabs(analytic - numeric) / denom;
}

// Central finite differences of a scalar-valued builder over named inputs.
// The builder must be deterministic: it is re-evaluated 2x per coordinate.
template <typename Builder>
std::vector<std::vector<double>> finite_diff_gradients(const std::vector<NamedParam>& params, Builder&& build,
                                                       double step = 1e-5) {
    auto eval = [&](const std::vector<NamedParam>& p) {
        Tape tape;
        std::vector<TensorId> ids;
        ids.reserve(p.size());
        for (const NamedParam& np : p) ids.push_back(tape.leaf(np.shape, np.value, false));
        return tape.value(build(tape, ids));
    };
    std::vector<NamedParam> work = params;
    std::vector<std::vector<double>> grads(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
        grads[p].resize(params[p].value.size());
        for (std::size_t i = 0; i < params[p].value.size(); ++i) {
            const double orig = work[p].value[i];
            work[p].value[i] = orig + step;
            const double fp = eval(work);
            work[p].value[i] = orig - step;
            const double fm = eval(work);
            work[p].value[i] = orig;
            grads[p][i] = (fp - fm) / (2.0 * step);
        }
    }
    return grads;
}

// Compares analytic tape gradients against central finite differences and
// reports the worst relative error per named parameter.
template <typename Builder>
GradCheckReport grad_check(const std::vector<NamedParam>& params, Builder&& build, double step = 1e-5) {
    Tape tape;
    std::vector<TensorId> ids;
    ids.reserve(params.size());
    for (const NamedParam& np : params) ids.push_back(tape.leaf(np.shape, np.value, true));
    tape.backward(build(tape, ids));

    const auto numeric = finite_diff_gradients(params, build, step);
    GradCheckReport report;
    for (std::size_t p = 0; p < params.size(); ++p) {
        GradCheckReport::Entry entry;
        entry.name = params[p].name;
        const std::vector<double>& analytic = tape.grad(ids[p]);
        for (std::size_t i = 0; i < numeric[p].size(); ++i)
            entry.max_rel_err = std::max(entry.max_rel_err, gradient_rel_err(analytic[i], numeric[p][i]));
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.params.push_back(std::move(entry));
    }
    return report;
}

}  // namespace mmx
