#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mmx/attention.hpp"
#include "mmx/error.hpp"
#include "mmx/rng.hpp"
#include "mmx/tensor.hpp"

namespace mmx {

// Fixed special token ids shared by every vocabulary.
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;

// How encoder states are pooled before the image-feature regressor.
enum class ImagPool { sum, mean };

struct ModelConfig {
    std::size_t n_layers = 2;
    std::size_t d = 64;
    std::size_t d_ff = 128;
    std::size_t h = 4;
    std::size_t vocab_size = 0;
    std::size_t max_len = 64;
    std::size_t image_positions = 4;   // grid cells
    std::size_t image_dim = 8;         // per-cell feature width before projection
    std::size_t pooled_dim = 8;        // n, pooled image vector width
    std::size_t imag_hidden = 32;      // r
    double margin_alpha = 0.1;
    ScaleMode scale_mode = ScaleMode::per_head;
    ImagPool imag_pool = ImagPool::sum;
    bool multimodal = false;
    double dropout = 0.1;
    double lambda_imag = 1.0;
    double ln_eps = 1e-12;

    std::size_t d_head() const { return d / h; }

    void validate() const {
        if (d == 0 || d_ff == 0 || h == 0 || vocab_size == 0 || max_len == 0 || image_positions == 0 ||
            image_dim == 0 || pooled_dim == 0 || imag_hidden == 0)
            throw ConfigError("all model dimensions must be >= 1");
        if (d % h != 0)
            throw ConfigError("model dimension " + std::to_string(d) + " not divisible by " + std::to_string(h) + " heads");
        if (margin_alpha < 0.0) throw ConfigError("margin alpha must be >= 0");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
        if (vocab_size <= static_cast<std::size_t>(kUnk)) throw ConfigError("vocabulary too small for special tokens");
    }
};

// Grid features F [positions x image_dim] plus the pooled vector y [n].
struct ImageFeatures {
    std::size_t positions = 0;
    std::size_t dim = 0;
    std::vector<double> grid;    // positions * dim, row-major
    std::vector<double> pooled;  // pooled_dim
};

struct FeedForwardParams {
    std::vector<double> w1, b1, w2, b2;  // [d x d_ff], [d_ff], [d_ff x d], [d]
};

struct LayerNormParams {
    std::vector<double> gain, bias;  // [d]
};

struct EncoderLayerParams {
    MultiHeadParams self_attn;
    FeedForwardParams ffn;
    LayerNormParams ln_self, ln_ffn;
};

struct DecoderLayerParams {
    MultiHeadParams self_attn;
    MultiHeadParams cross_txt;
    std::optional<MultiHeadParams> cross_img;  // Z projections, multimodal only
    FeedForwardParams ffn;
    LayerNormParams ln_self, ln_txt, ln_ffn;
    std::optional<LayerNormParams> ln_img;
};

// All trainable values. The embedding matrix is stored once; its transpose
// doubles as the output projection (see logits computation).
struct ModelParams {
    ModelConfig config;
    std::vector<double> embedding;  // [vocab_size x d]
    std::vector<EncoderLayerParams> enc;
    std::vector<DecoderLayerParams> dec;
    std::vector<double> image_projection;  // [image_dim x d], multimodal only
    std::vector<double> imag_w1;           // [d x r]
    std::vector<double> imag_w2;           // [r x n]

    static ModelParams init(const ModelConfig& cfg, Rng& rng) {
        cfg.validate();
        ModelParams p;
        p.config = cfg;
        auto mat = [&](std::size_t rows, std::size_t cols) {
            const double lim = std::sqrt(6.0 / static_cast<double>(rows + cols));
            std::vector<double> m(rows * cols);
            for (double& v : m) v = rng.uniform(-lim, lim);
            return m;
        };
        auto ffn = [&] {
            FeedForwardParams f;
            f.w1 = mat(cfg.d, cfg.d_ff);
            f.b1.assign(cfg.d_ff, 0.0);
            f.w2 = mat(cfg.d_ff, cfg.d);
            f.b2.assign(cfg.d, 0.0);
            return f;
        };
        auto ln = [&] {
            LayerNormParams l;
            l.gain.assign(cfg.d, 1.0);
            l.bias.assign(cfg.d, 0.0);
            return l;
        };
        p.embedding = mat(cfg.vocab_size, cfg.d);
        for (std::size_t i = 0; i < cfg.n_layers; ++i) {
            EncoderLayerParams e;
            e.self_attn = MultiHeadParams::init(cfg.d, cfg.h, rng);
            e.ffn = ffn();
            e.ln_self = ln();
            e.ln_ffn = ln();
            p.enc.push_back(std::move(e));

            DecoderLayerParams dl;
            dl.self_attn = MultiHeadParams::init(cfg.d, cfg.h, rng);
            dl.cross_txt = MultiHeadParams::init(cfg.d, cfg.h, rng);
            if (cfg.multimodal) {
                dl.cross_img = MultiHeadParams::init(cfg.d, cfg.h, rng);
                dl.ln_img = ln();
            }
            dl.ffn = ffn();
            dl.ln_self = ln();
            dl.ln_txt = ln();
            dl.ln_ffn = ln();
            p.dec.push_back(std::move(dl));
        }
        if (cfg.multimodal) p.image_projection = mat(cfg.image_dim, cfg.d);
        p.imag_w1 = mat(cfg.d, cfg.imag_hidden);
        p.imag_w2 = mat(cfg.imag_hidden, cfg.pooled_dim);
        return p;
    }

    // Visits every parameter vector in a fixed order with a stable name and
    // shape. Checkpointing, the optimizer and averaging all align on this.
    template <typename Fn>
    void visit(Fn&& fn) {
        const ModelConfig& c = config;
        fn("embedding", Shape{c.vocab_size, c.d}, embedding);
        auto visit_mha = [&](const std::string& prefix, MultiHeadParams& m) {
            for (std::size_t i = 0; i < m.h; ++i) {
                fn(prefix + ".wq." + std::to_string(i), Shape{c.d, m.d_head}, m.w_q[i]);
                fn(prefix + ".wk." + std::to_string(i), Shape{c.d, m.d_head}, m.w_k[i]);
                fn(prefix + ".wv." + std::to_string(i), Shape{c.d, m.d_head}, m.w_v[i]);
                fn(prefix + ".wo." + std::to_string(i), Shape{m.d_head, c.d}, m.w_o[i]);
            }
        };
        auto visit_ffn = [&](const std::string& prefix, FeedForwardParams& f) {
            fn(prefix + ".w1", Shape{c.d, c.d_ff}, f.w1);
            fn(prefix + ".b1", Shape{c.d_ff}, f.b1);
            fn(prefix + ".w2", Shape{c.d_ff, c.d}, f.w2);
            fn(prefix + ".b2", Shape{c.d}, f.b2);
        };
        auto visit_ln = [&](const std::string& prefix, LayerNormParams& l) {
            fn(prefix + ".gain", Shape{c.d}, l.gain);
            fn(prefix + ".bias", Shape{c.d}, l.bias);
        };
        for (std::size_t i = 0; i < enc.size(); ++i) {
            const std::string base = "enc." + std::to_string(i);
            visit_mha(base + ".self", enc[i].self_attn);
            visit_ffn(base + ".ffn", enc[i].ffn);
            visit_ln(base + ".ln_self", enc[i].ln_self);
            visit_ln(base + ".ln_ffn", enc[i].ln_ffn);
        }
        for (std::size_t i = 0; i < dec.size(); ++i) {
            const std::string base = "dec." + std::to_string(i);
            visit_mha(base + ".self", dec[i].self_attn);
            visit_mha(base + ".txt", dec[i].cross_txt);
            if (dec[i].cross_img) visit_mha(base + ".img", *dec[i].cross_img);
            visit_ffn(base + ".ffn", dec[i].ffn);
            visit_ln(base + ".ln_self", dec[i].ln_self);
            visit_ln(base + ".ln_txt", dec[i].ln_txt);
            if (dec[i].ln_img) visit_ln(base + ".ln_img", *dec[i].ln_img);
            visit_ln(base + ".ln_ffn", dec[i].ln_ffn);
        }
        if (config.multimodal) fn("img_proj", Shape{c.image_dim, c.d}, image_projection);
        fn("imag.w1", Shape{c.d, c.imag_hidden}, imag_w1);
        fn("imag.w2", Shape{c.imag_hidden, c.pooled_dim}, imag_w2);
    }
};

// ---- tape handles for one forward/backward pass ----

struct FfnIds {
    TensorId w1, b1, w2, b2;
};
struct LnIds {
    TensorId gain, bias;
};
struct EncLayerIds {
    MultiHeadIds self_attn;
    FfnIds ffn;
    LnIds ln_self, ln_ffn;
};
struct DecLayerIds {
    MultiHeadIds self_attn, cross_txt;
    std::optional<MultiHeadIds> cross_img;
    FfnIds ffn;
    LnIds ln_self, ln_txt, ln_ffn;
    std::optional<LnIds> ln_img;
};
struct ParamIds {
    const ModelConfig* config = nullptr;
    TensorId embedding = 0;
    std::vector<EncLayerIds> enc;
    std::vector<DecLayerIds> dec;
    TensorId image_projection = 0;
    TensorId imag_w1 = 0, imag_w2 = 0;
};

inline ParamIds load_params(Tape& tape, const ModelParams& p, bool requires_grad = false) {
    const ModelConfig& c = p.config;
    ParamIds ids;
    ids.config = &p.config;
    ids.embedding = tape.leaf({c.vocab_size, c.d}, p.embedding, requires_grad);
    auto load_ffn = [&](const FeedForwardParams& f) {
        FfnIds fi;
        fi.w1 = tape.leaf({c.d, c.d_ff}, f.w1, requires_grad);
        fi.b1 = tape.leaf({c.d_ff}, f.b1, requires_grad);
        fi.w2 = tape.leaf({c.d_ff, c.d}, f.w2, requires_grad);
        fi.b2 = tape.leaf({c.d}, f.b2, requires_grad);
        return fi;
    };
    auto load_ln = [&](const LayerNormParams& l) {
        return LnIds{tape.leaf({c.d}, l.gain, requires_grad), tape.leaf({c.d}, l.bias, requires_grad)};
    };
    for (const EncoderLayerParams& e : p.enc) {
        EncLayerIds ei;
        ei.self_attn = load_multi_head(tape, e.self_attn, requires_grad);
        ei.ffn = load_ffn(e.ffn);
        ei.ln_self = load_ln(e.ln_self);
        ei.ln_ffn = load_ln(e.ln_ffn);
        ids.enc.push_back(std::move(ei));
    }
    for (const DecoderLayerParams& d : p.dec) {
        DecLayerIds di;
        di.self_attn = load_multi_head(tape, d.self_attn, requires_grad);
        di.cross_txt = load_multi_head(tape, d.cross_txt, requires_grad);
        if (d.cross_img) di.cross_img = load_multi_head(tape, *d.cross_img, requires_grad);
        di.ffn = load_ffn(d.ffn);
        di.ln_self = load_ln(d.ln_self);
        di.ln_txt = load_ln(d.ln_txt);
        if (d.ln_img) di.ln_img = load_ln(*d.ln_img);
        di.ln_ffn = load_ln(d.ln_ffn);
        ids.dec.push_back(std::move(di));
    }
    if (c.multimodal) ids.image_projection = tape.leaf({c.image_dim, c.d}, p.image_projection, requires_grad);
    ids.imag_w1 = tape.leaf({c.d, c.imag_hidden}, p.imag_w1, requires_grad);
    ids.imag_w2 = tape.leaf({c.imag_hidden, c.pooled_dim}, p.imag_w2, requires_grad);
    return ids;
}

// Loads parameters and also reports the created leaf ids, which appear in
// exactly the visit() order. Optimizers align gradient lists on this.
inline ParamIds load_params_flat(Tape& tape, const ModelParams& p, bool requires_grad,
                                 std::vector<TensorId>* flat) {
    const std::size_t first = tape.tensor_count();
    ParamIds ids = load_params(tape, p, requires_grad);
    if (flat) {
        flat->clear();
        for (std::size_t t = first; t < tape.tensor_count(); ++t) flat->push_back(static_cast<TensorId>(t));
    }
    return ids;
}

// Rebuilds the structured handle set from leaves created in visit() order.
// Lets gradient checks drive the full model through externally owned leaves.
inline ParamIds param_ids_from_leaves(const ModelConfig& config, const std::vector<TensorId>& leaves) {
    ParamIds ids;
    ids.config = &config;
    std::size_t cursor = 0;
    auto next = [&] {
        if (cursor >= leaves.size()) throw ContractError("not enough leaves for the model configuration");
        return leaves[cursor++];
    };
    auto take_mha = [&] {
        MultiHeadIds m;
        m.h = config.h;
        m.d_model = config.d;
        m.d_head = config.d_head();
        for (std::size_t i = 0; i < config.h; ++i) {
            m.w_q.push_back(next());
            m.w_k.push_back(next());
            m.w_v.push_back(next());
            m.w_o.push_back(next());
        }
        return m;
    };
    auto take_ffn = [&] { return FfnIds{next(), next(), next(), next()}; };
    auto take_ln = [&] { return LnIds{next(), next()}; };

    ids.embedding = next();
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        EncLayerIds e;
        e.self_attn = take_mha();
        e.ffn = take_ffn();
        e.ln_self = take_ln();
        e.ln_ffn = take_ln();
        ids.enc.push_back(std::move(e));
    }
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        DecLayerIds d;
        d.self_attn = take_mha();
        d.cross_txt = take_mha();
        if (config.multimodal) d.cross_img = take_mha();
        d.ffn = take_ffn();
        d.ln_self = take_ln();
        d.ln_txt = take_ln();
        if (config.multimodal) d.ln_img = take_ln();
        d.ln_ffn = take_ln();
        ids.dec.push_back(std::move(d));
    }
    if (config.multimodal) ids.image_projection = next();
    ids.imag_w1 = next();
    ids.imag_w2 = next();
    if (cursor != leaves.size()) throw ContractError("too many leaves for the model configuration");
    return ids;
}

// Named parameter snapshots in visit() order, for gradient checking.
inline std::vector<NamedParam> named_params(ModelParams& params) {
    std::vector<NamedParam> out;
    params.visit([&](const std::string& name, const Shape& shape, std::vector<double>& v) {
        out.push_back({name, shape, v});
    });
    return out;
}

// ---- forward building blocks ----

// Sinusoidal position table rows [len x d].
inline std::vector<double> sinusoidal_positions(std::size_t len, std::size_t d) {
    std::vector<double> pe(len * d);
    for (std::size_t pos = 0; pos < len; ++pos) {
        for (std::size_t j = 0; j + 1 < d; j += 2) {
            const double rate = std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(d));
            pe[pos * d + j] = std::sin(static_cast<double>(pos) * rate);
            pe[pos * d + j + 1] = std::cos(static_cast<double>(pos) * rate);
        }
        if (d % 2 == 1) pe[pos * d + d - 1] = std::sin(static_cast<double>(pos) * std::pow(10000.0, -static_cast<double>(d - 1) / static_cast<double>(d)));
    }
    return pe;
}

// Inverted dropout by a seeded 0 / 1/(1-rate) mask. rng == nullptr disables.
inline TensorId apply_dropout(Tape& tape, TensorId x, double rate, Rng* rng) {
    if (rate <= 0.0 || rng == nullptr) return x;
    const Tensor& t = tape[x];
    std::vector<double> mask(t.size());
    const double keep_scale = 1.0 / (1.0 - rate);
    for (double& m : mask) m = rng->next_double() < rate ? 0.0 : keep_scale;
    return tape.mul(x, tape.leaf(t.shape, std::move(mask), false));
}

namespace detail {

inline TensorId embed_sequence(Tape& tape, const ParamIds& p, const std::vector<int>& ids, Rng* dropout_rng) {
    const ModelConfig& c = *p.config;
    if (ids.empty()) throw ContractError("empty token sequence");
    if (ids.size() > c.max_len)
        throw ContractError("sequence length " + std::to_string(ids.size()) + " exceeds max_len " + std::to_string(c.max_len));
    TensorId x = tape.scale(tape.embedding_rows(p.embedding, ids), std::sqrt(static_cast<double>(c.d)));
    TensorId pos = tape.leaf({ids.size(), c.d}, sinusoidal_positions(ids.size(), c.d), false);
    x = tape.add(x, pos);
    return apply_dropout(tape, x, c.dropout, dropout_rng);
}

// Residual-then-norm sub-layer closure: ln(x + drop(f(x))).
inline TensorId add_norm(Tape& tape, const ModelConfig& c, TensorId x, TensorId sub, const LnIds& ln, Rng* dropout_rng) {
    return tape.layer_norm(tape.add(x, apply_dropout(tape, sub, c.dropout, dropout_rng)), ln.gain, ln.bias, c.ln_eps);
}

inline TensorId ffn_forward(Tape& tape, TensorId x, const FfnIds& f) {
    TensorId hidden = tape.relu(tape.add_row_vector(tape.matmul(x, f.w1), f.b1));
    return tape.add_row_vector(tape.matmul(hidden, f.w2), f.b2);
}

}  // namespace detail

// Per-layer intermediate states of the doubly-attentive decoder, for tests
// and dataflow assertions. c_txt is the normalized residual output of the
// textual cross-attention (the queries the visual sub-layer consumes);
// c_img is the raw visual cross-attention context before its residual.
struct DecoderLayerTrace {
    std::vector<double> c_self;
    std::vector<double> c_txt;
    std::optional<std::vector<double>> c_img;
    std::vector<double> ffn_out;
};

// Encoder: n_layers of [self-attention, add&norm, feed-forward, add&norm]
// over sqrt(d)-scaled embeddings plus sinusoidal positions.
inline TensorId encode(Tape& tape, const std::vector<int>& src_ids, const ParamIds& p, Rng* dropout_rng = nullptr) {
    const ModelConfig& c = *p.config;
    TensorId x = detail::embed_sequence(tape, p, src_ids, dropout_rng);
    for (const EncLayerIds& layer : p.enc) {
        TensorId att = multi_head_attention(tape, x, x, x, layer.self_attn, nullptr, c.scale_mode);
        x = detail::add_norm(tape, c, x, att, layer.ln_self, dropout_rng);
        TensorId ff = detail::ffn_forward(tape, x, layer.ffn);
        x = detail::add_norm(tape, c, x, ff, layer.ln_ffn, dropout_rng);
    }
    return x;
}

// Decoder stack over a teacher-forced prefix. img_kv, when set, are the
// projected grid features [positions x d] consumed by the visual
// cross-attention of every layer.
inline TensorId decoder_states(Tape& tape, const std::vector<int>& tgt_prefix, TensorId enc_states, const ParamIds& p,
                               std::optional<TensorId> img_kv, Rng* dropout_rng = nullptr,
                               std::vector<DecoderLayerTrace>* traces = nullptr) {
    const ModelConfig& c = *p.config;
    TensorId x = detail::embed_sequence(tape, p, tgt_prefix, dropout_rng);
    const AttentionMask causal = AttentionMask::causal(tgt_prefix.size());
    for (const DecLayerIds& layer : p.dec) {
        DecoderLayerTrace trace;
        TensorId att = multi_head_attention(tape, x, x, x, layer.self_attn, &causal, c.scale_mode);
        x = detail::add_norm(tape, c, x, att, layer.ln_self, dropout_rng);
        if (traces) trace.c_self = tape[x].data;

        TensorId txt = multi_head_attention(tape, x, enc_states, enc_states, layer.cross_txt, nullptr, c.scale_mode);
        x = detail::add_norm(tape, c, x, txt, layer.ln_txt, dropout_rng);
        if (traces) trace.c_txt = tape[x].data;

        if (img_kv) {
            if (!layer.cross_img || !layer.ln_img)
                throw ContractError("image features supplied to a decoder without a visual sub-layer");
            TensorId img = multi_head_attention(tape, x, *img_kv, *img_kv, *layer.cross_img, nullptr, c.scale_mode);
            if (traces) trace.c_img = tape[img].data;
            x = detail::add_norm(tape, c, x, img, *layer.ln_img, dropout_rng);
        }

        TensorId ff = detail::ffn_forward(tape, x, layer.ffn);
        x = detail::add_norm(tape, c, x, ff, layer.ln_ffn, dropout_rng);
        if (traces) {
            trace.ffn_out = tape[x].data;
            traces->push_back(std::move(trace));
        }
    }
    return x;
}

// Projects grid features into the model dimension: keys/values of the
// visual cross-attention.
inline TensorId project_image(Tape& tape, const ImageFeatures& img, const ParamIds& p) {
    const ModelConfig& c = *p.config;
    if (img.grid.empty()) throw InputError("image grid features missing");
    if (img.positions != c.image_positions || img.dim != c.image_dim)
        throw InputError("image grid " + std::to_string(img.positions) + "x" + std::to_string(img.dim) +
                         " does not match configured " + std::to_string(c.image_positions) + "x" +
                         std::to_string(c.image_dim));
    TensorId grid = tape.leaf({img.positions, img.dim}, img.grid, false);
    return tape.matmul(grid, p.image_projection);
}

// Logits for every prefix position via the tied output projection
// (states times embedding^T).
inline TensorId decoder_logits(Tape& tape, TensorId dec_states, const ParamIds& p) {
    return tape.matmul_nt(dec_states, p.embedding);
}

// Next-token logits [vocab_size] for a textual model.
inline std::vector<double> decode_step_textual(Tape& tape, const std::vector<int>& tgt_prefix, TensorId enc_states,
                                               const ParamIds& p) {
    if (tgt_prefix.empty() || tgt_prefix.front() != kBos) throw ContractError("decoder prefix must begin with BOS");
    if (p.config->multimodal) throw InputError("multimodal model requires image features to decode");
    TensorId states = decoder_states(tape, tgt_prefix, enc_states, p, std::nullopt);
    TensorId logits = decoder_logits(tape, states, p);
    const Tensor& t = tape[logits];
    const std::size_t v = t.shape[1];
    return std::vector<double>(t.data.end() - static_cast<std::ptrdiff_t>(v), t.data.end());
}

// Next-token logits plus per-layer traces for a multimodal model.
inline std::vector<double> decode_step_multimodal(Tape& tape, const std::vector<int>& tgt_prefix, TensorId enc_states,
                                                  const ImageFeatures& img, const ParamIds& p,
                                                  std::vector<DecoderLayerTrace>* traces = nullptr) {
    if (tgt_prefix.empty() || tgt_prefix.front() != kBos) throw ContractError("decoder prefix must begin with BOS");
    if (!p.config->multimodal) throw ContractError("decode_step_multimodal on a non-multimodal model");
    TensorId img_kv = project_image(tape, img, p);
    TensorId states = decoder_states(tape, tgt_prefix, enc_states, p, img_kv, nullptr, traces);
    TensorId logits = decoder_logits(tape, states, p);
    const Tensor& t = tape[logits];
    const std::size_t v = t.shape[1];
    return std::vector<double>(t.data.end() - static_cast<std::ptrdiff_t>(v), t.data.end());
}

// Predicted pooled image vector [1 x n]: a single-hidden-layer feed-forward
// network with ReLU applied to the pooled encoder states (sum by default).
inline TensorId imagine(Tape& tape, TensorId enc_states, const ParamIds& p) {
    const Tensor& t = tape[enc_states];
    if (t.shape.size() != 2 || t.shape[0] == 0) throw ContractError("imagine needs at least one encoder state");
    TensorId pooled = p.config->imag_pool == ImagPool::sum ? tape.sum_rows(enc_states) : tape.mean_rows(enc_states);
    TensorId hidden = tape.relu(tape.matmul(pooled, p.imag_w1));
    return tape.matmul(hidden, p.imag_w2);
}

// max(0, alpha + d(y_hat, y) - d(y_hat, y_contrastive)) with cosine distance.
inline TensorId imagination_loss(Tape& tape, TensorId y_hat, TensorId y, TensorId y_contrastive, double alpha) {
    if (alpha < 0.0) throw ContractError("margin alpha must be >= 0");
    TensorId margin = tape.add_scalar(tape.sub(tape.cosine_distance(y_hat, y), tape.cosine_distance(y_hat, y_contrastive)), alpha);
    return tape.relu(margin);
}

// Mean NLL of target ids under the logit rows; include mask excludes padding.
inline TensorId translation_loss(Tape& tape, TensorId logits, const std::vector<int>& target_ids,
                                 const std::vector<std::uint8_t>* include = nullptr) {
    return tape.cross_entropy_mean(logits, target_ids, include);
}

// ---- joint loss over a mixed-modality batch ----

struct EncodedExample {
    std::string id;
    std::vector<int> src;                     // subword ids, EOS-terminated
    std::optional<std::vector<int>> tgt;      // BOS ... EOS
    std::optional<ImageFeatures> img;
};

using Batch = std::vector<EncodedExample>;

struct JointLossParts {
    TensorId total = 0;
    double translation = 0.0;  // sum over examples with a usable target
    double imagination = 0.0;  // sum over examples that drew a contrastive image
    std::size_t n_translation = 0;
    std::size_t n_imagination = 0;
};

// Sum of per-example translation losses plus lambda times the sum of
// per-example imagination losses. Examples missing a modality contribute
// zero to that part; a multimodal model needs the image to decode, so its
// translation part also requires grid features. The contrastive vector is
// drawn uniformly from the other examples in the batch that carry pooled
// features; an example with no candidate skips its imagination term, as
// does one whose predicted vector has zero norm (cosine distance is
// undefined there; the contrastive draw is still consumed).
inline JointLossParts joint_loss(Tape& tape, const Batch& batch, const ParamIds& p, Rng* contrastive_rng,
                                 Rng* dropout_rng = nullptr) {
    const ModelConfig& c = *p.config;
    if (batch.empty()) throw ContractError("joint_loss on an empty batch");
    JointLossParts parts;
    std::optional<TensorId> total;

    std::vector<std::size_t> with_pooled;
    for (std::size_t i = 0; i < batch.size(); ++i)
        if (batch[i].img && !batch[i].img->pooled.empty()) with_pooled.push_back(i);

    for (std::size_t i = 0; i < batch.size(); ++i) {
        const EncodedExample& ex = batch[i];
        const bool want_translation = ex.tgt.has_value() && (!c.multimodal || (ex.img && !ex.img->grid.empty()));
        const bool want_imagination = c.lambda_imag != 0.0 && ex.img && !ex.img->pooled.empty();
        if (!want_translation && !want_imagination) continue;

        TensorId enc_states = encode(tape, ex.src, p, dropout_rng);

        if (want_translation) {
            const std::vector<int>& tgt = *ex.tgt;
            if (tgt.size() < 2) throw ContractError("target must contain BOS and at least one token");
            std::vector<int> prefix(tgt.begin(), tgt.end() - 1);
            std::vector<int> gold(tgt.begin() + 1, tgt.end());
            std::optional<TensorId> img_kv;
            if (c.multimodal) img_kv = project_image(tape, *ex.img, p);
            TensorId states = decoder_states(tape, prefix, enc_states, p, img_kv, dropout_rng);
            TensorId loss = translation_loss(tape, decoder_logits(tape, states, p), gold);
            parts.translation += tape.value(loss);
            ++parts.n_translation;
            total = total ? tape.add(*total, loss) : loss;
        }

        if (want_imagination) {
            std::vector<std::size_t> candidates;
            for (std::size_t j : with_pooled)
                if (j != i) candidates.push_back(j);
            if (!candidates.empty()) {
                if (contrastive_rng == nullptr) throw ContractError("joint_loss needs an rng for contrastive draws");
                const std::size_t pick = candidates[static_cast<std::size_t>(contrastive_rng->next_below(candidates.size()))];
                TensorId y_hat = imagine(tape, enc_states, p);
                double norm2 = 0.0;
                for (double v : tape[y_hat].data) norm2 += v * v;
                if (norm2 > 0.0) {
                    TensorId y = tape.leaf({ex.img->pooled.size()}, ex.img->pooled, false);
                    TensorId y_c = tape.leaf({batch[pick].img->pooled.size()}, batch[pick].img->pooled, false);
                    TensorId loss = imagination_loss(tape, y_hat, y, y_c, c.margin_alpha);
                    parts.imagination += tape.value(loss);
                    ++parts.n_imagination;
                    TensorId scaled = c.lambda_imag == 1.0 ? loss : tape.scale(loss, c.lambda_imag);
                    total = total ? tape.add(*total, scaled) : scaled;
                }
            }
        }
    }
    if (!total) throw ContractError("joint_loss: no example in the batch carries a usable objective");
    parts.total = *total;
    return parts;
}

}  // namespace mmx
