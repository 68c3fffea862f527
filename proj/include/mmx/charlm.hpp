#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mmx/data.hpp"
#include "mmx/error.hpp"
#include "mmx/rng.hpp"
#include "mmx/tensor.hpp"
#include "mmx/training.hpp"

namespace mmx {

// Character-level recurrent language model over bytes of lower-cased text,
// used to filter corpora by per-character perplexity.
//
// The recurrent cell is a single GRU:
//   z_t = sigmoid(x W_z + h U_z + b_z)
//   r_t = sigmoid(x W_r + h U_r + b_r)
//   c_t = tanh(x W_h + (r_t * h) U_h + b_h)
//   h_t = h + z_t * (c_t - h)
// followed by a linear projection of h_t to the character vocabulary.
struct CharLmConfig {
    std::size_t embed_dim = 16;
    std::size_t hidden = 64;
    std::uint64_t steps = 300;
    std::size_t batch_size = 16;
    double lr = 5e-3;  // constant Adam rate
    std::size_t max_sentence_bytes = 256;
};

class CharLM {
  public:
    // character ids: 0 BOS, 1 EOS, 2 UNK, then the sorted corpus alphabet
    static constexpr int kBosChar = 0;
    static constexpr int kEosChar = 1;
    static constexpr int kUnkChar = 2;

    CharLmConfig config;
    std::vector<unsigned char> alphabet;
    std::array<int, 256> byte_to_id{};

    std::vector<double> embedding;                  // [V x e]
    std::vector<double> w_z, w_r, w_h;              // [e x H]
    std::vector<double> u_z, u_r, u_h;              // [H x H]
    std::vector<double> b_z, b_r, b_h;              // [H]
    std::vector<double> w_out, b_out;               // [H x V], [V]

    std::size_t vocab_size() const { return alphabet.size() + 3; }

    static CharLM init(const std::vector<std::string>& corpus, const CharLmConfig& cfg, Rng& rng) {
        if (corpus.empty()) throw ConfigError("character LM needs a non-empty corpus");
        CharLM lm;
        lm.config = cfg;
        std::map<unsigned char, bool> seen;
        for (const std::string& line : corpus)
            for (unsigned char c : lowercase(line)) seen[c] = true;
        lm.byte_to_id.fill(kUnkChar);
        for (const auto& [c, _] : seen) {
            lm.byte_to_id[c] = static_cast<int>(lm.alphabet.size()) + 3;
            lm.alphabet.push_back(c);
        }
        const std::size_t v = lm.vocab_size(), e = cfg.embed_dim, h = cfg.hidden;
        auto mat = [&](std::size_t rows, std::size_t cols) {
            const double lim = std::sqrt(6.0 / static_cast<double>(rows + cols));
            std::vector<double> m(rows * cols);
            for (double& x : m) x = rng.uniform(-lim, lim);
            return m;
        };
        lm.embedding = mat(v, e);
        lm.w_z = mat(e, h);
        lm.w_r = mat(e, h);
        lm.w_h = mat(e, h);
        lm.u_z = mat(h, h);
        lm.u_r = mat(h, h);
        lm.u_h = mat(h, h);
        lm.b_z.assign(h, 0.0);
        lm.b_r.assign(h, 0.0);
        lm.b_h.assign(h, 0.0);
        lm.w_out = mat(h, v);
        lm.b_out.assign(v, 0.0);
        return lm;
    }

    template <typename Fn>
    void visit(Fn&& fn) {
        const std::size_t v = vocab_size(), e = config.embed_dim, h = config.hidden;
        fn("embedding", Shape{v, e}, embedding);
        fn("gru.wz", Shape{e, h}, w_z);
        fn("gru.wr", Shape{e, h}, w_r);
        fn("gru.wh", Shape{e, h}, w_h);
        fn("gru.uz", Shape{h, h}, u_z);
        fn("gru.ur", Shape{h, h}, u_r);
        fn("gru.uh", Shape{h, h}, u_h);
        fn("gru.bz", Shape{h}, b_z);
        fn("gru.br", Shape{h}, b_r);
        fn("gru.bh", Shape{h}, b_h);
        fn("out.w", Shape{h, v}, w_out);
        fn("out.b", Shape{v}, b_out);
    }

    std::vector<int> char_ids(const std::string& sentence) const {
        std::vector<int> ids;
        for (unsigned char c : lowercase(sentence)) ids.push_back(byte_to_id[c]);
        if (ids.size() > config.max_sentence_bytes) ids.resize(config.max_sentence_bytes);
        return ids;
    }

    struct GraphIds {
        TensorId embedding, w_z, w_r, w_h, u_z, u_r, u_h, b_z, b_r, b_h, w_out, b_out;
    };

    GraphIds load(Tape& tape, bool requires_grad) const {
        const std::size_t v = vocab_size(), e = config.embed_dim, h = config.hidden;
        GraphIds g;
        g.embedding = tape.leaf({v, e}, embedding, requires_grad);
        g.w_z = tape.leaf({e, h}, w_z, requires_grad);
        g.w_r = tape.leaf({e, h}, w_r, requires_grad);
        g.w_h = tape.leaf({e, h}, w_h, requires_grad);
        g.u_z = tape.leaf({h, h}, u_z, requires_grad);
        g.u_r = tape.leaf({h, h}, u_r, requires_grad);
        g.u_h = tape.leaf({h, h}, u_h, requires_grad);
        g.b_z = tape.leaf({h}, b_z, requires_grad);
        g.b_r = tape.leaf({h}, b_r, requires_grad);
        g.b_h = tape.leaf({h}, b_h, requires_grad);
        g.w_out = tape.leaf({h, v}, w_out, requires_grad);
        g.b_out = tape.leaf({v}, b_out, requires_grad);
        return g;
    }

    // Unrolls the cell over BOS + chars and returns the [T x V] logits for
    // predicting chars + EOS.
    static TensorId unroll_logits(Tape& tape, const GraphIds& g, const std::vector<int>& chars, std::size_t hidden) {
        std::vector<int> inputs = {kBosChar};
        inputs.insert(inputs.end(), chars.begin(), chars.end());
        TensorId h = tape.zeros({1, hidden});
        std::vector<TensorId> logit_rows;
        for (int id : inputs) {
            TensorId x = tape.embedding_rows(g.embedding, {id});
            TensorId z = tape.sigmoid(tape.add_row_vector(tape.add(tape.matmul(x, g.w_z), tape.matmul(h, g.u_z)), g.b_z));
            TensorId r = tape.sigmoid(tape.add_row_vector(tape.add(tape.matmul(x, g.w_r), tape.matmul(h, g.u_r)), g.b_r));
            TensorId c = tape.tanh_op(
                tape.add_row_vector(tape.add(tape.matmul(x, g.w_h), tape.matmul(tape.mul(r, h), g.u_h)), g.b_h));
            h = tape.add(h, tape.mul(z, tape.sub(c, h)));
            logit_rows.push_back(tape.add_row_vector(tape.matmul(h, g.w_out), g.b_out));
        }
        return tape.stack_rows(logit_rows);
    }

    // Mean per-character negative log-likelihood of the sentence, EOS
    // included; unknown characters map to the UNK id.
    double sentence_nll(const std::string& sentence) const {
        const std::vector<int> chars = char_ids(sentence);
        if (chars.empty()) throw ContractError("perplexity of an empty sentence");
        std::vector<int> targets = chars;
        targets.push_back(kEosChar);
        Tape tape;
        GraphIds g = load(tape, false);
        TensorId logits = unroll_logits(tape, g, chars, config.hidden);
        return tape.value(tape.cross_entropy_mean(logits, targets));
    }

    // Per-step next-character distributions (for validity checks).
    std::vector<std::vector<double>> step_distributions(const std::string& sentence) const {
        const std::vector<int> chars = char_ids(sentence);
        Tape tape;
        GraphIds g = load(tape, false);
        TensorId probs = tape.softmax_rows(unroll_logits(tape, g, chars, config.hidden));
        const Tensor& t = tape[probs];
        std::vector<std::vector<double>> out;
        for (std::size_t i = 0; i < t.rows(); ++i)
            out.emplace_back(t.data.begin() + static_cast<std::ptrdiff_t>(i * t.cols()),
                             t.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * t.cols()));
        return out;
    }
};

// exp(mean per-character NLL); always >= 1 for a proper model.
inline double perplexity(const CharLM& lm, const std::string& sentence) { return std::exp(lm.sentence_nll(sentence)); }

struct CharLmTrainResult {
    CharLM model;
    std::vector<double> losses;  // one per step
};

// Next-character cross-entropy over seeded batches with Adam at a constant
// rate. Deterministic for a fixed seed.
inline CharLmTrainResult charlm_train(const std::vector<std::string>& corpus, const CharLmConfig& cfg,
                                      std::uint64_t seed) {
    std::vector<std::string> sentences;
    for (const std::string& s : corpus)
        if (!lowercase(s).empty()) sentences.push_back(s);
    if (sentences.empty()) throw ConfigError("character LM needs a non-empty corpus");

    Rng init_rng = Rng(seed).stream("charlm-init");
    CharLmTrainResult result{CharLM::init(sentences, cfg, init_rng), {}};
    CharLM& lm = result.model;

    std::vector<std::string> names;
    std::vector<std::vector<double>*> values;
    lm.visit([&](const std::string& name, const Shape&, std::vector<double>& v) {
        names.push_back(name);
        values.push_back(&v);
    });
    AdamState adam(names, values, {});

    Rng order_rng = Rng(seed).stream("charlm-order");
    std::vector<std::size_t> order(sentences.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::size_t cursor = 0;
    order_rng.shuffle(order);

    for (std::uint64_t step = 0; step < cfg.steps; ++step) {
        Tape tape;
        std::vector<TensorId> flat;
        CharLM::GraphIds g{};
        {
            const std::size_t first = tape.tensor_count();
            g = lm.load(tape, true);
            for (std::size_t t = first; t < tape.tensor_count(); ++t) flat.push_back(static_cast<TensorId>(t));
        }
        std::optional<TensorId> loss;
        std::size_t used = 0;
        while (used < cfg.batch_size) {
            if (cursor == order.size()) {
                order_rng.shuffle(order);
                cursor = 0;
            }
            const std::string& s = sentences[order[cursor++]];
            const std::vector<int> chars = lm.char_ids(s);
            if (chars.empty()) continue;
            ++used;
            std::vector<int> targets = chars;
            targets.push_back(CharLM::kEosChar);
            TensorId logits = CharLM::unroll_logits(tape, g, chars, cfg.hidden);
            TensorId nll = tape.cross_entropy_mean(logits, targets);
            loss = loss ? tape.add(*loss, nll) : nll;
        }
        TensorId total = tape.scale(*loss, 1.0 / static_cast<double>(used));
        result.losses.push_back(tape.value(total));
        tape.backward(total);
        std::vector<std::vector<double>> grads(flat.size());
        for (std::size_t i = 0; i < flat.size(); ++i) grads[i] = tape.grad(flat[i]);
        std::vector<const std::vector<double>*> grad_ptrs;
        for (const auto& gr : grads) grad_ptrs.push_back(&gr);
        adam.step(values, grad_ptrs, cfg.lr);
    }
    return result;
}

// Forward-only or forward+backward scoring. The backward model is trained
// on byte-reversed sentences; a sentence is then scored by the geometric
// mean of the two perplexities.
class CharLmScorer {
  public:
    static CharLmScorer train(const std::vector<std::string>& corpus, const CharLmConfig& cfg, std::uint64_t seed,
                              bool bidirectional = false) {
        CharLmScorer s;
        s.forward_ = charlm_train(corpus, cfg, seed).model;
        if (bidirectional) {
            std::vector<std::string> reversed;
            reversed.reserve(corpus.size());
            for (std::string line : corpus) {
                std::reverse(line.begin(), line.end());
                reversed.push_back(std::move(line));
            }
            s.backward_ = charlm_train(reversed, cfg, seed + 1).model;
        }
        return s;
    }

    static CharLmScorer from_model(CharLM model) {
        CharLmScorer s;
        s.forward_ = std::move(model);
        return s;
    }

    double score(const std::string& sentence) const {
        const double fwd = perplexity(*forward_, sentence);
        if (!backward_) return fwd;
        std::string rev = sentence;
        std::reverse(rev.begin(), rev.end());
        return std::sqrt(fwd * perplexity(*backward_, rev));
    }

    const CharLM& forward_model() const { return *forward_; }

  private:
    std::optional<CharLM> forward_;
    std::optional<CharLM> backward_;
};

struct FilterDecision {
    std::string sentence;
    double perplexity = 0.0;
    bool kept = false;
};

struct FilterResult {
    std::vector<std::string> kept;
    std::vector<FilterDecision> decisions;  // input order preserved
};

// Keeps sentences whose perplexity is at most the threshold. A threshold of
// exactly 1 keeps nothing under any nondegenerate model.
inline FilterResult filter_corpus(const CharLmScorer& scorer, const std::vector<std::string>& sentences,
                                  double threshold) {
    if (!(threshold > 0.0)) throw ContractError("perplexity threshold must be positive");
    FilterResult out;
    for (const std::string& s : sentences) {
        FilterDecision d;
        d.sentence = s;
        d.perplexity = scorer.score(s);
        d.kept = d.perplexity <= threshold;
        if (d.kept) out.kept.push_back(s);
        out.decisions.push_back(std::move(d));
    }
    return out;
}

}  // namespace mmx
