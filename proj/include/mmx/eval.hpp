#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "mmx/data.hpp"
#include "mmx/error.hpp"
#include "mmx/model.hpp"
#include "mmx/rng.hpp"

namespace mmx {

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

namespace detail {

// Frozen encoder output for one source sentence; decode steps recompute the
// decoder stack over the growing prefix (no incremental cache).
struct DecodeContext {
    const ModelParams* params;
    std::vector<double> enc_states;
    std::size_t enc_len;
    const ImageFeatures* img;

    DecodeContext(const ModelParams& p, const std::vector<int>& src, const ImageFeatures* image) : params(&p), img(image) {
        if (src.empty()) throw ContractError("cannot decode an empty source");
        if (p.config.multimodal && (img == nullptr || img->grid.empty()))
            throw InputError("multimodal model requires image features to decode");
        if (!p.config.multimodal) img = nullptr;  // textual models ignore images entirely
        Tape tape;
        ParamIds ids = load_params(tape, p, false);
        TensorId enc = encode(tape, src, ids);
        enc_states = tape[enc].data;
        enc_len = tape[enc].shape[0];
    }

    std::vector<double> step(const std::vector<int>& prefix) const {
        Tape tape;
        ParamIds ids = load_params(tape, *params, false);
        TensorId enc = tape.leaf({enc_len, params->config.d}, enc_states, false);
        if (img) return decode_step_multimodal(tape, prefix, enc, *img, ids);
        return decode_step_textual(tape, prefix, enc, ids);
    }
};

inline std::vector<double> log_softmax(const std::vector<double>& logits) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    const double log_z = mx + std::log(z);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - log_z;
    return out;
}

}  // namespace detail

// Argmax decoding from BOS until EOS or max_len generated tokens. Returns
// the generated ids without BOS/EOS. Ties pick the lowest token id.
inline std::vector<int> greedy_decode(const ModelParams& params, const std::vector<int>& src,
                                      const ImageFeatures* img, std::size_t max_len) {
    detail::DecodeContext ctx(params, src, img);
    std::vector<int> prefix = {kBos};
    std::vector<int> out;
    while (out.size() < max_len) {
        const std::vector<double> logits = ctx.step(prefix);
        std::size_t best = 0;
        for (std::size_t j = 1; j < logits.size(); ++j)
            if (logits[j] > logits[best]) best = j;
        if (static_cast<int>(best) == kEos) break;
        out.push_back(static_cast<int>(best));
        prefix.push_back(static_cast<int>(best));
        if (prefix.size() >= params.config.max_len) break;
    }
    return out;
}

// Length-normalized beam search; beam == 1 reproduces greedy_decode exactly.
inline std::vector<int> beam_decode(const ModelParams& params, const std::vector<int>& src, const ImageFeatures* img,
                                    std::size_t beam, std::size_t max_len) {
    if (beam < 1) throw ContractError("beam width must be >= 1");
    detail::DecodeContext ctx(params, src, img);

    struct Hyp {
        std::vector<int> ids;  // generated tokens, EOS excluded
        double log_prob = 0.0;
        bool finished = false;
        double score() const {
            const std::size_t len = ids.size() + (finished ? 1 : 0);
            return len == 0 ? 0.0 : log_prob / static_cast<double>(len);
        }
    };
    auto better = [](const Hyp& a, const Hyp& b) {
        if (a.score() != b.score()) return a.score() > b.score();
        return a.ids < b.ids;  // deterministic tie-break: lowest ids win
    };

    std::vector<Hyp> live = {{}};
    std::vector<Hyp> finished;
    for (std::size_t step = 0; step < max_len && !live.empty(); ++step) {
        std::vector<Hyp> candidates;
        for (const Hyp& h : live) {
            std::vector<int> prefix = {kBos};
            prefix.insert(prefix.end(), h.ids.begin(), h.ids.end());
            if (prefix.size() >= params.config.max_len) {
                Hyp done = h;
                done.finished = true;
                finished.push_back(std::move(done));
                continue;
            }
            const std::vector<double> lp = detail::log_softmax(ctx.step(prefix));
            for (std::size_t tok = 0; tok < lp.size(); ++tok) {
                Hyp next = h;
                next.log_prob += lp[tok];
                if (static_cast<int>(tok) == kEos) {
                    next.finished = true;
                } else {
                    next.ids.push_back(static_cast<int>(tok));
                }
                candidates.push_back(std::move(next));
            }
        }
        std::sort(candidates.begin(), candidates.end(), better);
        live.clear();
        // finished hypotheses occupy beam slots, so beam == 1 stops exactly
        // where greedy stops
        std::size_t taken = 0;
        for (Hyp& c : candidates) {
            if (taken == beam) break;
            ++taken;
            if (c.finished)
                finished.push_back(std::move(c));
            else
                live.push_back(std::move(c));
        }
    }
    for (Hyp& h : live) {
        h.finished = true;
        finished.push_back(std::move(h));
    }
    std::sort(finished.begin(), finished.end(), better);
    return finished.front().ids;
}

// ---------------------------------------------------------------------------
// Corpus BLEU
// ---------------------------------------------------------------------------

// Clipped n-gram match counters for n = 1..4. Corpus statistics are the
// element-wise sum of sentence statistics.
struct BleuStats {
    std::array<std::uint64_t, 4> matches{};
    std::array<std::uint64_t, 4> totals{};
    std::uint64_t cand_len = 0;
    std::uint64_t ref_len = 0;

    BleuStats& operator+=(const BleuStats& o) {
        for (std::size_t n = 0; n < 4; ++n) {
            matches[n] += o.matches[n];
            totals[n] += o.totals[n];
        }
        cand_len += o.cand_len;
        ref_len += o.ref_len;
        return *this;
    }
};

inline BleuStats sentence_bleu_stats(const std::vector<std::string>& cand, const std::vector<std::string>& ref) {
    BleuStats s;
    s.cand_len = cand.size();
    s.ref_len = ref.size();
    for (std::size_t n = 1; n <= 4; ++n) {
        if (cand.size() < n) break;
        std::map<std::vector<std::string>, std::uint64_t> ref_counts, cand_counts;
        for (std::size_t i = 0; i + n <= ref.size(); ++i)
            ++ref_counts[std::vector<std::string>(ref.begin() + static_cast<std::ptrdiff_t>(i),
                                                  ref.begin() + static_cast<std::ptrdiff_t>(i + n))];
        for (std::size_t i = 0; i + n <= cand.size(); ++i)
            ++cand_counts[std::vector<std::string>(cand.begin() + static_cast<std::ptrdiff_t>(i),
                                                   cand.begin() + static_cast<std::ptrdiff_t>(i + n))];
        for (const auto& [gram, count] : cand_counts) {
            s.totals[n - 1] += count;
            auto it = ref_counts.find(gram);
            if (it != ref_counts.end()) s.matches[n - 1] += std::min(count, it->second);
        }
    }
    return s;
}

// Corpus BLEU in [0, 100]: brevity penalty times the geometric mean of the
// clipped precisions. Orders with no candidate n-grams are skipped. Without
// smoothing any zero precision zeroes the score; add-one smoothing is
// available by flag.
inline double bleu_from_stats(const BleuStats& s, bool smooth = false) {
    if (s.cand_len == 0) return 0.0;
    double log_precision = 0.0;
    std::size_t orders = 0;
    for (std::size_t n = 0; n < 4; ++n) {
        if (s.totals[n] == 0) continue;
        double m = static_cast<double>(s.matches[n]);
        double t = static_cast<double>(s.totals[n]);
        if (smooth) {
            m += 1.0;
            t += 1.0;
        } else if (m == 0.0) {
            return 0.0;
        }
        log_precision += std::log(m / t);
        ++orders;
    }
    if (orders == 0) return 0.0;
    const double bp = s.cand_len >= s.ref_len
                          ? 1.0
                          : std::exp(1.0 - static_cast<double>(s.ref_len) / static_cast<double>(s.cand_len));
    return 100.0 * bp * std::exp(log_precision / static_cast<double>(orders));
}

// Corpus BLEU over raw text pairs; both sides are lower-cased and
// group-tokenized, mirroring the training pre-processing.
inline double bleu(const std::vector<std::string>& candidates, const std::vector<std::string>& references,
                   bool smooth = false) {
    if (candidates.empty()) throw ContractError("bleu: empty candidate set");
    if (candidates.size() != references.size())
        throw ContractError("bleu: " + std::to_string(candidates.size()) + " candidates vs " +
                            std::to_string(references.size()) + " references");
    BleuStats total;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto ref = group_tokenize(lowercase(references[i]));
        if (ref.empty()) throw ContractError("bleu: reference " + std::to_string(i) + " is empty");
        total += sentence_bleu_stats(group_tokenize(lowercase(candidates[i])), ref);
    }
    return bleu_from_stats(total, smooth);
}

// ---------------------------------------------------------------------------
// Batched decoding and metrics
// ---------------------------------------------------------------------------

struct DecodedSet {
    std::vector<std::string> hyps;
    std::vector<std::string> refs;  // empty strings where the example has no target
};

// Decodes every example (optionally substituting image features) and
// detokenizes hypotheses and references through the vocabulary. Examples are
// processed by up to `jobs` threads over frozen parameters; results are
// merged in input order.
inline DecodedSet decode_set(const ModelParams& params, const Batch& batch, const SubwordVocab& vocab,
                             std::size_t beam, std::size_t max_len, std::size_t jobs = 1,
                             const std::vector<const ImageFeatures*>* image_override = nullptr) {
    DecodedSet out;
    out.hyps.resize(batch.size());
    out.refs.resize(batch.size());
    auto work = [&](std::size_t i) {
        const EncodedExample& ex = batch[i];
        const ImageFeatures* img = image_override ? (*image_override)[i] : (ex.img ? &*ex.img : nullptr);
        const std::vector<int> ids = beam <= 1 ? greedy_decode(params, ex.src, img, max_len)
                                               : beam_decode(params, ex.src, img, beam, max_len);
        out.hyps[i] = vocab.decode(ids);
        if (ex.tgt) out.refs[i] = vocab.decode(*ex.tgt);
    };
    if (jobs <= 1) {
        for (std::size_t i = 0; i < batch.size(); ++i) work(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> threads;
        for (std::size_t t = 0; t < jobs; ++t)
            threads.emplace_back([&] {
                for (std::size_t i = next.fetch_add(1); i < batch.size(); i = next.fetch_add(1)) work(i);
            });
        for (std::thread& t : threads) t.join();
    }
    return out;
}

// Fraction of examples whose reference contains exactly one of the two
// sense tokens and whose hypothesis contains that token and not the other.
inline double disambiguation_accuracy(const std::vector<std::string>& hyps, const std::vector<std::string>& refs,
                                      const std::string& sense_a, const std::string& sense_b) {
    std::size_t considered = 0, correct = 0;
    for (std::size_t i = 0; i < hyps.size(); ++i) {
        const auto ref_tokens = group_tokenize(lowercase(refs[i]));
        const bool ra = std::count(ref_tokens.begin(), ref_tokens.end(), sense_a) > 0;
        const bool rb = std::count(ref_tokens.begin(), ref_tokens.end(), sense_b) > 0;
        if (ra == rb) continue;
        ++considered;
        const auto hyp_tokens = group_tokenize(lowercase(hyps[i]));
        const bool ha = std::count(hyp_tokens.begin(), hyp_tokens.end(), sense_a) > 0;
        const bool hb = std::count(hyp_tokens.begin(), hyp_tokens.end(), sense_b) > 0;
        if (ha == ra && hb == rb) ++correct;
    }
    if (considered == 0) throw ContractError("no reference carries exactly one sense token");
    return static_cast<double>(correct) / static_cast<double>(considered);
}

// ---------------------------------------------------------------------------
// Adversarial (fake image) evaluation
// ---------------------------------------------------------------------------

struct AdversarialReport {
    double metric_true = 0.0;
    double metric_shuffled = 0.0;
    double delta = 0.0;
    std::uint64_t seed = 0;
    std::vector<std::size_t> permutation;
};

// Seeded derangement: no element keeps its position.
inline std::vector<std::size_t> derangement(std::size_t n, Rng& rng) {
    if (n < 2) throw ContractError("no derangement exists for fewer than 2 elements");
    std::vector<std::size_t> perm(n);
    bool ok = false;
    while (!ok) {
        for (std::size_t i = 0; i < n; ++i) perm[i] = i;
        rng.shuffle(perm);
        ok = true;
        for (std::size_t i = 0; i < n; ++i)
            if (perm[i] == i) {
                ok = false;
                break;
            }
    }
    return perm;
}

using EvalMetric = std::function<double(const std::vector<std::string>& hyps, const std::vector<std::string>& refs)>;

// Scores the model twice: once with the true image features and once with
// features permuted by a seeded derangement, so every example sees a wrong
// image. The delta is metric_true - metric_shuffled.
inline AdversarialReport adversarial_eval(const ModelParams& params, const Batch& batch, const SubwordVocab& vocab,
                                          std::uint64_t seed, const EvalMetric& metric, std::size_t beam = 1,
                                          std::size_t max_len = 32, std::size_t jobs = 1) {
    if (batch.size() < 2) throw ContractError("adversarial evaluation needs at least 2 examples");
    for (const EncodedExample& ex : batch)
        if (!ex.img) throw InputError("adversarial evaluation needs image features for every example");

    AdversarialReport report;
    report.seed = seed;
    Rng rng = Rng(seed).stream("derangement");
    report.permutation = derangement(batch.size(), rng);

    DecodedSet true_set = decode_set(params, batch, vocab, beam, max_len, jobs);
    std::vector<const ImageFeatures*> fake(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) fake[i] = &*batch[report.permutation[i]].img;
    DecodedSet fake_set = decode_set(params, batch, vocab, beam, max_len, jobs, &fake);

    report.metric_true = metric(true_set.hyps, true_set.refs);
    report.metric_shuffled = metric(fake_set.hyps, fake_set.refs);
    report.delta = report.metric_true - report.metric_shuffled;
    return report;
}

}  // namespace mmx
