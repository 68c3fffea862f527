#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mmx/data.hpp"
#include "mmx/error.hpp"
#include "mmx/eval.hpp"
#include "mmx/io.hpp"
#include "mmx/model.hpp"
#include "mmx/rng.hpp"

namespace mmx {

// ---------------------------------------------------------------------------
// Learning-rate schedule and optimizer
// ---------------------------------------------------------------------------

// init_lr * d^(-1/2) * min(step^(-1/2), step * warmup^(-3/2)): linear warmup
// to the peak at step == warmup, inverse-sqrt decay afterwards.
inline double noam_lr(std::uint64_t step, std::size_t d, std::uint64_t warmup, double init_lr) {
    if (step < 1 || warmup < 1) throw ContractError("noam_lr needs step >= 1 and warmup >= 1");
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(warmup);
    return init_lr * std::pow(static_cast<double>(d), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
};

// Adam with bias correction over a fixed list of named parameter vectors.
// Moment buffers mirror the parameter shapes; t advances by exactly 1 per
// step, including steps with all-zero gradients.
class AdamState {
  public:
    AdamState(std::vector<std::string> names, const std::vector<std::vector<double>*>& params, AdamConfig cfg = {})
        : names_(std::move(names)), cfg_(cfg) {
        for (const auto* p : params) {
            m_.emplace_back(p->size(), 0.0);
            v_.emplace_back(p->size(), 0.0);
        }
    }

    std::uint64_t step_count() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

    // One update over aligned parameter/gradient lists. A NaN gradient
    // aborts the step (no state mutated) with the parameter named.
    void step(const std::vector<std::vector<double>*>& params, const std::vector<const std::vector<double>*>& grads,
              double lr) {
        if (params.size() != m_.size() || grads.size() != m_.size())
            throw ContractError("optimizer state tracks " + std::to_string(m_.size()) + " parameters, got " +
                                std::to_string(params.size()));
        for (std::size_t p = 0; p < params.size(); ++p) {
            if (grads[p]->size() != m_[p].size())
                throw DimError("gradient size mismatch for parameter " + names_[p]);
            for (double g : *grads[p])
                if (std::isnan(g)) throw NumericError("NaN gradient in parameter " + names_[p] + "; step aborted");
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t p = 0; p < params.size(); ++p) {
            std::vector<double>& theta = *params[p];
            const std::vector<double>& g = *grads[p];
            for (std::size_t i = 0; i < theta.size(); ++i) {
                m_[p][i] = cfg_.beta1 * m_[p][i] + (1.0 - cfg_.beta1) * g[i];
                v_[p][i] = cfg_.beta2 * v_[p][i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mhat = m_[p][i] / bc1;
                const double vhat = v_[p][i] / bc2;
                theta[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

  private:
    std::vector<std::string> names_;
    std::vector<std::vector<double>> m_, v_;
    AdamConfig cfg_;
    std::uint64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

// Named-parameter archive with 32-bit little-endian payload.
// Layout: "MMXF", u32 version, u32 entry count, per entry a length-prefixed
// UTF-8 name + u32 rank + u32 dims, then the payload floats in manifest
// order, then a trailing key-value meta block.
struct CheckpointArchive {
    static constexpr std::uint32_t kVersion = 1;

    struct Entry {
        std::string name;
        Shape shape;
        std::vector<float> values;
    };
    std::vector<Entry> entries;
    std::map<std::string, std::string> meta;

    static CheckpointArchive from_params(ModelParams& params, std::map<std::string, std::string> meta = {}) {
        CheckpointArchive a;
        a.meta = std::move(meta);
        params.visit([&](const std::string& name, const Shape& shape, std::vector<double>& values) {
            Entry e;
            e.name = name;
            e.shape = shape;
            e.values.reserve(values.size());
            for (double v : values) e.values.push_back(static_cast<float>(v));
            a.entries.push_back(std::move(e));
        });
        return a;
    }

    // Restores values into params; the manifest must match exactly.
    void to_params(ModelParams& params) const {
        std::size_t next = 0;
        params.visit([&](const std::string& name, const Shape& shape, std::vector<double>& values) {
            if (next >= entries.size()) throw StructuralError("checkpoint is missing parameter " + name);
            const Entry& e = entries[next++];
            if (e.name != name)
                throw StructuralError("checkpoint manifest mismatch: expected " + name + ", found " + e.name);
            if (e.shape != shape)
                throw StructuralError("checkpoint shape mismatch for " + name + ": " + shape_str(e.shape) + " vs " +
                                      shape_str(shape));
            for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<double>(e.values[i]);
        });
        if (next != entries.size()) throw StructuralError("checkpoint has extra parameter " + entries[next].name);
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw InputError("cannot open " + path.string() + " for writing");
        out.write("MMXF", 4);
        io::write_u32(out, kVersion);
        io::write_u32(out, static_cast<std::uint32_t>(entries.size()));
        for (const Entry& e : entries) {
            io::write_string(out, e.name);
            io::write_u32(out, static_cast<std::uint32_t>(e.shape.size()));
            for (std::size_t d : e.shape) io::write_u32(out, static_cast<std::uint32_t>(d));
        }
        for (const Entry& e : entries)
            for (float v : e.values) io::write_f32(out, v);
        io::write_u32(out, static_cast<std::uint32_t>(meta.size()));
        for (const auto& [k, v] : meta) {
            io::write_string(out, k);
            io::write_string(out, v);
        }
    }

    static CheckpointArchive load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw InputError("cannot open checkpoint " + path.string());
        io::expect_magic(in, "MMXF", "checkpoint");
        const std::uint32_t version = io::read_u32(in);
        if (version != kVersion) throw InputError("unsupported checkpoint version " + std::to_string(version));
        CheckpointArchive a;
        const std::uint32_t count = io::read_u32(in);
        std::map<std::string, bool> seen;
        for (std::uint32_t i = 0; i < count; ++i) {
            Entry e;
            e.name = io::read_string(in);
            if (seen.count(e.name)) throw StructuralError("duplicate checkpoint entry " + e.name);
            seen[e.name] = true;
            const std::uint32_t rank = io::read_u32(in);
            std::size_t numel = 1;
            for (std::uint32_t r = 0; r < rank; ++r) {
                e.shape.push_back(io::read_u32(in));
                numel *= e.shape.back();
            }
            e.values.resize(numel);
            a.entries.push_back(std::move(e));
        }
        for (Entry& e : a.entries)
            for (float& v : e.values) v = io::read_f32(in);
        const std::uint32_t meta_count = io::read_u32(in);
        for (std::uint32_t i = 0; i < meta_count; ++i) {
            std::string k = io::read_string(in);
            a.meta[k] = io::read_string(in);
        }
        return a;
    }
};

// Parameter-wise arithmetic mean of archives with identical manifests.
// The meta block records the source steps.
inline CheckpointArchive average_checkpoints(const std::vector<CheckpointArchive>& archives) {
    if (archives.empty()) throw ContractError("average_checkpoints needs at least one archive");
    CheckpointArchive out = archives.front();
    for (std::size_t a = 1; a < archives.size(); ++a) {
        if (archives[a].entries.size() != out.entries.size())
            throw StructuralError("checkpoint manifests differ in entry count");
        for (std::size_t e = 0; e < out.entries.size(); ++e) {
            const auto& lhs = out.entries[e];
            const auto& rhs = archives[a].entries[e];
            if (lhs.name != rhs.name || lhs.shape != rhs.shape)
                throw StructuralError("checkpoint manifests differ at entry " + lhs.name);
        }
    }
    const double k = static_cast<double>(archives.size());
    for (std::size_t e = 0; e < out.entries.size(); ++e) {
        for (std::size_t i = 0; i < out.entries[e].values.size(); ++i) {
            double sum = 0.0;
            for (const CheckpointArchive& a : archives) sum += static_cast<double>(a.entries[e].values[i]);
            out.entries[e].values[i] = static_cast<float>(sum / k);
        }
    }
    out.meta.clear();
    std::string steps;
    for (const CheckpointArchive& a : archives) {
        auto it = a.meta.find("step");
        if (!steps.empty()) steps += ",";
        steps += it != a.meta.end() ? it->second : "?";
    }
    out.meta["source_steps"] = steps;
    return out;
}

// ---------------------------------------------------------------------------
// Best-k checkpoint tracking
// ---------------------------------------------------------------------------

// Keeps the k best (score, step, path) triples, scores descending, ties
// broken in favour of the later step.
class TopKTracker {
  public:
    struct Entry {
        double score = 0.0;
        std::uint64_t step = 0;
        std::string path;
    };

    explicit TopKTracker(std::size_t k) : k_(k) {
        if (k < 1) throw ContractError("top-k tracker needs k >= 1");
    }

    // Returns the evicted entry, if any. An offer that does not make the
    // cut is returned as its own eviction.
    std::optional<Entry> offer(double score, std::uint64_t step, std::string path) {
        entries_.push_back({score, step, std::move(path)});
        std::sort(entries_.begin(), entries_.end(), [](const Entry& a, const Entry& b) {
            if (a.score != b.score) return a.score > b.score;
            return a.step > b.step;
        });
        if (entries_.size() > k_) {
            Entry evicted = std::move(entries_.back());
            entries_.pop_back();
            return evicted;
        }
        return std::nullopt;
    }

    const std::vector<Entry>& entries() const { return entries_; }

  private:
    std::size_t k_;
    std::vector<Entry> entries_;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainOptions {
    std::uint64_t seed = 1;
    std::size_t batch_size = 16;
    std::uint64_t steps = 100;
    std::uint64_t eval_interval = 0;  // 0 disables validation
    std::size_t top_k = 10;
    std::uint64_t warmup = 4000;
    double init_lr = 0.2;
    AdamConfig adam;
    double clip_norm = 1.0;  // global-norm gradient clipping, 0 disables
    std::size_t eval_max_len = 32;
    std::size_t eval_jobs = 1;
    std::filesystem::path out_dir;  // empty: keep everything in memory
};

struct TrainReportLine {
    std::uint64_t step = 0;
    double lr = 0.0;
    double loss_translation = 0.0;
    double loss_imagination = 0.0;
    std::optional<double> val_bleu;
};

struct TrainResult {
    std::vector<TrainReportLine> lines;
    std::vector<TopKTracker::Entry> best;
    bool diverged = false;
    std::string divergence_reason;
    std::optional<double> last_val_bleu;

    std::string report_text() const {
        std::string out = "step\tlr\tloss_translation\tloss_imagination\tval_bleu\n";
        char buf[160];
        for (const TrainReportLine& l : lines) {
            if (l.val_bleu)
                std::snprintf(buf, sizeof buf, "%llu\t%.9g\t%.9g\t%.9g\t%.9g\n",
                              static_cast<unsigned long long>(l.step), l.lr, l.loss_translation, l.loss_imagination,
                              *l.val_bleu);
            else
                std::snprintf(buf, sizeof buf, "%llu\t%.9g\t%.9g\t%.9g\t-\n", static_cast<unsigned long long>(l.step),
                              l.lr, l.loss_translation, l.loss_imagination);
            out += buf;
        }
        return out;
    }
};

namespace detail {

// Length-bucketed, seed-shuffled batch order for one epoch.
inline std::vector<std::vector<std::size_t>> epoch_batches(const Batch& data, std::size_t batch_size, Rng& rng) {
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return data[a].src.size() / 4 < data[b].src.size() / 4; });
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                             order.begin() + static_cast<std::ptrdiff_t>(std::min(i + batch_size, order.size())));
    }
    rng.shuffle(batches);
    return batches;
}

}  // namespace detail

// Optimizes params over seeded, length-bucketed batches of the training set
// with Adam under the Noam schedule. Every eval_interval steps the model is
// scored with greedy-decode BLEU on the validation set and the checkpoint
// is offered to the best-k tracker. Fully reproducible for a fixed seed.
inline TrainResult train(ModelParams& params, const Batch& train_data, const Batch& val_data,
                         const SubwordVocab& vocab, const TrainOptions& opt) {
    if (train_data.empty()) throw ContractError("training set is empty");
    {
        bool any_objective = false;
        for (const EncodedExample& ex : train_data)
            if (ex.tgt || (ex.img && !ex.img->pooled.empty())) any_objective = true;
        if (!any_objective) throw ContractError("no training example carries a target or an image");
    }
    const bool save_files = !opt.out_dir.empty();
    if (save_files) std::filesystem::create_directories(opt.out_dir);

    std::vector<std::string> names;
    std::vector<std::vector<double>*> values;
    params.visit([&](const std::string& name, const Shape&, std::vector<double>& v) {
        names.push_back(name);
        values.push_back(&v);
    });
    AdamState adam(names, values, opt.adam);

    Rng contrastive = Rng(opt.seed).stream("contrastive");
    Rng dropout_rng = Rng(opt.seed).stream("dropout");

    TrainResult result;
    TopKTracker tracker(opt.top_k);

    std::uint64_t step = 0;
    std::uint64_t epoch = 0;
    while (step < opt.steps && !result.diverged) {
        Rng shuffle_rng = Rng(opt.seed).stream("shuffle-" + std::to_string(epoch));
        const auto batches = detail::epoch_batches(train_data, opt.batch_size, shuffle_rng);
        ++epoch;
        for (const auto& batch_indices : batches) {
            if (step >= opt.steps) break;
            Batch batch;
            batch.reserve(batch_indices.size());
            for (std::size_t i : batch_indices) batch.push_back(train_data[i]);

            const double lr = noam_lr(step + 1, params.config.d, opt.warmup, opt.init_lr);
            TrainReportLine line;
            line.step = step + 1;
            line.lr = lr;
            try {
                Tape tape;
                std::vector<TensorId> flat;
                ParamIds ids = load_params_flat(tape, params, true, &flat);
                JointLossParts parts = joint_loss(tape, batch, ids, &contrastive,
                                                  params.config.dropout > 0.0 ? &dropout_rng : nullptr);
                tape.backward(parts.total);

                std::vector<std::vector<double>> grads(flat.size());
                for (std::size_t i = 0; i < flat.size(); ++i) grads[i] = tape.grad(flat[i]);
                if (opt.clip_norm > 0.0) {
                    double norm2 = 0.0;
                    for (const auto& g : grads)
                        for (double x : g) norm2 += x * x;
                    const double norm = std::sqrt(norm2);
                    if (norm > opt.clip_norm) {
                        const double scale = opt.clip_norm / norm;
                        for (auto& g : grads)
                            for (double& x : g) x *= scale;
                    }
                }
                std::vector<const std::vector<double>*> grad_ptrs;
                grad_ptrs.reserve(grads.size());
                for (const auto& g : grads) grad_ptrs.push_back(&g);
                adam.step(values, grad_ptrs, lr);

                line.loss_translation = parts.n_translation ? parts.translation / static_cast<double>(parts.n_translation) : 0.0;
                line.loss_imagination = parts.n_imagination ? parts.imagination / static_cast<double>(parts.n_imagination) : 0.0;
            } catch (const NumericError& e) {
                result.diverged = true;
                result.divergence_reason = e.what();
                if (save_files)
                    CheckpointArchive::from_params(params, {{"step", std::to_string(step)}, {"status", "last_good"}})
                        .save(opt.out_dir / "last_good.mmxf");
                break;
            }
            ++step;

            if (opt.eval_interval > 0 && !val_data.empty() && step % opt.eval_interval == 0) {
                DecodedSet decoded = decode_set(params, val_data, vocab, 1, opt.eval_max_len, opt.eval_jobs);
                std::vector<std::string> hyps, refs;
                for (std::size_t i = 0; i < decoded.hyps.size(); ++i) {
                    if (decoded.refs[i].empty()) continue;
                    hyps.push_back(decoded.hyps[i]);
                    refs.push_back(decoded.refs[i]);
                }
                const double score = hyps.empty() ? 0.0 : bleu(hyps, refs, /*smooth=*/true);
                line.val_bleu = score;
                result.last_val_bleu = score;
                std::string path;
                if (save_files) {
                    path = (opt.out_dir / ("ckpt_" + std::to_string(step) + ".mmxf")).string();
                    CheckpointArchive::from_params(params, {{"step", std::to_string(step)},
                                                            {"val_bleu", std::to_string(score)}})
                        .save(path);
                }
                auto evicted = tracker.offer(score, step, path);
                if (evicted && save_files && !evicted->path.empty()) std::filesystem::remove(evicted->path);
            }
            result.lines.push_back(line);
        }
    }

    result.best = tracker.entries();
    if (save_files) {
        CheckpointArchive::from_params(params, {{"step", std::to_string(step)}}).save(opt.out_dir / "final.mmxf");
        std::ofstream report(opt.out_dir / "report.tsv", std::ios::binary);
        report << result.report_text();
        std::ofstream topk(opt.out_dir / "topk.tsv", std::ios::binary);
        char buf[96];
        for (const auto& e : result.best) {
            std::snprintf(buf, sizeof buf, "%.9g\t%llu\t", e.score, static_cast<unsigned long long>(e.step));
            topk << buf << e.path << "\n";
        }
    }
    return result;
}

}  // namespace mmx
