// mmx: command-line front end for the multimodal translation workbench.
// Subcommands cover the full pipeline: toy-data generation, vocabulary
// learning, perplexity filtering, dataset mixing, training, decoding,
// evaluation, checkpoint averaging, adversarial checks and gradient checks.
//
// Exit codes: 0 success, 1 input/usage error, 2 internal invariant violation.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mmx/charlm.hpp"
#include "mmx/config.hpp"
#include "mmx/data.hpp"
#include "mmx/eval.hpp"
#include "mmx/model.hpp"
#include "mmx/training.hpp"

namespace fs = std::filesystem;
using namespace mmx;

namespace {

struct ConfigCli {
    std::string config_path;
    std::vector<std::string> sets;
    std::string train_path, val_path, test_path, features_path, vocab_path, out_dir;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> jobs;

    void attach(CLI::App* cmd, bool with_paths = true) {
        cmd->add_option("--config", config_path, "configuration file (key=value lines)");
        cmd->add_option("--set", sets, "override a configuration key, e.g. --set d=64")->type_name("KEY=VALUE");
        cmd->add_option("--seed", seed, "random seed (overrides the config)");
        cmd->add_option("--jobs", jobs, "evaluation decode parallelism");
        if (with_paths) {
            cmd->add_option("--train", train_path, "training dataset (jsonl)");
            cmd->add_option("--val", val_path, "validation dataset (jsonl)");
            cmd->add_option("--test", test_path, "test dataset (jsonl)");
            cmd->add_option("--features", features_path, "image feature file (mmxi)");
            cmd->add_option("--vocab", vocab_path, "subword vocabulary file");
            cmd->add_option("--out-dir", out_dir, "output directory");
        }
    }

    RunConfig resolve() const {
        RunConfig cfg;
        if (!config_path.empty()) cfg = RunConfig::load(config_path);
        for (const std::string& s : sets) cfg.apply_override(s);
        if (!train_path.empty()) cfg.train_path = train_path;
        if (!val_path.empty()) cfg.val_path = val_path;
        if (!test_path.empty()) cfg.test_path = test_path;
        if (!features_path.empty()) cfg.features_path = features_path;
        if (!vocab_path.empty()) cfg.vocab_path = vocab_path;
        if (!out_dir.empty()) cfg.out_dir = out_dir;
        if (seed) cfg.seed = *seed;
        if (jobs) cfg.jobs = *jobs;
        return cfg;
    }
};

SubwordVocab require_vocab(const RunConfig& cfg) {
    if (cfg.vocab_path.empty()) throw InputError("a vocabulary file is required (--vocab or vocab_path)");
    return SubwordVocab::load(cfg.vocab_path);
}

ModelConfig model_config_with_vocab(RunConfig cfg, const SubwordVocab& vocab) {
    if (cfg.model.vocab_size == 0)
        cfg.model.vocab_size = vocab.size();
    else if (cfg.model.vocab_size != vocab.size())
        throw ConfigError("config vocab_size " + std::to_string(cfg.model.vocab_size) +
                          " does not match the vocabulary file (" + std::to_string(vocab.size()) + " pieces)");
    cfg.model.validate();
    return cfg.model;
}

std::optional<FeatureFile> maybe_features(const RunConfig& cfg) {
    if (cfg.features_path.empty()) return std::nullopt;
    return FeatureFile::load(cfg.features_path);
}

ModelParams load_model(const RunConfig& cfg, const SubwordVocab& vocab, const std::string& ckpt_path) {
    ModelConfig mc = model_config_with_vocab(cfg, vocab);
    Rng rng = Rng(cfg.seed).stream("model-init");
    ModelParams params = ModelParams::init(mc, rng);
    CheckpointArchive::load(ckpt_path).to_params(params);
    return params;
}

TrainOptions train_options(const RunConfig& cfg) {
    TrainOptions opt;
    opt.seed = cfg.seed;
    opt.batch_size = cfg.batch_size;
    opt.steps = cfg.steps;
    opt.eval_interval = cfg.eval_interval;
    opt.top_k = cfg.top_k;
    opt.warmup = cfg.warmup;
    opt.init_lr = cfg.init_lr;
    opt.adam = {cfg.beta1, cfg.beta2, cfg.epsilon};
    opt.clip_norm = cfg.clip_norm;
    opt.eval_max_len = cfg.eval_max_len;
    opt.eval_jobs = cfg.jobs;
    opt.out_dir = cfg.out_dir;
    return opt;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot open " + path + " for writing");
    for (const std::string& l : lines) out << l << '\n';
}

// ---- subcommand bodies ----

int run_gen_toy(const std::string& out_dir, std::size_t n_train, std::size_t n_val, std::size_t n_test,
                std::uint64_t seed, std::size_t grid_positions, std::size_t feature_dim, double noise) {
    ToyTaskConfig cfg;
    cfg.n_val = n_val;
    cfg.grid_positions = grid_positions;
    cfg.feature_dim = feature_dim;
    cfg.noise = noise;
    ToyTask task = generate_toy_task(n_train, n_test, seed, cfg);
    fs::create_directories(out_dir);
    save_dataset(fs::path(out_dir) / "train.jsonl", task.train);
    save_dataset(fs::path(out_dir) / "val.jsonl", task.val);
    save_dataset(fs::path(out_dir) / "test.jsonl", task.test);
    task.features.save(fs::path(out_dir) / "features.mmxi");
    std::cout << "train\t" << task.train.size() << "\nval\t" << task.val.size() << "\ntest\t" << task.test.size()
              << "\nfeatures\t" << task.features.count() << "\n";
    return 0;
}

int run_learn_vocab(const std::vector<std::string>& data_paths, const std::vector<std::string>& corpus_paths,
                    std::size_t size, const std::string& out) {
    std::vector<std::string> corpus;
    for (const std::string& p : data_paths) {
        for (const Example& ex : load_dataset(p)) {
            corpus.push_back(ex.source);
            if (ex.target) corpus.push_back(*ex.target);
        }
    }
    for (const std::string& p : corpus_paths)
        for (std::string& line : load_lines(p)) corpus.push_back(std::move(line));
    if (corpus.empty()) throw InputError("no input text given (--data / --corpus)");
    SubwordVocab vocab = SubwordVocab::learn(corpus, size);
    vocab.save(out);
    std::cout << "pieces\t" << vocab.size() << "\n";
    return 0;
}

int run_filter(const std::string& lm_corpus, const std::string& input, const std::string& out,
               const std::string& report, double threshold, const CharLmConfig& lm_cfg, std::uint64_t seed,
               bool bidirectional) {
    const auto train_lines = load_lines(lm_corpus);
    const auto sentences = load_lines(input);
    std::cerr << "training character LM on " << train_lines.size() << " sentences\n";
    CharLmScorer scorer = CharLmScorer::train(train_lines, lm_cfg, seed, bidirectional);
    FilterResult result = filter_corpus(scorer, sentences, threshold);
    if (!out.empty()) write_lines(out, result.kept);
    if (!report.empty()) {
        std::ofstream rep(report, std::ios::binary);
        if (!rep) throw InputError("cannot open " + report + " for writing");
        char buf[64];
        for (std::size_t i = 0; i < result.decisions.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%zu\t%.9g\t", i, result.decisions[i].perplexity);
            rep << buf << (result.decisions[i].kept ? "1" : "0") << "\n";
        }
    }
    std::cout << "kept\t" << result.kept.size() << "\ntotal\t" << sentences.size() << "\n";
    return 0;
}

int run_mix(const std::vector<std::string>& part_specs, std::uint64_t seed, const std::string& out) {
    std::vector<std::pair<std::vector<Example>, std::uint32_t>> parts;
    for (const std::string& spec : part_specs) {
        const std::size_t colon = spec.rfind(':');
        std::string path = spec;
        std::uint32_t factor = 1;
        if (colon != std::string::npos && colon + 1 < spec.size() &&
            spec.find_first_not_of("0123456789", colon + 1) == std::string::npos) {
            path = spec.substr(0, colon);
            factor = static_cast<std::uint32_t>(std::stoul(spec.substr(colon + 1)));
        }
        if (factor < 1) throw InputError("oversampling factor must be >= 1 in `" + spec + "`");
        parts.emplace_back(load_dataset(path), factor);
    }
    Rng rng = Rng(seed).stream("mix");
    std::vector<Example> mixed = mix_datasets(parts, rng, &std::cerr);
    save_dataset(out, mixed);
    std::cout << "examples\t" << mixed.size() << "\n";
    return 0;
}

int run_train(const ConfigCli& cli) {
    RunConfig cfg = cli.resolve();
    if (cfg.train_path.empty()) throw InputError("training requires --train or train_path");
    SubwordVocab vocab = require_vocab(cfg);
    ModelConfig mc = model_config_with_vocab(cfg, vocab);
    std::optional<FeatureFile> features = maybe_features(cfg);
    const FeatureFile* feat = features ? &*features : nullptr;

    Batch train_set = encode_dataset(load_dataset(cfg.train_path), vocab, feat);
    Batch val_set;
    if (!cfg.val_path.empty()) val_set = encode_dataset(load_dataset(cfg.val_path), vocab, feat);

    RunConfig mcfg = cfg;
    mcfg.model = mc;
    Rng init_rng = Rng(cfg.seed).stream("model-init");
    ModelParams params = ModelParams::init(mc, init_rng);
    TrainResult result = train(params, train_set, val_set, vocab, train_options(mcfg));

    std::cout << result.report_text();
    if (result.diverged) {
        std::cerr << "training diverged (" << result.divergence_reason << "); last good checkpoint retained\n";
        return 2;
    }
    std::cerr << "finished " << result.lines.size() << " steps\n";
    return 0;
}

int run_translate(const ConfigCli& cli, const std::string& ckpt, const std::string& input, const std::string& out,
                  std::size_t beam, std::size_t max_len) {
    RunConfig cfg = cli.resolve();
    SubwordVocab vocab = require_vocab(cfg);
    ModelParams params = load_model(cfg, vocab, ckpt);
    std::optional<FeatureFile> features = maybe_features(cfg);
    Batch batch = encode_dataset(load_dataset(input), vocab, features ? &*features : nullptr);
    DecodedSet decoded = decode_set(params, batch, vocab, beam, max_len, cfg.jobs);
    if (out.empty()) {
        for (const std::string& h : decoded.hyps) std::cout << h << '\n';
    } else {
        write_lines(out, decoded.hyps);
        std::cout << "sentences\t" << decoded.hyps.size() << "\n";
    }
    return 0;
}

int run_evaluate(const std::string& hyp_path, const std::string& data_path, bool smooth,
                 const std::string& per_sentence) {
    const auto hyps = load_lines(hyp_path);
    const auto examples = load_dataset(data_path);
    if (hyps.size() != examples.size())
        throw InputError(std::to_string(hyps.size()) + " hypotheses vs " + std::to_string(examples.size()) +
                         " examples");
    std::vector<std::string> refs;
    std::vector<std::string> ids;
    for (const Example& ex : examples) {
        if (!ex.target) throw InputError("example `" + ex.id + "` has no target to evaluate against");
        refs.push_back(*ex.target);
        ids.push_back(ex.id);
    }
    const double score = bleu(hyps, refs, smooth);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", score);
    std::cout << "bleu\t" << buf << "\nsentences\t" << hyps.size() << "\nsmoothing\t" << (smooth ? "add-one" : "off")
              << "\n";
    if (!per_sentence.empty()) {
        std::ofstream rep(per_sentence, std::ios::binary);
        if (!rep) throw InputError("cannot open " + per_sentence + " for writing");
        for (std::size_t i = 0; i < hyps.size(); ++i) {
            const double s = bleu({hyps[i]}, {refs[i]}, /*smooth=*/true);
            std::snprintf(buf, sizeof buf, "%.9g", s);
            rep << ids[i] << '\t' << hyps[i] << '\t' << refs[i] << '\t' << buf << '\n';
        }
    }
    return 0;
}

int run_average(const std::vector<std::string>& inputs, const std::string& out) {
    std::vector<CheckpointArchive> archives;
    archives.reserve(inputs.size());
    for (const std::string& p : inputs) archives.push_back(CheckpointArchive::load(p));
    CheckpointArchive avg = average_checkpoints(archives);
    avg.save(out);
    std::cout << "averaged\t" << archives.size() << "\n";
    return 0;
}

int run_adversarial(const ConfigCli& cli, const std::string& ckpt, const std::string& input, std::size_t beam,
                    std::size_t max_len, const std::string& metric_name, const std::string& sense_a,
                    const std::string& sense_b) {
    RunConfig cfg = cli.resolve();
    SubwordVocab vocab = require_vocab(cfg);
    ModelParams params = load_model(cfg, vocab, ckpt);
    std::optional<FeatureFile> features = maybe_features(cfg);
    if (!features) throw InputError("adversarial evaluation requires --features");
    Batch batch = encode_dataset(load_dataset(input), vocab, &*features);

    EvalMetric metric;
    if (metric_name == "bleu") {
        metric = [](const std::vector<std::string>& h, const std::vector<std::string>& r) {
            std::vector<std::string> hyps, refs;
            for (std::size_t i = 0; i < h.size(); ++i) {
                if (r[i].empty()) continue;  // caption-only examples carry no reference
                hyps.push_back(h[i]);
                refs.push_back(r[i]);
            }
            if (hyps.empty()) throw InputError("no example carries a reference to score");
            return bleu(hyps, refs, true);
        };
    } else if (metric_name == "accuracy") {
        metric = [sense_a, sense_b](const std::vector<std::string>& h, const std::vector<std::string>& r) {
            return disambiguation_accuracy(h, r, sense_a, sense_b);
        };
    } else {
        throw InputError("unknown metric `" + metric_name + "` (use bleu or accuracy)");
    }
    AdversarialReport rep = adversarial_eval(params, batch, vocab, cfg.seed, metric, beam, max_len, cfg.jobs);
    char buf[64];
    std::cout << "metric\t" << metric_name << "\n";
    std::snprintf(buf, sizeof buf, "%.9g", rep.metric_true);
    std::cout << "true\t" << buf << "\n";
    std::snprintf(buf, sizeof buf, "%.9g", rep.metric_shuffled);
    std::cout << "shuffled\t" << buf << "\n";
    std::snprintf(buf, sizeof buf, "%.9g", rep.delta);
    std::cout << "delta\t" << buf << "\nseed\t" << rep.seed << "\n";
    return 0;
}

int run_gradcheck(const ConfigCli& cli, double tol) {
    RunConfig cfg = cli.resolve();
    ModelConfig mc = cfg.model;
    if (mc.vocab_size == 0) mc.vocab_size = 16;
    mc.dropout = 0.0;  // gradient checks run without stochastic masks
    mc.validate();

    Rng rng = Rng(cfg.seed).stream("gradcheck");
    ModelParams params = ModelParams::init(mc, rng);

    Batch batch;
    for (int e = 0; e < 2; ++e) {
        EncodedExample ex;
        ex.id = "g" + std::to_string(e);
        for (int i = 0; i < 3; ++i) ex.src.push_back(4 + static_cast<int>(rng.next_below(mc.vocab_size - 4)));
        ex.src.push_back(kEos);
        std::vector<int> tgt = {kBos};
        for (int i = 0; i < 3; ++i) tgt.push_back(4 + static_cast<int>(rng.next_below(mc.vocab_size - 4)));
        tgt.push_back(kEos);
        ex.tgt = tgt;
        ImageFeatures img;
        img.positions = mc.image_positions;
        img.dim = mc.image_dim;
        img.grid.resize(img.positions * img.dim);
        img.pooled.resize(mc.pooled_dim);
        for (double& v : img.grid) v = rng.uniform(-1.0, 1.0);
        for (double& v : img.pooled) v = rng.uniform(0.1, 1.0);
        ex.img = img;
        batch.push_back(std::move(ex));
    }

    auto build = [&](Tape& tape, const std::vector<TensorId>& leaves) {
        ParamIds ids = param_ids_from_leaves(mc, leaves);
        Rng contrastive = Rng(cfg.seed).stream("gradcheck-contrastive");
        return joint_loss(tape, batch, ids, &contrastive).total;
    };
    GradCheckReport report = grad_check(named_params(params), build);

    char buf[64];
    for (const auto& entry : report.params) {
        std::snprintf(buf, sizeof buf, "%.3e", entry.max_rel_err);
        std::cout << entry.name << '\t' << buf << '\n';
    }
    std::snprintf(buf, sizeof buf, "%.3e", report.max_rel_err);
    std::cout << "max_rel_err\t" << buf << "\npass\t" << (report.passed(tol) ? "true" : "false") << "\n";
    return report.passed(tol) ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mmx: multimodal sequence-to-sequence workbench"};
    app.set_version_flag("--version", std::string("mmx 1.0 (checkpoint format ") +
                                          std::to_string(CheckpointArchive::kVersion) + ", feature format " +
                                          std::to_string(FeatureFile::kVersion) + ")");
    app.require_subcommand(1);
    int rc = 0;

    // gen-toy
    auto* gen = app.add_subcommand("gen-toy", "generate the synthetic visual-disambiguation task");
    std::string gen_out = "toy";
    std::size_t gen_train = 2000, gen_val = 200, gen_test = 500, gen_grid = 4, gen_dim = 8;
    std::uint64_t gen_seed = 1;
    double gen_noise = 0.2;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--n-train", gen_train, "training examples");
    gen->add_option("--n-val", gen_val, "validation examples");
    gen->add_option("--n-test", gen_test, "test examples");
    gen->add_option("--seed", gen_seed, "random seed");
    gen->add_option("--grid-positions", gen_grid, "image grid cells");
    gen->add_option("--feature-dim", gen_dim, "image feature width");
    gen->add_option("--noise", gen_noise, "feature noise amplitude");
    gen->callback(
        [&] { rc = run_gen_toy(gen_out, gen_train, gen_val, gen_test, gen_seed, gen_grid, gen_dim, gen_noise); });

    // learn-vocab
    auto* lv = app.add_subcommand("learn-vocab", "learn a subword vocabulary");
    std::vector<std::string> lv_data, lv_corpus;
    std::size_t lv_size = 200;
    std::string lv_out = "vocab.txt";
    lv->add_option("--data", lv_data, "dataset files (jsonl), source and target sides");
    lv->add_option("--corpus", lv_corpus, "plain text corpora, one sentence per line");
    lv->add_option("--size", lv_size, "target vocabulary size");
    lv->add_option("--out", lv_out, "output vocabulary file")->required();
    lv->callback([&] { rc = run_learn_vocab(lv_data, lv_corpus, lv_size, lv_out); });

    // filter
    auto* fl = app.add_subcommand("filter", "perplexity-filter a corpus with a character LM");
    std::string fl_lm, fl_in, fl_out, fl_report;
    double fl_threshold = 2.5;
    CharLmConfig fl_cfg;
    std::uint64_t fl_seed = 1;
    bool fl_bidir = false;
    fl->add_option("--lm-corpus", fl_lm, "in-domain text for LM training")->required();
    fl->add_option("--in", fl_in, "sentences to filter")->required();
    fl->add_option("--out", fl_out, "file for kept sentences");
    fl->add_option("--report", fl_report, "TSV report: index, perplexity, kept");
    fl->add_option("--threshold", fl_threshold, "per-character perplexity threshold");
    fl->add_option("--steps", fl_cfg.steps, "LM training steps");
    fl->add_option("--batch-size", fl_cfg.batch_size, "LM batch size");
    fl->add_option("--hidden", fl_cfg.hidden, "LM hidden size");
    fl->add_option("--embed-dim", fl_cfg.embed_dim, "LM character embedding size");
    fl->add_option("--lr", fl_cfg.lr, "LM Adam learning rate");
    fl->add_option("--seed", fl_seed, "random seed");
    fl->add_flag("--bidirectional", fl_bidir, "score with forward and backward models");
    fl->callback([&] { rc = run_filter(fl_lm, fl_in, fl_out, fl_report, fl_threshold, fl_cfg, fl_seed, fl_bidir); });

    // mix
    auto* mx = app.add_subcommand("mix", "oversample and shuffle dataset parts");
    std::vector<std::string> mx_parts;
    std::uint64_t mx_seed = 1;
    std::string mx_out;
    mx->add_option("--part", mx_parts, "dataset part as path[:factor]")->required();
    mx->add_option("--seed", mx_seed, "shuffle seed");
    mx->add_option("--out", mx_out, "output dataset")->required();
    mx->callback([&] { rc = run_mix(mx_parts, mx_seed, mx_out); });

    // train
    auto* tr = app.add_subcommand("train", "train a model");
    ConfigCli tr_cli;
    tr_cli.attach(tr);
    tr->callback([&] { rc = run_train(tr_cli); });

    // translate
    auto* ts = app.add_subcommand("translate", "decode a dataset");
    ConfigCli ts_cli;
    ts_cli.attach(ts);
    std::string ts_ckpt, ts_in, ts_out;
    std::size_t ts_beam = 1, ts_max_len = 32;
    ts->add_option("--ckpt", ts_ckpt, "model checkpoint")->required();
    ts->add_option("--in", ts_in, "input dataset (jsonl)")->required();
    ts->add_option("--out", ts_out, "hypothesis file (default: stdout)");
    ts->add_option("--beam", ts_beam, "beam width (1 = greedy)");
    ts->add_option("--max-len", ts_max_len, "generation budget");
    ts->callback([&] { rc = run_translate(ts_cli, ts_ckpt, ts_in, ts_out, ts_beam, ts_max_len); });

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "score hypotheses with corpus BLEU");
    std::string ev_hyp, ev_data, ev_per;
    bool ev_smooth = false;
    ev->add_option("--hyp", ev_hyp, "hypotheses, one per line")->required();
    ev->add_option("--data", ev_data, "dataset with references (jsonl)")->required();
    ev->add_flag("--smooth", ev_smooth, "add-one smoothing");
    ev->add_option("--per-sentence", ev_per, "per-sentence TSV report file");
    ev->callback([&] { rc = run_evaluate(ev_hyp, ev_data, ev_smooth, ev_per); });

    // average
    auto* av = app.add_subcommand("average", "average checkpoints parameter-wise");
    std::vector<std::string> av_inputs;
    std::string av_out;
    av->add_option("--out", av_out, "output checkpoint")->required();
    av->add_option("inputs", av_inputs, "input checkpoints")->required();
    av->callback([&] { rc = run_average(av_inputs, av_out); });

    // adversarial
    auto* ad = app.add_subcommand("adversarial", "re-score with deranged fake images");
    ConfigCli ad_cli;
    ad_cli.attach(ad);
    std::string ad_ckpt, ad_in, ad_metric = "bleu", ad_sense_a = "va", ad_sense_b = "vb";
    std::size_t ad_beam = 1, ad_max_len = 32;
    ad->add_option("--ckpt", ad_ckpt, "model checkpoint")->required();
    ad->add_option("--in", ad_in, "test dataset (jsonl)")->required();
    ad->add_option("--beam", ad_beam, "beam width");
    ad->add_option("--max-len", ad_max_len, "generation budget");
    ad->add_option("--metric", ad_metric, "bleu or accuracy");
    ad->add_option("--sense-a", ad_sense_a, "first sense token (accuracy metric)");
    ad->add_option("--sense-b", ad_sense_b, "second sense token (accuracy metric)");
    ad->callback(
        [&] { rc = run_adversarial(ad_cli, ad_ckpt, ad_in, ad_beam, ad_max_len, ad_metric, ad_sense_a, ad_sense_b); });

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of all model gradients");
    ConfigCli gc_cli;
    gc_cli.attach(gc, /*with_paths=*/false);
    double gc_tol = 1e-4;
    gc->add_option("--tol", gc_tol, "maximum relative error");
    gc->callback([&] { rc = run_gradcheck(gc_cli, gc_tol); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const InputError& e) {
        std::cerr << e.what() << "\n";
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << e.what() << "\n";
        return 1;
    } catch (const VocabError& e) {
        std::cerr << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 2;
    }
    return rc;
}
