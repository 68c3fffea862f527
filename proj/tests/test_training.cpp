#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "mmx/training.hpp"
#include "oracles.hpp"

using namespace mmx;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / "mmx_training_test" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.n_layers = 1;
    c.d = 16;
    c.d_ff = 24;
    c.h = 2;
    c.vocab_size = 12;
    c.max_len = 16;
    c.image_positions = 2;
    c.image_dim = 4;
    c.pooled_dim = 4;
    c.imag_hidden = 6;
    c.dropout = 0.0;
    return c;
}

// ten-example copy task over raw ids
Batch copy_task() {
    Batch batch;
    for (int i = 0; i < 10; ++i) {
        const int a = 4 + (i % 8), b = 4 + ((i + 3) % 8);
        EncodedExample ex;
        ex.id = "c" + std::to_string(i);
        ex.src = {a, b, kEos};
        ex.tgt = std::vector<int>{kBos, a, b, kEos};
        batch.push_back(std::move(ex));
    }
    return batch;
}

SubwordVocab tiny_vocab() { return SubwordVocab::learn({"a b c d"}, 24); }

}  // namespace

TEST_CASE("noam schedule closed-form values and peak") {
    // frozen closed-form evaluations for d=64, warmup=4000, init_lr=0.2
    CHECK(std::fabs(noam_lr(1, 64, 4000, 0.2) - 9.882117688026186e-08) <= 1e-10);
    CHECK(std::fabs(noam_lr(4000, 64, 4000, 0.2) - 3.952847075210474e-04) <= 1e-10);
    CHECK(std::fabs(noam_lr(8000, 64, 4000, 0.2) - 2.7950849718747374e-04) <= 1e-10);

    // both min branches agree at the warmup step
    const double w = 4000.0;
    CHECK(std::pow(w, -0.5) == doctest::Approx(w * std::pow(w, -1.5)).epsilon(1e-15));

    // strictly increasing before warmup, strictly decreasing after, max at warmup
    double peak = noam_lr(4000, 64, 4000, 0.2);
    for (std::uint64_t s = 1; s < 4000; s += 37) {
        CHECK(noam_lr(s, 64, 4000, 0.2) < noam_lr(s + 1, 64, 4000, 0.2));
        CHECK(noam_lr(s, 64, 4000, 0.2) < peak);
    }
    for (std::uint64_t s = 4000; s < 8000; s += 37) CHECK(noam_lr(s, 64, 4000, 0.2) >= noam_lr(s + 1, 64, 4000, 0.2));
    for (std::uint64_t s = 1; s <= 8000; s += 97) CHECK(noam_lr(s, 64, 4000, 0.2) > 0.0);

    CHECK_THROWS_AS(noam_lr(0, 64, 4000, 0.2), ContractError);
    CHECK_THROWS_AS(noam_lr(5, 64, 0, 0.2), ContractError);
}

TEST_CASE("adam: zero gradient leaves parameters bit-identical but advances t") {
    std::vector<double> theta = {0.25, -1.5, 3.0};
    std::vector<double> theta_before = theta;
    std::vector<std::vector<double>*> params = {&theta};
    AdamState adam({"p"}, params);
    std::vector<double> zero(3, 0.0);
    std::vector<const std::vector<double>*> grads = {&zero};
    adam.step(params, grads, 0.1);
    CHECK(adam.step_count() == 1);
    CHECK(std::memcmp(theta.data(), theta_before.data(), theta.size() * sizeof(double)) == 0);
}

TEST_CASE("adam: constant gradient approaches a signed fixed step") {
    std::vector<double> theta = {0.0};
    std::vector<std::vector<double>*> params = {&theta};
    AdamState adam({"p"}, params);
    std::vector<double> g = {0.5};
    std::vector<const std::vector<double>*> grads = {&g};
    const double lr = 0.01;
    double prev = theta[0];
    for (int i = 0; i < 400; ++i) {
        adam.step(params, grads, lr);
        if (i >= 399) break;
        prev = theta[0];
    }
    const double last_update = theta[0] - prev;
    CHECK(std::fabs(last_update + lr) <= 0.02 * lr);  // -sign(g) * lr asymptotically
}

TEST_CASE("adam: three hand-stepped scalar updates match the frozen trace") {
    std::vector<double> theta = {0.5};
    std::vector<std::vector<double>*> params = {&theta};
    AdamState adam({"p"}, params);  // beta1 0.9, beta2 0.98, eps 1e-9
    const double lr = 0.01;
    std::vector<double> g1 = {0.3}, g2 = {-0.1}, g3 = {0.2};
    std::vector<const std::vector<double>*> grads = {&g1};
    adam.step(params, grads, lr);
    CHECK(std::fabs(theta[0] - 0.4900000000333333) <= 1e-12);
    grads = {&g2};
    adam.step(params, grads, lr);
    CHECK(std::fabs(theta[0] - 0.4859823493905942) <= 1e-12);
    grads = {&g3};
    adam.step(params, grads, lr);
    CHECK(std::fabs(theta[0] - 0.4799308544074304) <= 1e-12);
}

TEST_CASE("adam: NaN gradient aborts with the parameter named") {
    std::vector<double> theta = {1.0};
    std::vector<std::vector<double>*> params = {&theta};
    AdamState adam({"imag.w1"}, params);
    std::vector<double> g = {std::nan("")};
    std::vector<const std::vector<double>*> grads = {&g};
    CHECK_THROWS_WITH_AS(adam.step(params, grads, 0.1), doctest::Contains("imag.w1"), NumericError);
    CHECK(adam.step_count() == 0);
    CHECK(theta[0] == 1.0);
}

TEST_CASE("checkpoint serialization round-trips exactly") {
    ModelConfig c = tiny_config();
    Rng rng(7);
    ModelParams p = ModelParams::init(c, rng);
    const fs::path dir = temp_dir("ckpt");

    CheckpointArchive a = CheckpointArchive::from_params(p, {{"step", "42"}, {"val_bleu", "12.5"}});
    a.save(dir / "a.mmxf");
    CheckpointArchive b = CheckpointArchive::load(dir / "a.mmxf");
    CHECK(b.meta.at("step") == "42");
    b.save(dir / "b.mmxf");
    CHECK(slurp(dir / "a.mmxf") == slurp(dir / "b.mmxf"));  // byte-identical re-serialization

    // restoring and re-archiving reproduces every 32-bit value exactly
    ModelParams q = ModelParams::init(c, rng);
    b.to_params(q);
    CheckpointArchive c2 = CheckpointArchive::from_params(q, b.meta);
    for (std::size_t e = 0; e < a.entries.size(); ++e)
        CHECK(std::memcmp(a.entries[e].values.data(), c2.entries[e].values.data(),
                          a.entries[e].values.size() * sizeof(float)) == 0);
}

TEST_CASE("checkpoint manifest mismatches are structural errors") {
    ModelConfig c = tiny_config();
    Rng rng(7);
    ModelParams p = ModelParams::init(c, rng);
    CheckpointArchive a = CheckpointArchive::from_params(p);

    ModelConfig c2 = c;
    c2.multimodal = true;  // extra visual parameters change the manifest
    Rng rng2(8);
    ModelParams q = ModelParams::init(c2, rng2);
    CHECK_THROWS_AS(a.to_params(q), StructuralError);

    CheckpointArchive renamed = a;
    renamed.entries[1].name = "bogus";
    CHECK_THROWS_WITH_AS(renamed.to_params(p), doctest::Contains("bogus"), StructuralError);
}

TEST_CASE("checkpoint averaging: idempotence, midpoint and loop-mean oracle") {
    ModelConfig c = tiny_config();
    Rng rng(9);
    ModelParams p = ModelParams::init(c, rng);
    CheckpointArchive a = CheckpointArchive::from_params(p, {{"step", "1"}});

    // averaging k copies of one checkpoint reproduces its parameters
    CheckpointArchive same = average_checkpoints({a, a, a});
    for (std::size_t e = 0; e < a.entries.size(); ++e)
        for (std::size_t i = 0; i < a.entries[e].values.size(); ++i)
            CHECK(same.entries[e].values[i] == a.entries[e].values[i]);
    CHECK(same.meta.at("source_steps") == "1,1,1");

    // two scalar checkpoints 1.0 and 3.0 average to 2.0
    CheckpointArchive s1, s2;
    s1.entries.push_back({"w", {1}, {1.0f}});
    s2.entries.push_back({"w", {1}, {3.0f}});
    CHECK(average_checkpoints({s1, s2}).entries[0].values[0] == 2.0f);

    // ten random checkpoints against an independent loop mean, within 1 ulp
    std::vector<CheckpointArchive> archives;
    for (int k = 0; k < 10; ++k) {
        Rng r(100 + static_cast<std::uint64_t>(k));
        ModelParams pk = ModelParams::init(c, r);
        archives.push_back(CheckpointArchive::from_params(pk, {{"step", std::to_string(k)}}));
    }
    CheckpointArchive avg = average_checkpoints(archives);
    for (std::size_t e = 0; e < avg.entries.size(); ++e) {
        for (std::size_t i = 0; i < avg.entries[e].values.size(); ++i) {
            double sum = 0.0;
            for (const auto& arch : archives) sum += static_cast<double>(arch.entries[e].values[i]);
            const float expect = static_cast<float>(sum / 10.0);
            const float got = avg.entries[e].values[i];
            CHECK(std::fabs(got - expect) <= std::fabs(std::nextafter(expect, got) - expect));
        }
    }

    // manifest mismatch names the first differing entry
    CheckpointArchive bad = archives[0];
    bad.entries[2].name += "_x";
    CHECK_THROWS_AS(average_checkpoints({archives[0], bad}), StructuralError);
}

TEST_CASE("top-k tracker equals the sort-and-truncate oracle") {
    Rng rng(11);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t k = 1 + static_cast<std::size_t>(rng.next_below(5));
        TopKTracker tracker(k);
        std::vector<TopKTracker::Entry> all;
        const std::size_t n = 1 + static_cast<std::size_t>(rng.next_below(30));
        for (std::size_t step = 1; step <= n; ++step) {
            const double score = static_cast<double>(rng.next_below(6));  // coarse scores force ties
            tracker.offer(score, step, "p" + std::to_string(step));
            all.push_back({score, step, ""});
        }
        std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
            if (a.score != b.score) return a.score > b.score;
            return a.step > b.step;  // ties broken by later step
        });
        all.resize(std::min(all.size(), k));
        REQUIRE(tracker.entries().size() == all.size());
        for (std::size_t i = 0; i < all.size(); ++i) {
            CHECK(tracker.entries()[i].score == all[i].score);
            CHECK(tracker.entries()[i].step == all[i].step);
        }
    }
}

TEST_CASE("training on a small copy task reduces the loss") {
    ModelConfig c = tiny_config();
    Rng rng(21);
    ModelParams p = ModelParams::init(c, rng);
    TrainOptions opt;
    opt.seed = 5;
    opt.steps = 50;
    opt.batch_size = 5;
    opt.warmup = 10;
    opt.init_lr = 2.0;
    opt.eval_interval = 0;
    SubwordVocab vocab = tiny_vocab();
    TrainResult res = train(p, copy_task(), {}, vocab, opt);
    REQUIRE(res.lines.size() == 50);
    CHECK(!res.diverged);
    CHECK(res.lines.back().loss_translation < res.lines.front().loss_translation);
}

TEST_CASE("caption-only data trains the encoder but never the decoder") {
    ModelConfig c = tiny_config();
    Rng rng(23);
    ModelParams p = ModelParams::init(c, rng);

    Batch data;
    Rng feat(3);
    for (int i = 0; i < 6; ++i) {
        EncodedExample ex;
        ex.id = "i" + std::to_string(i);
        ex.src = {4 + i, 5, kEos};
        ImageFeatures img;
        img.positions = c.image_positions;
        img.dim = c.image_dim;
        img.grid = oracle::random_values(feat, c.image_positions * c.image_dim);
        img.pooled = oracle::random_values(feat, c.pooled_dim, 0.1, 1.0);
        ex.img = img;
        data.push_back(std::move(ex));
    }

    std::vector<std::vector<double>> dec_before;
    for (const auto& layer : p.dec) {
        dec_before.push_back(layer.self_attn.w_q[0]);
        dec_before.push_back(layer.cross_txt.w_q[0]);
        dec_before.push_back(layer.ffn.w1);
        dec_before.push_back(layer.ln_txt.gain);
    }
    const std::vector<double> enc_before = p.enc[0].self_attn.w_q[0];

    TrainOptions opt;
    opt.seed = 6;
    opt.steps = 8;
    opt.batch_size = 3;
    opt.warmup = 10;
    opt.init_lr = 2.0;
    SubwordVocab vocab = tiny_vocab();
    train(p, data, {}, vocab, opt);

    std::size_t idx = 0;
    for (const auto& layer : p.dec) {
        CHECK(layer.self_attn.w_q[0] == dec_before[idx++]);
        CHECK(layer.cross_txt.w_q[0] == dec_before[idx++]);
        CHECK(layer.ffn.w1 == dec_before[idx++]);
        CHECK(layer.ln_txt.gain == dec_before[idx++]);
    }
    CHECK(p.enc[0].self_attn.w_q[0] != enc_before);
}

TEST_CASE("lambda = 0 severs the auxiliary objective bit-for-bit") {
    ModelConfig c = tiny_config();
    c.lambda_imag = 0.0;
    Rng rng(29);
    const ModelParams init = ModelParams::init(c, rng);

    Batch with_images = copy_task();
    Rng feat(5);
    for (auto& ex : with_images) {
        ImageFeatures img;
        img.positions = c.image_positions;
        img.dim = c.image_dim;
        img.grid = oracle::random_values(feat, c.image_positions * c.image_dim);
        img.pooled = oracle::random_values(feat, c.pooled_dim, 0.1, 1.0);
        ex.img = img;
    }
    Batch without_images = copy_task();

    TrainOptions opt;
    opt.seed = 7;
    opt.steps = 12;
    opt.batch_size = 4;
    opt.warmup = 10;
    opt.init_lr = 2.0;
    SubwordVocab vocab = tiny_vocab();

    ModelParams p1 = init;
    train(p1, with_images, {}, vocab, opt);
    ModelParams p2 = init;
    train(p2, without_images, {}, vocab, opt);

    // identical trajectories with or without the unused modality, and the
    // regressor head never moves from its initialization
    bool all_equal = true;
    std::vector<const std::vector<double>*> v1, v2;
    p1.visit([&](const std::string&, const Shape&, std::vector<double>& v) { v1.push_back(&v); });
    p2.visit([&](const std::string&, const Shape&, std::vector<double>& v) { v2.push_back(&v); });
    for (std::size_t i = 0; i < v1.size(); ++i)
        if (*v1[i] != *v2[i]) all_equal = false;
    CHECK(all_equal);
    CHECK(p1.imag_w1 == init.imag_w1);
    CHECK(p1.imag_w2 == init.imag_w2);
}

TEST_CASE("divergence aborts and retains the last good checkpoint") {
    ModelConfig c = tiny_config();
    Rng rng(41);
    ModelParams p = ModelParams::init(c, rng);
    TrainOptions opt;
    opt.seed = 2;
    opt.steps = 60;
    opt.batch_size = 5;
    opt.warmup = 1;
    opt.init_lr = 1e200;  // parameters overflow on the next matmul
    opt.clip_norm = 0.0;
    opt.out_dir = temp_dir("diverge");
    SubwordVocab vocab = tiny_vocab();
    TrainResult res = train(p, copy_task(), {}, vocab, opt);
    CHECK(res.diverged);
    CHECK(!res.divergence_reason.empty());
    CHECK(fs::exists(opt.out_dir / "last_good.mmxf"));
}

TEST_CASE("same seed and config reproduce checkpoints and reports byte-for-byte") {
    ModelConfig c = tiny_config();
    Rng rng(31);
    const ModelParams init = ModelParams::init(c, rng);
    SubwordVocab vocab = tiny_vocab();

    Batch val;
    for (int i = 0; i < 3; ++i) {
        EncodedExample ex;
        ex.id = "v" + std::to_string(i);
        ex.src = {4 + i, 6, kEos};
        ex.tgt = std::vector<int>{kBos, 4 + i, 6, kEos};
        val.push_back(std::move(ex));
    }

    auto run = [&](const fs::path& dir) {
        ModelParams p = init;
        TrainOptions opt;
        opt.seed = 11;
        opt.steps = 20;
        opt.batch_size = 4;
        opt.warmup = 10;
        opt.init_lr = 2.0;
        opt.eval_interval = 10;
        opt.eval_max_len = 8;
        opt.out_dir = dir;
        return train(p, copy_task(), val, vocab, opt);
    };
    const fs::path d1 = temp_dir("det1"), d2 = temp_dir("det2");
    TrainResult r1 = run(d1), r2 = run(d2);
    CHECK(r1.report_text() == r2.report_text());
    CHECK(slurp(d1 / "final.mmxf") == slurp(d2 / "final.mmxf"));
    CHECK(slurp(d1 / "report.tsv") == slurp(d2 / "report.tsv"));
    CHECK(!r1.best.empty());
    // validation lines carry a BLEU value
    bool has_val = false;
    for (const auto& line : r1.lines)
        if (line.val_bleu) has_val = true;
    CHECK(has_val);
}
