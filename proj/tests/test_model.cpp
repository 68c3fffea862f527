#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "mmx/model.hpp"
#include "oracles.hpp"

using namespace mmx;

namespace {

ModelConfig small_config(bool multimodal) {
    ModelConfig c;
    c.n_layers = 2;
    c.d = 16;
    c.d_ff = 24;
    c.h = 2;
    c.vocab_size = 12;
    c.max_len = 16;
    c.image_positions = 3;
    c.image_dim = 5;
    c.pooled_dim = 5;
    c.imag_hidden = 6;
    c.multimodal = multimodal;
    c.dropout = 0.0;
    return c;
}

ImageFeatures random_image(const ModelConfig& c, Rng& rng) {
    ImageFeatures img;
    img.positions = c.image_positions;
    img.dim = c.image_dim;
    img.grid = oracle::random_values(rng, c.image_positions * c.image_dim);
    img.pooled = oracle::random_values(rng, c.pooled_dim, 0.1, 1.0);
    return img;
}

}  // namespace

TEST_CASE("zero-layer encoder returns scaled embeddings plus positions") {
    ModelConfig c = small_config(false);
    c.n_layers = 0;
    Rng rng(1);
    ModelParams p = ModelParams::init(c, rng);
    Tape tape;
    ParamIds ids = load_params(tape, p);
    const std::vector<int> src = {4, 5, 6};
    TensorId enc = encode(tape, src, ids);

    const auto pos = sinusoidal_positions(src.size(), c.d);
    for (std::size_t i = 0; i < src.size(); ++i)
        for (std::size_t j = 0; j < c.d; ++j) {
            const double expect = p.embedding[static_cast<std::size_t>(src[i]) * c.d + j] * std::sqrt(double(c.d)) +
                                  pos[i * c.d + j];
            CHECK(tape[enc].at(i, j) == doctest::Approx(expect).epsilon(1e-15));
        }
}

TEST_CASE("encoder output is finite with bounded rows and passes grad check") {
    ModelConfig c = small_config(false);
    c.n_layers = 1;
    c.d = 8;
    c.d_ff = 12;
    Rng rng(2);
    ModelParams p = ModelParams::init(c, rng);
    {
        Tape tape;
        ParamIds ids = load_params(tape, p);
        TensorId enc = encode(tape, {1, 4, 5, 6, 7}, ids);
        for (double v : tape[enc].data) CHECK(std::isfinite(v));
        for (std::size_t i = 0; i < 5; ++i) {
            double norm = 0.0;
            for (std::size_t j = 0; j < c.d; ++j) norm += tape[enc].at(i, j) * tape[enc].at(i, j);
            CHECK(std::sqrt(norm) < 100.0);
        }
    }
    // gradients through the full encoder stack; the probe loss is kept O(1)
    // so finite-difference noise stays well under the tolerance
    auto build = [&](Tape& t, const std::vector<TensorId>& leaf_ids) {
        ParamIds ids = param_ids_from_leaves(c, leaf_ids);
        TensorId enc = encode(t, {1, 4, 5, 6, 7}, ids);
        return t.scale(t.sum_all(t.mul(enc, enc)), 1.0 / 40.0);
    };
    CHECK(grad_check(named_params(p), build).passed(1e-4));

    SUBCASE("single token self-attention is well formed") {
        Tape tape;
        ParamIds ids = load_params(tape, p);
        TensorId enc = encode(tape, {4}, ids);
        CHECK(tape[enc].shape == Shape{1, c.d});
    }
    SUBCASE("out-of-range token id is a vocabulary error") {
        Tape tape;
        ParamIds ids = load_params(tape, p);
        CHECK_THROWS_AS(encode(tape, {static_cast<int>(c.vocab_size)}, ids), VocabError);
    }
    SUBCASE("sequences beyond max_len are rejected") {
        Tape tape;
        ParamIds ids = load_params(tape, p);
        std::vector<int> long_src(c.max_len + 1, 4);
        CHECK_THROWS_AS(encode(tape, long_src, ids), ContractError);
    }
}

TEST_CASE("textual decode: logits shape and tied-embedding lookup at zero layers") {
    ModelConfig c = small_config(false);
    c.n_layers = 0;
    c.d = c.vocab_size;  // allows one-hot embedding rows
    Rng rng(3);
    ModelParams p = ModelParams::init(c, rng);
    std::fill(p.embedding.begin(), p.embedding.end(), 0.0);
    for (std::size_t t = 0; t < c.vocab_size; ++t) p.embedding[t * c.d + t] = 1.0;

    Tape tape;
    ParamIds ids = load_params(tape, p);
    TensorId enc = encode(tape, {4, 5}, ids);
    const std::vector<int> prefix = {kBos, 7, 9};
    const std::vector<double> logits = decode_step_textual(tape, prefix, enc, ids);
    CHECK(logits.size() == c.vocab_size);

    // with no layers the last state is the embedded prefix row; logits are
    // its dot products with every embedding row
    const auto pos = sinusoidal_positions(prefix.size(), c.d);
    std::vector<double> state(c.d);
    for (std::size_t j = 0; j < c.d; ++j)
        state[j] = p.embedding[9 * c.d + j] * std::sqrt(double(c.d)) + pos[2 * c.d + j];
    for (std::size_t t = 0; t < c.vocab_size; ++t) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c.d; ++j) dot += state[j] * p.embedding[t * c.d + j];
        CHECK(logits[t] == doctest::Approx(dot).epsilon(1e-12));
    }
}

TEST_CASE("future positions never leak into earlier decoder states") {
    ModelConfig c = small_config(false);
    Rng rng(5);
    ModelParams p = ModelParams::init(c, rng);
    std::vector<int> prefix1 = {kBos, 4, 5, 6, 7};
    std::vector<int> prefix2 = {kBos, 4, 5, 11, 10};  // positions 3, 4 changed

    auto logits_rows = [&](const std::vector<int>& prefix) {
        Tape tape;
        ParamIds ids = load_params(tape, p);
        TensorId enc = encode(tape, {4, 5, 6}, ids);
        TensorId states = decoder_states(tape, prefix, enc, ids, std::nullopt);
        return tape[decoder_logits(tape, states, ids)].data;
    };
    const auto l1 = logits_rows(prefix1), l2 = logits_rows(prefix2);
    for (std::size_t i = 0; i < 3; ++i)  // rows before the first change
        for (std::size_t t = 0; t < c.vocab_size; ++t) CHECK(l1[i * c.vocab_size + t] == l2[i * c.vocab_size + t]);
}

TEST_CASE("multimodal decode matches the explicit visual context oracle") {
    ModelConfig c = small_config(true);
    Rng rng(7);
    ModelParams p = ModelParams::init(c, rng);
    ImageFeatures img = random_image(c, rng);

    for (std::size_t positions : {std::size_t(1), c.image_positions}) {
        ImageFeatures im = img;
        if (positions == 1) {
            im.positions = 1;
            im.grid.resize(c.image_dim);
        }
        ModelConfig cc = c;
        cc.image_positions = positions;
        ModelParams pp = p;
        pp.config = cc;

        Tape tape;
        ParamIds ids = load_params(tape, pp);
        TensorId enc = encode(tape, {4, 5, 6, 7}, ids);
        std::vector<DecoderLayerTrace> traces;
        decode_step_multimodal(tape, {kBos, 8, 9}, enc, im, ids, &traces);
        REQUIRE(traces.size() == c.n_layers);

        // keys/values: grid projected into the model dimension
        const auto kv = oracle::matmul(im.grid, pp.image_projection, positions, c.image_dim, c.d);
        for (std::size_t l = 0; l < traces.size(); ++l) {
            REQUIRE(traces[l].c_img);
            const auto expect =
                oracle::multi_head(traces[l].c_txt, kv, kv, 3, positions, *pp.dec[l].cross_img, c.scale_mode);
            CHECK(oracle::max_abs_diff(*traces[l].c_img, expect) <= 1e-12);
        }
    }
}

TEST_CASE("zeroed visual output projections reduce to the textual decoder") {
    ModelConfig mm = small_config(true);
    Rng rng(9);
    ModelParams p_mm = ModelParams::init(mm, rng);
    for (auto& layer : p_mm.dec)
        for (auto& w : layer.cross_img->w_o) std::fill(w.begin(), w.end(), 0.0);

    ModelConfig tx = mm;
    tx.multimodal = false;
    Rng rng2(9999);
    ModelParams p_tx = ModelParams::init(tx, rng2);
    p_tx.embedding = p_mm.embedding;
    for (std::size_t l = 0; l < mm.n_layers; ++l) {
        p_tx.enc[l] = p_mm.enc[l];
        p_tx.dec[l].self_attn = p_mm.dec[l].self_attn;
        p_tx.dec[l].cross_txt = p_mm.dec[l].cross_txt;
        p_tx.dec[l].ffn = p_mm.dec[l].ffn;
        p_tx.dec[l].ln_self = p_mm.dec[l].ln_self;
        p_tx.dec[l].ln_txt = p_mm.dec[l].ln_txt;
        p_tx.dec[l].ln_ffn = p_mm.dec[l].ln_ffn;
        p_tx.dec[l].cross_img.reset();
        p_tx.dec[l].ln_img.reset();
    }
    p_tx.imag_w1 = p_mm.imag_w1;
    p_tx.imag_w2 = p_mm.imag_w2;

    ImageFeatures img = random_image(mm, rng);
    const std::vector<int> src = {4, 5, 6}, prefix = {kBos, 7, 8, 9};

    Tape t1;
    ParamIds ids1 = load_params(t1, p_mm);
    auto logits_mm = decode_step_multimodal(t1, prefix, encode(t1, src, ids1), img, ids1);
    Tape t2;
    ParamIds ids2 = load_params(t2, p_tx);
    auto logits_tx = decode_step_textual(t2, prefix, encode(t2, src, ids2), ids2);
    CHECK(oracle::max_abs_diff(logits_mm, logits_tx) <= 1e-10);
}

TEST_CASE("imagine follows the regressor formula") {
    ModelConfig c = small_config(false);
    Rng rng(11);
    ModelParams p = ModelParams::init(c, rng);

    SUBCASE("zero first layer gives the zero vector") {
        ModelParams pz = p;
        std::fill(pz.imag_w1.begin(), pz.imag_w1.end(), 0.0);
        Tape tape;
        ParamIds ids = load_params(tape, pz);
        TensorId y = imagine(tape, encode(tape, {4, 5, 6}, ids), ids);
        for (double v : tape[y].data) CHECK(v == 0.0);
    }

    SUBCASE("sum pooling doubles when states are duplicated, mean does not") {
        std::vector<double> states = oracle::random_values(rng, 2 * c.d, 0.1, 1.0);
        std::vector<double> doubled = states;
        doubled.insert(doubled.end(), states.begin(), states.end());

        auto y_of = [&](const std::vector<double>& s, std::size_t rows, ImagPool pool) {
            ModelParams local = p;
            local.config.imag_pool = pool;
            Tape tape;
            ParamIds ids = load_params(tape, local);
            TensorId st = tape.leaf({rows, c.d}, s, false);
            return tape[imagine(tape, st, ids)].data;
        };
        const auto y_sum = y_of(states, 2, ImagPool::sum);
        const auto y_sum_dup = y_of(doubled, 4, ImagPool::sum);
        CHECK(oracle::max_abs_diff(y_sum, y_sum_dup) > 1e-6);  // sum semantics reacts to duplication

        const auto y_mean = y_of(states, 2, ImagPool::mean);
        const auto y_mean_dup = y_of(doubled, 4, ImagPool::mean);
        CHECK(oracle::max_abs_diff(y_mean, y_mean_dup) <= 1e-12);  // a mean-pooling mutant does not
    }

    SUBCASE("matches two explicit matrix products with a ReLU between") {
        std::vector<double> states = oracle::random_values(rng, 3 * c.d);
        Tape tape;
        ParamIds ids = load_params(tape, p);
        TensorId st = tape.leaf({3, c.d}, states, false);
        const auto got = tape[imagine(tape, st, ids)].data;

        std::vector<double> pooled(c.d, 0.0);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < c.d; ++j) pooled[j] += states[i * c.d + j];
        auto hidden = oracle::matmul(pooled, p.imag_w1, 1, c.d, c.imag_hidden);
        for (double& h : hidden) h = std::max(0.0, h);
        const auto expect = oracle::matmul(hidden, p.imag_w2, 1, c.imag_hidden, c.pooled_dim);
        CHECK(oracle::max_abs_diff(got, expect) <= 1e-12);
    }
}

TEST_CASE("imagination loss oracle table") {
    Tape tape;
    // d(y_hat, y) = 0, d(y_hat, y_c) = 0.5, margin satisfied -> 0
    TensorId y_hat = tape.leaf({2}, {1.0, 0.0});
    TensorId y_same = tape.leaf({2}, {2.0, 0.0});  // same direction, distance 0
    TensorId y_half = tape.leaf({2}, {0.5, std::sqrt(3.0) / 2.0});  // cos = 0.5 -> distance 0.5
    CHECK(tape.value(imagination_loss(tape, y_hat, y_same, y_half, 0.1)) == 0.0);

    // y_c == y -> the distances cancel and the loss is exactly alpha
    CHECK(tape.value(imagination_loss(tape, y_hat, y_half, y_half, 0.1)) == doctest::Approx(0.1).epsilon(1e-15));

    // alpha = 0.1, d(y_hat,y) = 0.7, d(y_hat,y_c) = 0.4 -> 0.4
    TensorId y_07 = tape.leaf({2}, {0.3, std::sqrt(1.0 - 0.09)});
    TensorId y_04 = tape.leaf({2}, {0.6, 0.8});
    CHECK(tape.value(imagination_loss(tape, y_hat, y_07, y_04, 0.1)) == doctest::Approx(0.4).epsilon(1e-12));
}

TEST_CASE("imagination loss stays within [0, alpha + 2]") {
    Rng rng(13);
    const double alpha = 0.1;
    for (int i = 0; i < 2000; ++i) {
        Tape tape;
        TensorId a = tape.leaf({4}, oracle::random_values(rng, 4, -2.0, 2.0));
        TensorId b = tape.leaf({4}, oracle::random_values(rng, 4, -2.0, 2.0));
        TensorId c = tape.leaf({4}, oracle::random_values(rng, 4, -2.0, 2.0));
        double norm = 0.0;
        for (double v : tape[a].data) norm += v * v;
        if (norm == 0.0) continue;
        const double loss = tape.value(imagination_loss(tape, a, b, c, alpha));
        CHECK(loss >= 0.0);
        CHECK(loss <= alpha + 2.0);
    }
}

TEST_CASE("translation loss trivials and loop oracle") {
    Tape tape;
    TensorId uniform = tape.leaf({1, 4}, {0, 0, 0, 0});
    CHECK(tape.value(translation_loss(tape, uniform, {2})) == doctest::Approx(std::log(4.0)).epsilon(1e-12));

    TensorId onehot = tape.leaf({2, 4}, {0, 50, 0, 0, 0, 0, 50, 0});
    CHECK(tape.value(translation_loss(tape, onehot, {1, 2})) < 1e-12);

    Rng rng(15);
    std::vector<double> logits = oracle::random_values(rng, 3 * 5);
    std::vector<int> targets = {1, 4, 0};
    Tape t2;
    const double got = t2.value(translation_loss(t2, t2.leaf({3, 5}, logits), targets));
    double expect = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
        double z = 0.0;
        for (std::size_t j = 0; j < 5; ++j) z += std::exp(logits[i * 5 + j]);
        expect += std::log(z) - logits[i * 5 + static_cast<std::size_t>(targets[i])];
    }
    expect /= 3.0;
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("joint loss respects missing modalities") {
    ModelConfig c = small_config(false);
    Rng rng(17);
    ModelParams p = ModelParams::init(c, rng);

    SUBCASE("image-less batch: zero imagination part and zero regressor gradients") {
        Batch batch;
        batch.push_back({"a", {4, 5, kEos}, std::vector<int>{kBos, 6, kEos}, std::nullopt});
        batch.push_back({"b", {5, 6, kEos}, std::vector<int>{kBos, 7, kEos}, std::nullopt});
        Tape tape;
        std::vector<TensorId> flat;
        ParamIds ids = load_params_flat(tape, p, true, &flat);
        Rng contrastive(1);
        JointLossParts parts = joint_loss(tape, batch, ids, &contrastive);
        CHECK(parts.imagination == 0.0);
        CHECK(parts.n_imagination == 0);
        tape.backward(parts.total);
        for (double g : tape.grad(ids.imag_w1)) CHECK(g == 0.0);
        for (double g : tape.grad(ids.imag_w2)) CHECK(g == 0.0);
    }

    SUBCASE("target-less batch: zero translation part, encoder still learns") {
        ImageFeatures img1 = random_image(c, rng), img2 = random_image(c, rng);
        Batch batch;
        batch.push_back({"a", {4, 5, kEos}, std::nullopt, img1});
        batch.push_back({"b", {5, 6, kEos}, std::nullopt, img2});
        Tape tape;
        ParamIds ids = load_params_flat(tape, p, true, nullptr);
        Rng contrastive(1);
        JointLossParts parts = joint_loss(tape, batch, ids, &contrastive);
        CHECK(parts.translation == 0.0);
        CHECK(parts.n_translation == 0);
        CHECK(parts.n_imagination == 2);
        tape.backward(parts.total);
        // encoder self-attention receives imagination gradients
        double enc_grad = 0.0;
        for (double g : tape.grad(ids.enc[0].self_attn.w_q[0])) enc_grad += std::fabs(g);
        CHECK(enc_grad > 0.0);
        // decoder parameters see nothing
        for (double g : tape.grad(ids.dec[0].cross_txt.w_q[0])) CHECK(g == 0.0);
    }

    SUBCASE("mixed batch equals the sum of individually computed losses") {
        ImageFeatures img1 = random_image(c, rng), img2 = random_image(c, rng);
        Batch batch;
        batch.push_back({"a", {4, 5, kEos}, std::vector<int>{kBos, 6, 7, kEos}, img1});
        batch.push_back({"b", {5, 6, 7, kEos}, std::nullopt, img2});
        Tape tape;
        ParamIds ids = load_params_flat(tape, p, false, nullptr);
        Rng contrastive(1);
        JointLossParts parts = joint_loss(tape, batch, ids, &contrastive);
        const double total = tape.value(parts.total);

        // per-example oracle with the same deterministic contrastive picks:
        // each example has exactly one candidate, the other one
        Tape t2;
        ParamIds ids2 = load_params(t2, p);
        TensorId enc_a = encode(t2, batch[0].src, ids2);
        TensorId states = decoder_states(t2, {kBos, 6, 7}, enc_a, ids2, std::nullopt);
        const double trans_a = t2.value(translation_loss(t2, decoder_logits(t2, states, ids2), {6, 7, kEos}));
        TensorId y_hat_a = imagine(t2, enc_a, ids2);
        const double imag_a = t2.value(imagination_loss(t2, y_hat_a, t2.leaf({5}, img1.pooled),
                                                        t2.leaf({5}, img2.pooled), c.margin_alpha));
        TensorId enc_b = encode(t2, batch[1].src, ids2);
        TensorId y_hat_b = imagine(t2, enc_b, ids2);
        const double imag_b = t2.value(imagination_loss(t2, y_hat_b, t2.leaf({5}, img2.pooled),
                                                        t2.leaf({5}, img1.pooled), c.margin_alpha));
        CHECK(total == doctest::Approx(trans_a + imag_a + imag_b).epsilon(1e-12));
        CHECK(parts.translation == doctest::Approx(trans_a).epsilon(1e-12));
        CHECK(parts.imagination == doctest::Approx(imag_a + imag_b).epsilon(1e-12));
    }

    SUBCASE("single image in batch has no contrastive candidate and is skipped") {
        ImageFeatures img1 = random_image(c, rng);
        Batch batch;
        batch.push_back({"a", {4, 5, kEos}, std::vector<int>{kBos, 6, kEos}, img1});
        Tape tape;
        ParamIds ids = load_params(tape, p);
        Rng contrastive(1);
        JointLossParts parts = joint_loss(tape, batch, ids, &contrastive);
        CHECK(parts.n_imagination == 0);
        CHECK(parts.n_translation == 1);
    }

    SUBCASE("batch with no usable objective is rejected") {
        Batch batch;
        batch.push_back({"a", {4, kEos}, std::nullopt, std::nullopt});
        Tape tape;
        ParamIds ids = load_params(tape, p);
        Rng contrastive(1);
        CHECK_THROWS_AS(joint_loss(tape, batch, ids, &contrastive), ContractError);
    }
}

TEST_CASE("weight tying: one storage serves embedding and output projection") {
    ModelConfig c = small_config(false);
    c.n_layers = 1;
    Rng rng(19);
    ModelParams p = ModelParams::init(c, rng);
    const std::vector<int> src = {4, kEos};
    const std::vector<int> prefix = {kBos, 5};

    auto run = [&](const ModelParams& params) {
        Tape tape;
        ParamIds ids = load_params(tape, params);
        TensorId enc = encode(tape, src, ids);
        return std::make_pair(tape[enc].data, decode_step_textual(tape, prefix, enc, ids));
    };
    const auto [enc_before, logits_before] = run(p);

    ModelParams mutated = p;
    for (std::size_t j = 0; j < c.d; ++j) mutated.embedding[4 * c.d + j] += 0.25;  // token 4: source side
    const auto [enc_after, logits_after] = run(mutated);
    CHECK(oracle::max_abs_diff(enc_before, enc_after) > 1e-6);   // encoding of token 4 moved
    CHECK(std::fabs(logits_before[4] - logits_after[4]) > 1e-9);  // and so did logit column 4
}

TEST_CASE("param leaf order matches the visit order") {
    ModelConfig c = small_config(true);
    Rng rng(21);
    ModelParams p = ModelParams::init(c, rng);
    Tape tape;
    std::vector<TensorId> flat;
    load_params_flat(tape, p, false, &flat);
    std::vector<std::pair<std::string, Shape>> visited;
    p.visit([&](const std::string& name, const Shape& shape, std::vector<double>&) { visited.push_back({name, shape}); });
    REQUIRE(flat.size() == visited.size());
    for (std::size_t i = 0; i < flat.size(); ++i) CHECK(tape[flat[i]].shape == visited[i].second);
}

TEST_CASE("model config validation") {
    ModelConfig c = small_config(false);
    c.h = 3;  // 16 % 3 != 0
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_config(false);
    c.margin_alpha = -0.1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_config(false);
    c.vocab_size = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}
