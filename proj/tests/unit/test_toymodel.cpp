#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "lvlmlens/digest.hpp"
#include "lvlmlens/toymodel.hpp"

using namespace lvlmlens;
using namespace lvlmlens::testing;

namespace {

toy::ToyConfig small_config() {
    toy::ToyConfig c;
    c.d_model = 16;
    c.patch_rows = 2;
    c.patch_cols = 3;
    return c;
}

ErrorCode code_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("no error thrown");
    return ErrorCode::BadParams;
}

}  // namespace

TEST_CASE("weight digests are deterministic and seed dependent") {
    toy::ToyConfig a;
    a.seed = 7;
    toy::ToyConfig b = a;
    b.seed = 8;
    CHECK(toy::ToyModel::init(a).weight_digest() == toy::ToyModel::init(a).weight_digest());
    CHECK(toy::ToyModel::init(a).weight_digest() != toy::ToyModel::init(b).weight_digest());
}

TEST_CASE("invalid configs are rejected") {
    toy::ToyConfig c;
    c.d_model = 33;
    c.num_heads = 2;
    CHECK(code_of([&] { toy::ToyModel::init(c); }) == ErrorCode::InvalidConfig);
    c = {};
    c.num_layers = 0;
    CHECK(code_of([&] { toy::ToyModel::init(c); }) == ErrorCode::InvalidConfig);
    c = {};
    c.patch_pixels = 3;  // not a multiple of feature_blocks=2
    CHECK(code_of([&] { toy::ToyModel::init(c); }) == ErrorCode::InvalidConfig);
}

TEST_CASE("empty prompt over 16 patches") {
    toy::ToyConfig c;
    const auto model = toy::ToyModel::init(c);
    const auto rec = toy::run_forward(model, {}, toy::SyntheticImage::generate(c, 1));
    CHECK(rec.seq_len() == 16);
    CHECK(rec.logits.rows() == 16);
    CHECK(rec.logits.cols() == 64);
}

TEST_CASE("attention rows are causal and stochastic") {
    const auto c = small_config();
    const auto model = toy::ToyModel::init(c);
    const std::vector<int> tokens{3, 9, 40};
    const auto rec = toy::run_forward(model, tokens, toy::SyntheticImage::generate(c, 2));
    const int S = rec.seq_len();
    double worst = 0.0;
    for (int l = 0; l < c.num_layers; ++l)
        for (int h = 0; h < c.num_heads; ++h)
            for (int i = 0; i < S; ++i) {
                double s = 0.0;
                for (int j = 0; j < S; ++j) {
                    if (j > i) CHECK(rec.attention(l, h, i, j) == 0.0);
                    s += rec.attention(l, h, i, j);
                }
                worst = std::max(worst, std::abs(s - 1.0));
            }
    CHECK(worst <= 1e-12);
}

TEST_CASE("logits match the committed golden file") {
    const auto golden = nlohmann::json::parse(slurp(fixture("golden_logits_seed7.json")));
    const auto config = default_toy_config(7);
    const auto model = toy::ToyModel::init(config);
    CHECK(golden["weight_digest"] == model.weight_digest());
    const auto ids = golden["token_ids"].get<std::vector<int>>();
    const auto rec = toy::run_forward(model, ids, toy::SyntheticImage::generate(config, 7));
    const auto expected = golden["values"].get<std::vector<double>>();
    REQUIRE(expected.size() == rec.logits.values().size());
    double worst = 0.0;
    for (std::size_t i = 0; i < expected.size(); ++i)
        worst = std::max(worst, std::abs(expected[i] - rec.logits.values()[i]));
    CHECK(worst <= 1e-12);
}

TEST_CASE("vocabulary overflow") {
    const auto c = small_config();
    const auto model = toy::ToyModel::init(c);
    const std::vector<int> tokens{64};
    CHECK(code_of([&] { toy::run_forward(model, tokens, toy::SyntheticImage::generate(c, 1)); }) ==
          ErrorCode::VocabOverflow);
}

TEST_CASE("greedy generation") {
    const auto c = small_config();
    const auto model = toy::ToyModel::init(c);
    const auto image = toy::SyntheticImage::generate(c, 4);
    const std::vector<int> prompt{3, 9};

    const auto one = toy::generate_greedy(model, prompt, image, 1);
    CHECK(one.generated.size() == 1);
    CHECK(one.replay.seq_len() == 6 + 2 + 1);

    const auto a = toy::generate_greedy(model, prompt, image, 3);
    const auto b = toy::generate_greedy(model, prompt, image, 3);
    CHECK(a.generated == b.generated);
    CHECK(a.generated_indices() == std::vector<int>{8, 9, 10});

    // Each emitted token is the argmax of the previous row, lowest id on ties.
    for (int g : a.generated_indices()) {
        const auto row = a.replay.logits.row(g - 1);
        const auto best = std::max_element(row.begin(), row.end()) - row.begin();
        CHECK(a.token_at(g) == best);
    }
    CHECK(code_of([&] { (void)a.token_at(7); }) == ErrorCode::NotAGeneratedToken);

    // Causality: prompt positions of the replay match a prompt-only pass.
    const auto direct = toy::run_forward(model, prompt, image);
    double worst = 0.0;
    for (int l = 0; l < c.num_layers; ++l)
        for (int h = 0; h < c.num_heads; ++h)
            for (int i = 0; i < direct.seq_len(); ++i)
                for (int j = 0; j <= i; ++j)
                    worst = std::max(worst, std::abs(direct.attention(l, h, i, j) - a.replay.attention(l, h, i, j)));
    CHECK(worst <= 1e-12);
}

TEST_CASE("gradients: mask and finite differences") {
    const auto c = small_config();
    const auto model = toy::ToyModel::init(c);
    const auto image = toy::SyntheticImage::generate(c, 5);
    const std::vector<int> prompt{3, 9};
    const auto rec = toy::generate_greedy(model, prompt, image, 2);
    std::vector<int> seq = prompt;
    seq.insert(seq.end(), rec.generated.begin(), rec.generated.end());
    const int S = rec.replay.seq_len();

    const int g = rec.generated_indices().back();
    const auto grads = toy::attention_gradients(model, rec, g);
    const int emitted = rec.token_at(g);
    double worst = 0.0;
    int checked = 0;
    for (int l = 0; l < c.num_layers; ++l)
        for (int h = 0; h < c.num_heads; ++h)
            for (int i = 0; i < S; ++i)
                for (int j = 0; j < S; ++j) {
                    if (j > i) {
                        CHECK(grads(l, h, i, j) == 0.0);
                        continue;
                    }
                    if ((i + j) % 3 != 0) continue;
                    const double eps = 1e-5;
                    const auto up = toy::run_forward(model, seq, image, toy::AttentionPerturbation{l, h, i, j, eps});
                    const auto dn = toy::run_forward(model, seq, image, toy::AttentionPerturbation{l, h, i, j, -eps});
                    const double fd = (up.logits(g - 1, emitted) - dn.logits(g - 1, emitted)) / (2 * eps);
                    const double diff = std::abs(grads(l, h, i, j) - fd);
                    worst = std::max(worst, std::abs(fd) < 1e-10 ? diff : diff / std::abs(fd));
                    ++checked;
                }
    CHECK(checked > 50);
    CHECK(worst <= 1e-6);
    // Rows after the query cannot influence its logit.
    for (int i = g; i < S; ++i)
        for (int j = 0; j <= i; ++j) CHECK(grads(1, 0, i, j) == 0.0);
}

TEST_CASE("frozen value branch has zero gradient") {
    const auto c = small_config();
    auto model = toy::ToyModel::init(c);
    const int dh = c.d_model / c.num_heads;
    auto& wv = model.mutable_weights().layers[1].wv;
    for (int r = 0; r < c.d_model; ++r)
        for (int k = dh; k < 2 * dh; ++k) wv(r, k) = 0.0;
    const auto image = toy::SyntheticImage::generate(c, 6);
    const std::vector<int> prompt{3, 9};
    const auto rec = toy::generate_greedy(model, prompt, image, 2);
    const int S = rec.replay.seq_len();
    for (int g : rec.generated_indices()) {
        const auto grads = toy::attention_gradients(model, rec, g);
        double frozen = 0.0, live = 0.0;
        for (int i = 0; i < S; ++i)
            for (int j = 0; j < S; ++j) {
                frozen = std::max(frozen, std::abs(grads(1, 1, i, j)));
                live = std::max(live, std::abs(grads(1, 0, i, j)));
            }
        CHECK(frozen == 0.0);
        CHECK(live > 0.0);
    }
}

TEST_CASE("patch features are per-block RGB means") {
    toy::ToyConfig c;
    const auto image = toy::SyntheticImage::generate(c, 9);
    const int fb = c.feature_blocks;
    const int block = c.patch_pixels / fb;
    for (int r = 0; r < c.patch_rows; ++r)
        for (int col = 0; col < c.patch_cols; ++col) {
            const auto f = image.feature(r * c.patch_cols + col);
            for (int br = 0; br < fb; ++br)
                for (int bc = 0; bc < fb; ++bc)
                    for (int ch = 0; ch < 3; ++ch) {
                        int sum = 0;
                        for (int y = 0; y < block; ++y)
                            for (int x = 0; x < block; ++x)
                                sum += image.pixels.at(col * c.patch_pixels + bc * block + x,
                                                       r * c.patch_pixels + br * block + y)[ch];
                        CHECK(f[(br * fb + bc) * 3 + ch] == static_cast<double>(sum) / (block * block) / 255.0);
                    }
        }
}

TEST_CASE("masking replaces features with the dataset mean") {
    toy::ToyConfig c;
    const auto image = toy::SyntheticImage::generate(c, 9);
    const std::vector<int> patches{2, 5};
    const auto masked = image.with_masked_patches(patches);
    const auto mean = image.mean_feature();
    for (int p = 0; p < image.num_patches(); ++p) {
        const auto got = masked.feature(p);
        const auto want = (p == 2 || p == 5) ? std::span<const double>(mean) : image.feature(p);
        CHECK(std::equal(got.begin(), got.end(), want.begin()));
    }
    CHECK(masked.pixels.pixels == image.pixels.pixels);
}

TEST_CASE("pipeline output validates and is reproducible") {
    TempDir tmp;
    const auto t = default_toy_trace(7);
    CHECK(t.model_id == "toy-v1-seed7");
    CHECK(trace::validate(t).ok());
    trace::save_trace(t, tmp / "a");
    trace::save_trace(default_toy_trace(7), tmp / "b");
    CHECK(trace::validate_trace(tmp / "a").ok());
    CHECK(directory_digest(tmp / "a") == directory_digest(tmp / "b"));
}

TEST_CASE("build_trace requires one gradient per generated token") {
    const auto c = small_config();
    const auto model = toy::ToyModel::init(c);
    const auto image = toy::SyntheticImage::generate(c, 5);
    const std::vector<int> prompt{3};
    const auto rec = toy::generate_greedy(model, prompt, image, 2);
    std::map<int, toy::AttentionMaps> grads;
    grads.emplace(rec.generated_indices()[0], toy::attention_gradients(model, rec, rec.generated_indices()[0]));
    CHECK(code_of([&] { toy::build_trace(model, rec, grads, image); }) == ErrorCode::ShapeMismatch);
    grads.emplace(rec.generated_indices()[1], toy::attention_gradients(model, rec, rec.generated_indices()[1]));
    CHECK(trace::validate(toy::build_trace(model, rec, grads, image)).ok());
}
