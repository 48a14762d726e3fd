#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "lvlmlens/relevancy.hpp"
#include "scenarios.hpp"

using namespace lvlmlens;
using namespace lvlmlens::testing;

namespace {

using Dense = std::vector<std::vector<double>>;

// Straight-line restatement of the propagation rule.
Dense naive_relevancy(const trace::Trace& t, int g) {
    const int S = t.seq_len;
    Dense r(S, std::vector<double>(S, 0.0));
    for (int i = 0; i < S; ++i) r[i][i] = 1.0;
    const auto& grad = t.gradients.at(g);
    for (int l = 0; l < t.num_layers; ++l) {
        Dense a(S, std::vector<double>(S, 0.0));
        for (int h = 0; h < t.num_heads; ++h)
            for (int i = 0; i < S; ++i)
                for (int j = 0; j < S; ++j) {
                    const double v = static_cast<double>(grad(l, h, i, j)) * static_cast<double>(t.attention(l, h, i, j));
                    a[i][j] += std::max(0.0, v) / t.num_heads;
                }
        Dense next = r;
        for (int i = 0; i < S; ++i)
            for (int j = 0; j < S; ++j) {
                double s = 0.0;
                for (int k = 0; k < S; ++k) s += a[i][k] * r[k][j];
                next[i][j] += s;
            }
        r = std::move(next);
    }
    return r;
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

trace::Trace zero_gradient_trace() {
    toy::ToyConfig c;
    c.d_model = 8;
    c.patch_rows = c.patch_cols = 2;
    const auto model = toy::ToyModel::init(c);
    const std::vector<int> prompt{4, 5};
    auto t = toy::toy_pipeline(model, prompt, toy::SyntheticImage::generate(c, 3), 2);
    for (auto& [g, grad] : t.gradients) std::fill(grad.values().begin(), grad.values().end(), 0.0f);
    return t;
}

}  // namespace

TEST_CASE("engine agrees with a naive reimplementation") {
    const auto t = trace::load_trace(fixture("toy_seed7"));
    for (int g : t.generated_indices) {
        const auto r = relevancy::compute_relevancy(t, g);
        CHECK(r.generated == g);
        CHECK(r.query == g - 1);
        const auto want = naive_relevancy(t, g);
        double worst = 0.0;
        for (int i = 0; i < t.seq_len; ++i)
            for (int j = 0; j < t.seq_len; ++j) worst = std::max(worst, std::abs(r.values(i, j) - want[i][j]));
        CHECK(worst <= 1e-12);
    }
}

TEST_CASE("relevancy is at least the identity and grows layer by layer") {
    const auto t = trace::load_trace(fixture("toy_seed7"));
    const int g = t.generated_indices.back();
    const auto first = relevancy::compute_relevancy(t, g, {0, 1});
    const auto full = relevancy::compute_relevancy(t, g);
    for (int i = 0; i < t.seq_len; ++i)
        for (int j = 0; j < t.seq_len; ++j) {
            CHECK(first.values(i, j) >= (i == j ? 1.0 : 0.0));
            CHECK(full.values(i, j) >= first.values(i, j));
        }
}

TEST_CASE("zero gradients leave the identity") {
    const auto t = zero_gradient_trace();
    for (int g : t.generated_indices) {
        const auto r = relevancy::compute_relevancy(t, g);
        CHECK(r.values == Matrix::identity(static_cast<std::size_t>(t.seq_len)));
        const auto grid = relevancy::image_relevancy_grid(r, t);
        CHECK(grid.values == std::vector<double>(4, 0.0));
        const auto split = relevancy::modality_relevancy_split(r, t);
        CHECK(split.image_mean == 0.0);
        CHECK(split.text_mean == 0.0);
    }
}

TEST_CASE("single layer single head closed form") {
    toy::ToyConfig c;
    c.d_model = 8;
    c.num_layers = 1;
    c.num_heads = 1;
    c.patch_rows = c.patch_cols = 2;
    const auto model = toy::ToyModel::init(c);
    const std::vector<int> prompt{4, 5, 6};
    const auto t = toy::toy_pipeline(model, prompt, toy::SyntheticImage::generate(c, 3), 2);
    for (int g : t.generated_indices) {
        const auto r = relevancy::compute_relevancy(t, g);
        const int q = g - 1;
        for (int j = 0; j < t.seq_len; ++j) {
            const double expected = std::max(0.0, static_cast<double>(t.gradients.at(g)(0, 0, q, j)) *
                                                      static_cast<double>(t.attention(0, 0, q, j)));
            CHECK(r.values(q, j) == expected + (j == q ? 1.0 : 0.0));
        }
    }
}

TEST_CASE("gradient scaling on a single layer scales R - I and keeps the grid") {
    toy::ToyConfig c;
    c.d_model = 8;
    c.num_layers = 1;
    c.patch_rows = c.patch_cols = 2;
    const auto model = toy::ToyModel::init(c);
    const std::vector<int> prompt{4, 5};
    const auto t = toy::toy_pipeline(model, prompt, toy::SyntheticImage::generate(c, 5), 1);
    auto scaled = t;
    const int g = t.generated_indices[0];
    for (float& v : scaled.gradients.at(g).values()) v *= 4.0f;
    const auto r = relevancy::compute_relevancy(t, g);
    const auto rs = relevancy::compute_relevancy(scaled, g);
    for (int i = 0; i < t.seq_len; ++i)
        for (int j = 0; j < t.seq_len; ++j) {
            const double id = i == j ? 1.0 : 0.0;
            CHECK(rs.values(i, j) - id == 4.0 * (r.values(i, j) - id));
        }
    CHECK(relevancy::image_relevancy_grid(r, t).values == relevancy::image_relevancy_grid(rs, scaled).values);
}

TEST_CASE("image grid gathers the query row") {
    const auto t = trace::load_trace(fixture("toy_seed7"));
    const auto r = relevancy::compute_relevancy(t, 19);
    const auto raw = relevancy::image_relevancy_raw(r, t);
    const auto grid = relevancy::image_relevancy_grid(r, t);
    const auto table = t.patch_token_table();
    double mx = 0.0;
    for (int p = 0; p < 16; ++p) mx = std::max(mx, r.values(18, table[p]));

    REQUIRE(mx > 0.0);
    for (int row = 0; row < 4; ++row)
        for (int col = 0; col < 4; ++col) {
            const double v = r.values(18, table[row * 4 + col]);
            CHECK(raw.at(row, col) == v);
            CHECK(grid.at(row, col) == v / mx);
        }
    CHECK(grid.normalization == Normalization::MaxNormalized);
}

TEST_CASE("single positive image entry normalizes to one") {
    auto t = zero_gradient_trace();
    auto r = relevancy::compute_relevancy(t, t.generated_indices[0]);
    r.values(r.query, 0) = 0.3;
    const auto grid = relevancy::image_relevancy_grid(r, t);
    CHECK(grid.values == std::vector<double>{1.0, 0.0, 0.0, 0.0});
    const auto split = relevancy::modality_relevancy_split(r, t);
    CHECK(split.text_mean == 0.0);
    CHECK(split.image_mean == doctest::Approx(0.3 / 4));
}

TEST_CASE("relevancy errors") {
    const auto t = trace::load_trace(fixture("toy_seed7"));
    CHECK(code_of([&] { relevancy::compute_relevancy(t, 18); }) == ErrorCode::NotAGeneratedToken);
    CHECK(code_of([&] { relevancy::compute_relevancy(t, 40); }) == ErrorCode::IndexOutOfRange);
    CHECK(code_of([&] { relevancy::compute_relevancy(t, 20, {1, 3}); }) == ErrorCode::IndexOutOfRange);
    auto missing = t;
    missing.gradients.erase(20);
    CHECK(code_of([&] { relevancy::compute_relevancy(missing, 20); }) == ErrorCode::MissingGradients);
}

TEST_CASE("text-forced scenario favours text relevance") {
    const auto s = text_forced_scenario();
    const auto t = toy::toy_pipeline(s.model, s.prompt, s.image, 1);
    REQUIRE(t.tokens[s.first_generated].text == "tok" + std::to_string(s.target));
    const auto split = relevancy::modality_relevancy_split(relevancy::compute_relevancy(t, s.first_generated), t);
    CHECK(split.image_mean == 0.0);
    CHECK(split.text_mean > split.image_mean);
}

TEST_CASE("modality split needs both modalities") {
    toy::ToyConfig c;
    c.d_model = 8;
    c.patch_rows = c.patch_cols = 2;
    const auto model = toy::ToyModel::init(c);
    const auto t = toy::toy_pipeline(model, {}, toy::SyntheticImage::generate(c, 3), 1);
    const auto r = relevancy::compute_relevancy(t, t.generated_indices[0]);
    CHECK(code_of([&] { relevancy::modality_relevancy_split(r, t); }) == ErrorCode::EmptyModality);
}

TEST_CASE("bilinear upsampling") {
    SUBCASE("constant") {
        PatchGrid g(1, 1, 0.7);
        const auto m = relevancy::upsample_bilinear(g, 5, 3);
        CHECK(m.rows() == 3);
        CHECK(m.cols() == 5);
        for (double v : m.values()) CHECK(v == 0.7);
    }
    SUBCASE("linear field follows the source coordinate") {
        PatchGrid g(3, 4);
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 4; ++c) g.at(r, c) = 2.0 * r + 3.0 * c;
        const int w = 10, h = 7;
        const auto m = relevancy::upsample_bilinear(g, w, h);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double sx = std::clamp((x + 0.5) * 4 / w - 0.5, 0.0, 3.0);
                const double sy = std::clamp((y + 0.5) * 3 / h - 0.5, 0.0, 2.0);
                CHECK(std::abs(m(y, x) - (2.0 * sy + 3.0 * sx)) <= 1e-12);
            }
    }
    SUBCASE("2x2 anti-diagonal to 4x4") {
        PatchGrid g(2, 2);
        g.at(0, 1) = 1.0;
        g.at(1, 0) = 1.0;
        const auto m = relevancy::upsample_bilinear(g, 4, 4);
        // Source coordinates 0.25 and 0.75 for the centre pixels.
        CHECK(m(1, 1) == doctest::Approx(0.375).epsilon(1e-15));
        CHECK(m(1, 2) == doctest::Approx(0.625).epsilon(1e-15));
        CHECK(m(2, 1) == doctest::Approx(0.625).epsilon(1e-15));
        CHECK(m(2, 2) == doctest::Approx(0.375).epsilon(1e-15));
        CHECK((m(1, 1) + m(1, 2) + m(2, 1) + m(2, 2)) / 4 == doctest::Approx(0.5).epsilon(1e-15));
        CHECK(m(0, 0) == 0.0);  // clamped corner
        for (double v : m.values()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
    SUBCASE("zero dimension") {
        CHECK(code_of([] { relevancy::upsample_bilinear(PatchGrid(2, 2), 0, 3); }) == ErrorCode::ZeroDimension);
        CHECK(code_of([] { relevancy::upsample_bilinear(PatchGrid(2, 2), 3, 0); }) == ErrorCode::ZeroDimension);
    }
}
