#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "atroseg/gradcheck.hpp"
#include "atroseg/layers.hpp"
#include "atroseg/ops.hpp"
#include "atroseg/rng.hpp"

using namespace atroseg;

namespace {

template <class T>
TensorPtr<T> random_tensor(Rng& rng, Shape shape, bool requires_grad = false) {
    auto t = make_tensor<T>(shape, requires_grad);
    for (T& v : t->data) v = static_cast<T>(rng.uniform(-1.0, 1.0));
    return t;
}

// Test-side oracle: direct transcription of the dilated-convolution double
// sum with explicit zero padding, independent of the library's data path.
TensorPtr<double> naive_conv2d(const TensorPtr<double>& x, const TensorPtr<double>& w,
                               const TensorPtr<double>& bias, const ConvSpec& spec) {
    const std::int64_t N = x->shape.n(), H = x->shape.h(), W = x->shape.w();
    const std::int64_t OH = spec.out_extent(H), OW = spec.out_extent(W);
    auto y = make_tensor<double>(Shape(N, spec.out_channels, OH, OW));
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t oc = 0; oc < spec.out_channels; ++oc)
            for (std::int64_t oh = 0; oh < OH; ++oh)
                for (std::int64_t ow = 0; ow < OW; ++ow) {
                    double acc = bias ? bias->at(0, oc, 0, 0) : 0.0;
                    for (std::int64_t ic = 0; ic < spec.in_channels; ++ic)
                        for (std::int64_t kh = 0; kh < spec.kernel; ++kh)
                            for (std::int64_t kw = 0; kw < spec.kernel; ++kw) {
                                const std::int64_t ih = oh * spec.stride - spec.padding + spec.rate * kh;
                                const std::int64_t iw = ow * spec.stride - spec.padding + spec.rate * kw;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += x->at(n, ic, ih, iw) * w->at(oc, ic, kh, kw);
                            }
                    y->at(n, oc, oh, ow) = acc;
                }
    return y;
}

// kernel zero-inflated to extent rate*(k-1)+1, taps rate apart
template <class T>
TensorPtr<T> inflate_kernel(const TensorPtr<T>& w, std::int64_t rate) {
    const std::int64_t OC = w->shape.n(), IC = w->shape.c(), K = w->shape.h();
    const std::int64_t KI = rate * (K - 1) + 1;
    auto out = make_tensor<T>(Shape(OC, IC, KI, KI));
    for (std::int64_t oc = 0; oc < OC; ++oc)
        for (std::int64_t ic = 0; ic < IC; ++ic)
            for (std::int64_t kh = 0; kh < K; ++kh)
                for (std::int64_t kw = 0; kw < K; ++kw)
                    out->at(oc, ic, kh * rate, kw * rate) = w->at(oc, ic, kh, kw);
    return out;
}

}  // namespace

TEST_CASE("conv2d identity through a unit 1x1 kernel") {
    Rng rng(2);
    Graph<float> g(false);
    auto x = random_tensor<float>(rng, Shape(2, 1, 5, 6));
    auto w = make_tensor<float>(Shape(1, 1, 1, 1), {1.0f});
    auto y = conv2d(g, x, w, nullptr, ConvSpec{1, 1, 1, 1, 1, 0, false});
    CHECK(y->shape == x->shape);
    CHECK(y->data == x->data);
}

TEST_CASE("conv2d counts taps: all-ones 5x5 input, 3x3 kernel, rate 2") {
    Graph<float> g(false);
    auto x = full<float>(Shape(1, 1, 5, 5), 1.0f);
    auto w = full<float>(Shape(1, 1, 3, 3), 1.0f);
    auto y = conv2d(g, x, w, nullptr, ConvSpec{1, 1, 3, 1, 2, 0, false});
    CHECK(y->shape == Shape(1, 1, 1, 1));
    CHECK(y->data[0] == 9.0f);
}

TEST_CASE("conv2d evaluates the double sum: 1..9 against all-ones kernel") {
    Graph<float> g(false);
    auto x = make_tensor<float>(Shape(1, 1, 3, 3), {1, 2, 3, 4, 5, 6, 7, 8, 9});
    auto w = full<float>(Shape(1, 1, 3, 3), 1.0f);
    auto y = conv2d(g, x, w, nullptr, ConvSpec{1, 1, 3, 1, 1, 0, false});
    CHECK(y->shape == Shape(1, 1, 1, 1));
    CHECK(y->data[0] == 45.0f);
}

TEST_CASE("conv2d contract violations") {
    Graph<float> g(false);
    auto x = full<float>(Shape(1, 2, 5, 5), 1.0f);
    auto w = full<float>(Shape(1, 1, 3, 3), 1.0f);
    SUBCASE("channel mismatch") {
        CHECK_THROWS_AS(conv2d(g, x, w, nullptr, ConvSpec{1, 1, 3, 1, 1, 0, false}),
                        std::invalid_argument);
    }
    SUBCASE("output extent below one") {
        auto w2 = full<float>(Shape(1, 2, 3, 3), 1.0f);
        CHECK_THROWS_AS(conv2d(g, x, w2, nullptr, ConvSpec{2, 1, 3, 1, 3, 0, false}),
                        std::invalid_argument);
    }
    SUBCASE("even kernel extent") {
        CHECK_THROWS_AS((ConvSpec{1, 1, 4, 1, 1, 0, false}).validate(), std::invalid_argument);
    }
}

TEST_CASE("conv2d matches the naive Eq.-style oracle on seeded random cases") {
    Rng rng(31);
    for (int trial = 0; trial < 100; ++trial) {
        ConvSpec spec;
        spec.in_channels = 1 + static_cast<std::int64_t>(rng.next_below(3));
        spec.out_channels = 1 + static_cast<std::int64_t>(rng.next_below(3));
        spec.kernel = 1 + 2 * static_cast<std::int64_t>(rng.next_below(2));  // 1 or 3
        spec.stride = 1 + static_cast<std::int64_t>(rng.next_below(2));
        spec.rate = 1 + static_cast<std::int64_t>(rng.next_below(3));
        spec.padding = static_cast<std::int64_t>(rng.next_below(4));
        spec.has_bias = rng.next_u64() & 1;
        const std::int64_t in = spec.effective_kernel() + static_cast<std::int64_t>(rng.next_below(8));
        if (spec.out_extent(in) < 1) continue;

        Graph<double> g(false);
        auto x = random_tensor<double>(rng, Shape(1 + static_cast<std::int64_t>(rng.next_below(2)),
                                                  spec.in_channels, in, in));
        auto w = random_tensor<double>(
            rng, Shape(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel));
        auto b = spec.has_bias ? random_tensor<double>(rng, Shape(1, spec.out_channels, 1, 1))
                               : TensorPtr<double>();
        auto got = conv2d(g, x, w, b, spec);
        auto want = naive_conv2d(x, w, b, spec);
        REQUIRE(got->shape == want->shape);
        double max_abs = 0.0;
        for (std::size_t i = 0; i < got->data.size(); ++i)
            max_abs = std::max(max_abs, std::abs(got->data[i] - want->data[i]));
        CHECK(max_abs < 1e-6);
    }
}

TEST_CASE("atrous convolution equals the zero-inflated standard convolution exactly") {
    Rng rng(47);
    int cases = 0;
    while (cases < 200) {
        const std::int64_t rate = 2 + static_cast<std::int64_t>(rng.next_below(2));  // 2 or 3
        ConvSpec spec;
        spec.in_channels = 1 + static_cast<std::int64_t>(rng.next_below(2));
        spec.out_channels = 1 + static_cast<std::int64_t>(rng.next_below(2));
        spec.kernel = 3;
        spec.stride = 1 + static_cast<std::int64_t>(rng.next_below(2));
        spec.rate = rate;
        spec.padding = static_cast<std::int64_t>(rng.next_below(4));
        const std::int64_t in = spec.effective_kernel() + static_cast<std::int64_t>(rng.next_below(6));
        if (spec.out_extent(in) < 1) continue;

        Graph<float> g(false);
        auto x = random_tensor<float>(rng, Shape(1, spec.in_channels, in, in));
        auto w = random_tensor<float>(rng, Shape(spec.out_channels, spec.in_channels, 3, 3));
        auto atrous = conv2d(g, x, w, nullptr, spec);

        ConvSpec inflated = spec;
        inflated.kernel = spec.effective_kernel();
        inflated.rate = 1;
        auto standard = conv2d(g, x, inflate_kernel(w, rate), nullptr, inflated);

        REQUIRE(atrous->shape == standard->shape);
        CHECK(atrous->data == standard->data);  // bit-exact
        ++cases;
    }
}

TEST_CASE("batch_norm inference with neutral parameters is the identity") {
    Rng rng(13);
    Graph<float> g(false);
    auto x = random_tensor<float>(rng, Shape(2, 3, 4, 4));
    auto gamma = full<float>(Shape(1, 3, 1, 1), 1.0f);
    auto beta = make_tensor<float>(Shape(1, 3, 1, 1));
    auto rm = make_tensor<float>(Shape(1, 3, 1, 1));
    auto rv = full<float>(Shape(1, 3, 1, 1), 1.0f);
    auto y = batch_norm(g, x, gamma, beta, rm, rv, 1e-12, 0.9, false);
    for (std::size_t i = 0; i < x->data.size(); ++i)
        CHECK(y->data[i] == doctest::Approx(x->data[i]).epsilon(1e-6));
}

TEST_CASE("batch_norm training normalizes to beta / |gamma| statistics") {
    Rng rng(17);
    Graph<float> g(false);
    const Shape shape(4, 2, 8, 8);
    auto x = make_tensor<float>(shape);
    for (float& v : x->data) v = static_cast<float>(rng.uniform(0.0, 5.0));
    auto gamma = make_tensor<float>(Shape(1, 2, 1, 1), {2.0f, -1.5f});
    auto beta = make_tensor<float>(Shape(1, 2, 1, 1), {0.25f, -0.75f});
    auto rm = make_tensor<float>(Shape(1, 2, 1, 1));
    auto rv = full<float>(Shape(1, 2, 1, 1), 1.0f);
    auto y = batch_norm(g, x, gamma, beta, rm, rv, 1e-9, 0.9, true);

    const std::int64_t plane = 64, m = 4 * plane;
    for (std::int64_t c = 0; c < 2; ++c) {
        double mean = 0.0, var = 0.0;
        for (std::int64_t n = 0; n < 4; ++n)
            for (std::int64_t i = 0; i < plane; ++i) mean += y->data[(n * 2 + c) * plane + i];
        mean /= m;
        for (std::int64_t n = 0; n < 4; ++n)
            for (std::int64_t i = 0; i < plane; ++i) {
                const double d = y->data[(n * 2 + c) * plane + i] - mean;
                var += d * d;
            }
        var /= m;
        CHECK(mean == doctest::Approx(beta->data[c]).epsilon(1e-5));
        CHECK(std::sqrt(var) == doctest::Approx(std::abs(gamma->data[c])).epsilon(1e-5));
        // running statistics blended once from zero-mean/unit-var defaults
        CHECK(rm->data[c] != 0.0f);
    }
}

TEST_CASE("batch_norm training on a constant channel returns beta everywhere") {
    Graph<float> g(false);
    auto x = full<float>(Shape(2, 1, 3, 3), 7.5f);
    auto gamma = full<float>(Shape(1, 1, 1, 1), 2.0f);
    auto beta = full<float>(Shape(1, 1, 1, 1), 0.5f);
    auto rm = make_tensor<float>(Shape(1, 1, 1, 1));
    auto rv = full<float>(Shape(1, 1, 1, 1), 1.0f);
    auto y = batch_norm(g, x, gamma, beta, rm, rv, 1e-5, 0.9, true);
    for (float v : y->data) CHECK(v == doctest::Approx(0.5f).epsilon(1e-6));
}

TEST_CASE("batch_norm training requires at least two values per channel") {
    Graph<float> g(false);
    auto x = full<float>(Shape(1, 2, 1, 1), 1.0f);
    auto gamma = full<float>(Shape(1, 2, 1, 1), 1.0f);
    auto beta = make_tensor<float>(Shape(1, 2, 1, 1));
    auto rm = make_tensor<float>(Shape(1, 2, 1, 1));
    auto rv = full<float>(Shape(1, 2, 1, 1), 1.0f);
    CHECK_THROWS_AS(batch_norm(g, x, gamma, beta, rm, rv, 1e-5, 0.9, true), std::invalid_argument);
}

TEST_CASE("batch_norm inference is an affine map: applying a neutral second pass changes nothing") {
    Rng rng(19);
    Graph<float> g(false);
    auto x = random_tensor<float>(rng, Shape(1, 2, 5, 5));
    auto gamma = make_tensor<float>(Shape(1, 2, 1, 1), {1.7f, 0.4f});
    auto beta = make_tensor<float>(Shape(1, 2, 1, 1), {-0.2f, 0.9f});
    auto rm = make_tensor<float>(Shape(1, 2, 1, 1), {0.3f, -0.6f});
    auto rv = make_tensor<float>(Shape(1, 2, 1, 1), {1.4f, 0.6f});
    auto once = batch_norm(g, x, gamma, beta, rm, rv, 1e-5, 0.9, false);

    auto neutral_gamma = full<float>(Shape(1, 2, 1, 1), 1.0f);
    auto neutral_beta = make_tensor<float>(Shape(1, 2, 1, 1));
    auto neutral_rm = make_tensor<float>(Shape(1, 2, 1, 1));
    auto neutral_rv = full<float>(Shape(1, 2, 1, 1), 1.0f);
    auto twice = batch_norm(g, once, neutral_gamma, neutral_beta, neutral_rm, neutral_rv, 1e-12, 0.9,
                            false);
    for (std::size_t i = 0; i < once->data.size(); ++i)
        CHECK(twice->data[i] == doctest::Approx(once->data[i]).epsilon(1e-5));
}

TEST_CASE("bilinear_resize basics") {
    Rng rng(23);
    Graph<float> g(false);
    SUBCASE("constant input stays constant at any size") {
        auto x = full<float>(Shape(1, 1, 3, 5), 0.625f);
        for (auto [oh, ow] : {std::pair<int, int>{1, 1}, {7, 2}, {12, 20}}) {
            auto y = bilinear_resize(g, x, oh, ow);
            for (float v : y->data) CHECK(v == doctest::Approx(0.625f).epsilon(1e-7));
        }
    }
    SUBCASE("same size is the exact identity") {
        auto x = random_tensor<float>(rng, Shape(2, 3, 6, 7));
        auto y = bilinear_resize(g, x, 6, 7);
        CHECK(y->data == x->data);
    }
    SUBCASE("1x2 row upsampled to 1x4 per the half-pixel formula") {
        auto x = make_tensor<float>(Shape(1, 1, 1, 2), {0.0f, 1.0f});
        auto y = bilinear_resize(g, x, 1, 4);
        REQUIRE(y->data.size() == 4);
        CHECK(y->data[0] == doctest::Approx(0.0).epsilon(1e-7));
        CHECK(y->data[1] == doctest::Approx(0.25).epsilon(1e-7));
        CHECK(y->data[2] == doctest::Approx(0.75).epsilon(1e-7));
        CHECK(y->data[3] == doctest::Approx(1.0).epsilon(1e-7));
    }
    SUBCASE("output extents must be positive") {
        auto x = full<float>(Shape(1, 1, 2, 2), 1.0f);
        CHECK_THROWS_AS(bilinear_resize(g, x, 0, 4), std::invalid_argument);
    }
}

TEST_CASE("bilinear_resize adjoint consistency: <R u, v> == <u, R* v>") {
    Rng rng(29);
    for (auto [ih, iw, oh, ow] :
         {std::array<int, 4>{5, 7, 11, 13}, {8, 8, 3, 5}, {4, 9, 16, 18}}) {
        auto u = random_tensor<double>(rng, Shape(1, 2, ih, iw));
        auto v = random_tensor<double>(rng, Shape(1, 2, oh, ow));

        Graph<double> fwd(false);
        auto ru = bilinear_resize(fwd, u, oh, ow);
        double lhs = 0.0;
        for (std::size_t i = 0; i < ru->data.size(); ++i) lhs += ru->data[i] * v->data[i];

        Graph<double> g;
        auto x = make_tensor<double>(u->shape, u->data, true);
        auto loss = sum_all(g, mul(g, bilinear_resize(g, x, oh, ow), v));
        g.backward(loss);
        double rhs = 0.0;
        for (std::size_t i = 0; i < u->data.size(); ++i) rhs += u->data[i] * x->grad[i];

        CHECK(lhs == doctest::Approx(rhs).epsilon(1e-6));
    }
}

TEST_CASE("softmax_cross_entropy closed-form cases") {
    Graph<float> g(false);
    SUBCASE("equal logits give ln 2 per pixel") {
        auto logits = full<float>(Shape(1, 2, 3, 3), 1.25f);
        auto target = make_tensor<float>(Shape(1, 1, 3, 3));
        auto out = softmax_cross_entropy(g, logits, target);
        CHECK(out.loss->data[0] == doctest::Approx(std::log(2.0)).epsilon(1e-6));
    }
    SUBCASE("a large margin toward the true class drives the loss to zero") {
        auto logits = make_tensor<float>(Shape(1, 2, 1, 1), {0.0f, 50.0f});
        auto target = full<float>(Shape(1, 1, 1, 1), 1.0f);
        auto out = softmax_cross_entropy(g, logits, target);
        CHECK(out.loss->data[0] < 1e-9);
    }
    SUBCASE("logits (0,1) with target 1 give ln(1+e^-1)") {
        auto logits = make_tensor<float>(Shape(1, 2, 1, 1), {0.0f, 1.0f});
        auto target = full<float>(Shape(1, 1, 1, 1), 1.0f);
        auto out = softmax_cross_entropy(g, logits, target);
        CHECK(out.loss->data[0] == doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-6));
    }
    SUBCASE("probabilities sum to one and loss is non-negative") {
        Rng rng(37);
        auto logits = random_tensor<float>(rng, Shape(2, 2, 4, 4));
        auto target = make_tensor<float>(Shape(2, 1, 4, 4));
        for (float& v : target->data) v = rng.next_u64() & 1 ? 1.0f : 0.0f;
        auto out = softmax_cross_entropy(g, logits, target);
        CHECK(out.loss->data[0] >= 0.0f);
        const std::int64_t plane = 16;
        for (std::int64_t n = 0; n < 2; ++n)
            for (std::int64_t i = 0; i < plane; ++i)
                CHECK(out.probs->data[(n * 2) * plane + i] + out.probs->data[(n * 2 + 1) * plane + i] ==
                      doctest::Approx(1.0).epsilon(1e-6));
    }
    SUBCASE("target values outside {0,1} are rejected") {
        auto logits = full<float>(Shape(1, 2, 1, 1), 0.0f);
        auto target = full<float>(Shape(1, 1, 1, 1), 0.5f);
        CHECK_THROWS_AS(softmax_cross_entropy(g, logits, target), std::invalid_argument);
    }
}

TEST_CASE("concat_channels") {
    Rng rng(41);
    SUBCASE("shapes and layout") {
        Graph<float> g(false);
        auto a = full<float>(Shape(1, 1, 2, 2), 1.0f);
        auto b = full<float>(Shape(1, 1, 2, 2), 2.0f);
        auto y = concat_channels(g, a, b);
        CHECK(y->shape == Shape(1, 2, 2, 2));
        CHECK(y->at(0, 0, 0, 0) == 1.0f);
        CHECK(y->at(0, 1, 0, 0) == 2.0f);
    }
    SUBCASE("concat with a zero-channel tensor is the identity") {
        Graph<float> g(false);
        auto a = random_tensor<float>(rng, Shape(1, 3, 4, 4));
        auto empty = make_tensor<float>(Shape(1, 0, 4, 4));
        auto y = concat_channels(g, a, empty);
        CHECK(y->shape == a->shape);
        CHECK(y->data == a->data);
    }
    SUBCASE("gradient of sum over concat is all-ones on both inputs") {
        Graph<double> g;
        auto a = random_tensor<double>(rng, Shape(1, 2, 3, 3), true);
        auto b = random_tensor<double>(rng, Shape(1, 1, 3, 3), true);
        auto loss = sum_all(g, concat_channels(g, a, b));
        g.backward(loss);
        for (double v : a->grad) CHECK(v == 1.0);
        for (double v : b->grad) CHECK(v == 1.0);
    }
    SUBCASE("spatial mismatch is rejected") {
        Graph<float> g(false);
        auto a = full<float>(Shape(1, 1, 2, 2), 1.0f);
        auto b = full<float>(Shape(1, 1, 3, 2), 1.0f);
        CHECK_THROWS_AS(concat_channels(g, a, b), std::invalid_argument);
    }
}

TEST_CASE("residual block with zero conv weights reduces to relu(input)") {
    Rng rng(43);
    auto block = make_residual_block<float>(rng, 4, 4, 1, 1);
    REQUIRE(!block.has_projection);
    std::fill(block.conv1.weight->data.begin(), block.conv1.weight->data.end(), 0.0f);
    std::fill(block.conv2.weight->data.begin(), block.conv2.weight->data.end(), 0.0f);

    Graph<float> g(false);
    auto x = random_tensor<float>(rng, Shape(1, 4, 6, 6));
    auto y = block.forward(g, x, /*training=*/false);
    REQUIRE(y->shape == x->shape);
    for (std::size_t i = 0; i < x->data.size(); ++i)
        CHECK(y->data[i] == std::max(0.0f, x->data[i]));
}

TEST_CASE("stride-2 residual block halves spatial extents") {
    Rng rng(53);
    auto block = make_residual_block<float>(rng, 3, 8, 2, 1);
    CHECK(block.has_projection);
    Graph<float> g(false);
    auto x = random_tensor<float>(rng, Shape(2, 3, 16, 16));
    auto y = block.forward(g, x, false);
    CHECK(y->shape == Shape(2, 8, 8, 8));
}

TEST_CASE("residual block gradient matches finite differences") {
    Rng rng(59);
    auto block = make_residual_block<double>(rng, 2, 3, 2, 1);
    auto input = random_tensor<double>(rng, Shape(1, 2, 6, 6));
    auto c = random_tensor<double>(rng, Shape(1, 3, 3, 3));
    const auto result = finite_diff_check(
        [&](Graph<double>& g, const TensorPtr<double>& x) {
            return sum_all(g, mul(g, block.forward(g, x, true), c));
        },
        input, 1e-5);
    CHECK(result.max_rel_error < 1e-4);
}
