#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "leirstd/snapshot.hpp"
#include "grad_suite.hpp"
#include "test_util.hpp"

using namespace leirstd;
using namespace testutil;

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor::zeros({0, 1, 1, 1}), DimensionError);
    CHECK_THROWS_AS(Tensor::from({1, 2, 2, 2}, std::vector<double>(7)), DimensionError);
    auto t = Tensor::zeros({2, 3, 4, 5}, true);
    CHECK(t.size() == 120);
    CHECK_FALSE(t.has_grad());
    backward(ops::sum(t));
    CHECK(t.grad().size() == t.size());
}

TEST_CASE("conv2d examples") {
    SUBCASE("1x1 depthwise ones is identity") {
        auto x = random_tensor({2, 3, 4, 5}, 1);
        auto w = Tensor::full({3, 1, 1, 1}, 1.0);
        auto y = ops::conv2d(x, w, {1, 0, 3});
        CHECK(y.to_vector() == x.to_vector());
    }
    SUBCASE("3x3 ones on 3x3 ones") {
        auto y = ops::conv2d(Tensor::full({1, 1, 3, 3}, 1.0), Tensor::full({1, 1, 3, 3}, 1.0));
        CHECK(y.shape() == Shape{1, 1, 1, 1});
        CHECK(y.item() == 9.0);
    }
    SUBCASE("matches direct-loop oracle") {
        auto x = random_tensor({1, 2, 5, 5}, 2);
        auto w = random_tensor({3, 2, 3, 3}, 3);
        auto y = ops::conv2d(x, w, {1, 1, 1});
        const auto ref = naive_conv(x, w, {}, 1, 1, 1);
        CHECK(y.shape() == Shape{1, 3, 5, 5});
        CHECK(max_abs_diff(y.data(), ref) <= 1e-6);
    }
    SUBCASE("stride, groups and bias against oracle") {
        auto x = random_tensor({2, 4, 7, 6}, 4);
        auto w = random_tensor({6, 2, 3, 3}, 5);
        auto b = random_tensor({1, 6, 1, 1}, 6);
        auto y = ops::conv2d(x, w, b, {2, 1, 2});
        const auto ref = naive_conv(x, w, b.to_vector(), 2, 1, 2);
        CHECK(y.shape() == Shape{2, 6, 4, 3});
        CHECK(max_abs_diff(y.data(), ref) <= 1e-12);
    }
    SUBCASE("errors") {
        auto x = random_tensor({1, 3, 5, 5}, 7);
        CHECK_THROWS_AS(ops::conv2d(x, random_tensor({4, 1, 3, 3}, 8), {1, 1, 2}), ConfigError);
        CHECK_THROWS_AS(ops::conv2d(x, random_tensor({4, 2, 3, 3}, 8), {1, 1, 1}), DimensionError);
        CHECK_THROWS_AS(ops::conv2d(x, random_tensor({4, 3, 7, 7}, 8), {1, 0, 1}), DimensionError);
    }
}

TEST_CASE("depthwise_conv2d") {
    SUBCASE("center delta kernel is identity") {
        std::vector<double> k(4 * 9, 0.0);
        for (int c = 0; c < 4; ++c) k[c * 9 + 4] = 1.0;
        auto x = random_tensor({1, 4, 6, 6}, 11);
        auto y = ops::depthwise_conv2d(x, Tensor::from({4, 1, 3, 3}, k), 1, 1);
        CHECK(y.to_vector() == x.to_vector());
    }
    SUBCASE("stride 2 halves 8x8") {
        auto y = ops::depthwise_conv2d(random_tensor({1, 5, 8, 8}, 12), random_tensor({5, 1, 3, 3}, 13), 2, 1);
        CHECK(y.shape() == Shape{1, 5, 4, 4});
    }
    SUBCASE("equals grouped conv exactly") {
        auto x = random_tensor({2, 6, 7, 7}, 14);
        auto w = random_tensor({6, 1, 3, 3}, 15);
        auto a = ops::depthwise_conv2d(x, w, 1, 1);
        auto b = ops::conv2d(x, w, {1, 1, 6});
        CHECK(a.to_vector() == b.to_vector());
        const auto ref = naive_conv(x, w, {}, 1, 1, 6);
        CHECK(max_abs_diff(a.data(), ref) <= 1e-12);
    }
    SUBCASE("channel mismatch") {
        CHECK_THROWS_AS(ops::depthwise_conv2d(random_tensor({1, 4, 6, 6}, 1), random_tensor({3, 1, 3, 3}, 2), 1, 1),
                        DimensionError);
    }
}

TEST_CASE("batch_norm") {
    const Shape s{3, 4, 5, 5};
    auto x = random_tensor(s, 21, -2.0, 3.0);
    SUBCASE("unit gamma normalizes per channel") {
        ops::BatchNormState st(4);
        auto y = ops::batch_norm(x, Tensor::full({1, 4, 1, 1}, 1.0), Tensor::zeros({1, 4, 1, 1}), st, true);
        for (std::size_t c = 0; c < 4; ++c) {
            double m = 0, v = 0;
            for (std::size_t n = 0; n < 3; ++n)
                for (std::size_t i = 0; i < 25; ++i) m += y.at(n, c, i / 5, i % 5);
            m /= 75;
            for (std::size_t n = 0; n < 3; ++n)
                for (std::size_t i = 0; i < 25; ++i) v += std::pow(y.at(n, c, i / 5, i % 5) - m, 2);
            v /= 75;
            CHECK(std::abs(m) < 1e-12);
            CHECK(std::abs(v - 1.0) < 1e-3);
        }
    }
    SUBCASE("zero gamma outputs beta") {
        ops::BatchNormState st(4);
        auto beta = Tensor::from({1, 4, 1, 1}, {0.5, -1.0, 2.0, 3.0});
        auto y = ops::batch_norm(x, Tensor::zeros({1, 4, 1, 1}), beta, st, true);
        for (std::size_t n = 0; n < 3; ++n)
            for (std::size_t c = 0; c < 4; ++c) CHECK(y.at(n, c, 2, 3) == beta.data()[c]);
    }
    SUBCASE("two-pass statistics oracle and running stats") {
        ops::BatchNormState st(4);
        auto gamma = random_tensor({1, 4, 1, 1}, 22, 0.5, 1.5);
        auto beta = random_tensor({1, 4, 1, 1}, 23);
        auto y = ops::batch_norm(x, gamma, beta, st, true);
        for (std::size_t c = 0; c < 4; ++c) {
            std::vector<double> vals;
            for (std::size_t n = 0; n < 3; ++n)
                for (std::size_t i = 0; i < 25; ++i) vals.push_back(x.at(n, c, i / 5, i % 5));
            double m = 0;
            for (double v : vals) m += v;
            m /= vals.size();
            double var = 0;
            for (double v : vals) var += (v - m) * (v - m);
            for (std::size_t n = 0; n < 3; ++n)
                for (std::size_t i = 0; i < 25; ++i) {
                    const double expect =
                        gamma.data()[c] * (x.at(n, c, i / 5, i % 5) - m) / std::sqrt(var / 75 + 1e-5) + beta.data()[c];
                    CHECK(std::abs(y.at(n, c, i / 5, i % 5) - expect) < 1e-6);
                }
            CHECK(std::abs(st.running_mean[c] - 0.1 * m) < 1e-12);
            CHECK(std::abs(st.running_var[c] - (0.9 + 0.1 * var / 74)) < 1e-12);
        }
        auto inf = ops::batch_norm(x, gamma, beta, st, false);
        const double expect =
            gamma.data()[1] * (x.at(0, 1, 0, 0) - st.running_mean[1]) / std::sqrt(st.running_var[1] + 1e-5) +
            beta.data()[1];
        CHECK(inf.at(0, 1, 0, 0) == doctest::Approx(expect).epsilon(1e-12));
    }
    SUBCASE("degenerate variance") {
        ops::BatchNormState st(2);
        CHECK_THROWS_AS(ops::batch_norm(random_tensor({1, 2, 1, 1}, 1), Tensor::full({1, 2, 1, 1}, 1.0),
                                        Tensor::zeros({1, 2, 1, 1}), st, true),
                        DegenerateVarianceError);
        CHECK_NOTHROW(ops::batch_norm(random_tensor({1, 2, 1, 1}, 1), Tensor::full({1, 2, 1, 1}, 1.0),
                                      Tensor::zeros({1, 2, 1, 1}), st, false));
    }
}

TEST_CASE("activations") {
    CHECK(ops::sigmoid(Tensor::scalar(0.0)).item() == 0.5);
    CHECK(ops::silu(Tensor::scalar(0.0)).item() == 0.0);
    CHECK(ops::sigmoid(Tensor::scalar(2.0)).item() == doctest::Approx(0.880797).epsilon(1e-6));
    CHECK(ops::relu(Tensor::from({1, 1, 1, 2}, {-1.0, 2.0})).to_vector() == std::vector<double>{0.0, 2.0});
    // silu(t) = t * sigmoid(t)
    CHECK(ops::silu(Tensor::scalar(1.5)).item() == doctest::Approx(1.5 / (1 + std::exp(-1.5))));
    CHECK(ops::sigmoid(-800.0) >= 0.0);
    CHECK(ops::sigmoid(800.0) == 1.0);
}

TEST_CASE("channel_shuffle") {
    auto x = random_tensor({2, 4, 3, 3}, 31);
    CHECK(ops::channel_shuffle(x, 1).to_vector() == x.to_vector());
    CHECK(ops::shuffle_permutation(4, 2) == std::vector<std::size_t>{0, 2, 1, 3});
    auto y = ops::channel_shuffle(x, 2);
    for (std::size_t c = 0; c < 4; ++c) {
        const std::size_t src = std::vector<std::size_t>{0, 2, 1, 3}[c];
        CHECK(y.at(1, c, 2, 1) == x.at(1, src, 2, 1));
    }
    CHECK(ops::channel_shuffle(y, 2).to_vector() == x.to_vector());
    CHECK_THROWS_AS(ops::channel_shuffle(x, 3), ConfigError);

    // Generic: perm is a bijection; inverse restores; multiset preserved.
    for (std::size_t c : {6, 8, 12}) {
        for (std::size_t g : {2, 3}) {
            if (c % g) continue;
            auto perm = ops::shuffle_permutation(c, g);
            auto sorted = perm;
            std::sort(sorted.begin(), sorted.end());
            for (std::size_t i = 0; i < c; ++i) CHECK(sorted[i] == i);
            auto t = random_tensor({1, c, 2, 2}, c * 10 + g);
            auto s = ops::channel_shuffle(t, g);
            // inverse permutation: shuffle with c/g groups
            CHECK(ops::channel_shuffle(s, c / g).to_vector() == t.to_vector());
            auto a = t.to_vector(), b = s.to_vector();
            std::sort(a.begin(), a.end());
            std::sort(b.begin(), b.end());
            CHECK(a == b);
        }
    }
}

TEST_CASE("bilinear_sample") {
    auto x = random_tensor({1, 2, 4, 5}, 41);
    auto sample = [&](double y, double xx) {
        return ops::bilinear_sample(x, Tensor::from({1, 2, 1, 1}, {y, xx}));
    };
    auto s = sample(2.0, 3.0);
    CHECK(s.at(0, 0, 0, 0) == x.at(0, 0, 2, 3));
    CHECK(s.at(0, 1, 0, 0) == x.at(0, 1, 2, 3));
    auto mid = sample(1.0, 2.5);
    CHECK(mid.at(0, 0, 0, 0) == doctest::Approx(0.5 * (x.at(0, 0, 1, 2) + x.at(0, 0, 1, 3))).epsilon(1e-14));
    auto far = sample(-5.0, -5.0);
    CHECK(far.at(0, 0, 0, 0) == 0.0);
    CHECK(far.at(0, 1, 0, 0) == 0.0);
    CHECK_THROWS_AS(sample(std::nan(""), 0.0), NumericError);
    CHECK_THROWS_AS(sample(INFINITY, 0.0), NumericError);

    // K = 2 points: channel layout ch * K + k
    auto two = ops::bilinear_sample(x, Tensor::from({1, 4, 1, 1}, {0.0, 0.0, 3.0, 4.0}));
    CHECK(two.shape() == Shape{1, 4, 1, 1});
    CHECK(two.at(0, 1, 0, 0) == x.at(0, 0, 3, 4));
    CHECK(two.at(0, 2, 0, 0) == x.at(0, 1, 0, 0));
}

TEST_CASE("pool_global") {
    auto k = Tensor::full({2, 3, 4, 4}, 1.75);
    for (auto kind : {ops::Pool::avg, ops::Pool::max}) {
        auto y = ops::pool_global(k, kind);
        CHECK(y.shape() == Shape{2, 3, 1, 1});
        for (double v : y.data()) CHECK(v == 1.75);
    }
    CHECK(ops::pool_global(Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4}), ops::Pool::avg).item() == 2.5);
    CHECK(ops::pool_global(Tensor::from({1, 1, 1, 2}, {-1, -7}), ops::Pool::max).item() == -1.0);
}

TEST_CASE("dropout") {
    auto x = random_tensor({1, 4, 6, 6}, 51);
    CHECK(ops::dropout(x, 0.0, true, 3).to_vector() == x.to_vector());
    CHECK(ops::dropout(x, 0.7, false, 3).to_vector() == x.to_vector());
    CHECK_THROWS_AS(ops::dropout(x, 1.0, true, 3), ConfigError);
    CHECK_THROWS_AS(ops::dropout(x, 1.0, false, 3), ConfigError);
    CHECK(ops::dropout(x, 0.3, true, 9).to_vector() == ops::dropout(x, 0.3, true, 9).to_vector());

    auto ones = Tensor::full({1, 1, 1000, 1000}, 1.0);
    auto y = ops::dropout(ones, 0.5, true, 2024);
    std::size_t survivors = 0, other = 0;
    for (double v : y.data()) {
        survivors += v == 2.0;
        other += v != 0.0 && v != 2.0;
    }
    CHECK(other == 0);
    const double frac = static_cast<double>(survivors) / 1e6;
    CHECK(frac > 0.49);
    CHECK(frac < 0.51);
}

TEST_CASE("concat and split") {
    auto a = random_tensor({2, 2, 3, 3}, 61);
    auto b = random_tensor({2, 3, 3, 3}, 62);
    std::vector<Tensor> one{a};
    CHECK(ops::concat_channels(one).to_vector() == a.to_vector());
    std::vector<Tensor> both{a, b};
    auto c = ops::concat_channels(both);
    CHECK(c.shape() == Shape{2, 5, 3, 3});
    CHECK(c.at(1, 1, 2, 2) == a.at(1, 1, 2, 2));
    CHECK(c.at(1, 4, 0, 1) == b.at(1, 2, 0, 1));
    for (std::size_t at = 1; at < 5; ++at) {
        auto parts = ops::split_channels(c, at);
        CHECK(ops::concat_channels(parts).to_vector() == c.to_vector());
    }
    std::vector<Tensor> bad{a, random_tensor({2, 1, 4, 3}, 63)};
    CHECK_THROWS_AS(ops::concat_channels(bad), DimensionError);
}

TEST_CASE("backward examples") {
    auto x = random_tensor({1, 2, 3, 3}, 71, -1, 1, true);
    backward(ops::sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);

    x.zero_grad();
    backward(ops::sum(ops::mul(x, x)));
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == 2.0 * x.data()[i]);

    CHECK_THROWS_AS(backward(ops::add(x, x)), ContractError);

    // Using a tensor twice accumulates the two single-use gradients.
    auto w = random_tensor({1, 2, 3, 3}, 72);
    auto single = [&](const Tensor& t) { return ops::sum(ops::mul(ops::sigmoid(t), w)); };
    x.zero_grad();
    backward(single(x));
    std::vector<double> g1(x.grad().begin(), x.grad().end());
    x.zero_grad();
    backward(ops::add(single(x), ops::sum(ops::scale(x, 3.0))));
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == doctest::Approx(g1[i] + 3.0));
}

TEST_CASE("grad_check examples") {
    SUBCASE("sigmoid at 0") {
        auto x = Tensor::scalar(0.0, true);
        auto rep = grad_check([](const std::vector<Tensor>& in) { return ops::sigmoid(in[0]); }, {x});
        CHECK(rep.passed);
        CHECK(x.grad()[0] == 0.25);
        CHECK(rep.worst_numeric == doctest::Approx(0.25).epsilon(1e-6));
    }
    SUBCASE("identity is exact") {
        auto x = random_tensor({1, 2, 2, 2}, 81, -1, 1, true);
        auto rep = grad_check([](const std::vector<Tensor>& in) { return ops::sum(in[0]); }, {x});
        CHECK(rep.max_rel_error <= 1e-10);
    }
    SUBCASE("non-deterministic closure") {
        int calls = 0;
        auto x = Tensor::scalar(1.0, true);
        CHECK_THROWS_AS(grad_check([&](const std::vector<Tensor>& in) { return ops::scale(in[0], ++calls); }, {x}),
                        DeterminismError);
    }
    SUBCASE("kink straddled by the stencil is flagged, not scored") {
        auto relu_sum = [](const std::vector<Tensor>& in) { return ops::sum(ops::relu(in[0])); };
        // relu at 1e-6 stays inside the stencil even after two tenfold refinements
        auto x = Tensor::from({1, 1, 1, 2}, {1e-6, 0.7}, true);
        auto rep = grad_check(relu_sum, {x}, {1e-3, 1e-5, Stencil::five_point, 1e-5, 0.5});
        CHECK(rep.non_smooth == 1);
        CHECK(rep.passed);
        auto strict = grad_check(relu_sum, {x}, {1e-3, 1e-5, Stencil::five_point, 0.0, 0.0});
        CHECK_FALSE(strict.passed);
    }
    SUBCASE("refinement steps around a nearby kink") {
        auto relu_sum = [](const std::vector<Tensor>& in) { return ops::sum(ops::relu(in[0])); };
        auto x = Tensor::from({1, 1, 1, 2}, {5e-4, 0.7}, true);
        auto rep = grad_check(relu_sum, {x});
        CHECK(rep.non_smooth == 0);
        CHECK(rep.passed);
        auto coarse = grad_check(relu_sum, {x}, {1e-3, 1e-5, Stencil::five_point, 1e-5, 0.5, 0});
        CHECK(coarse.non_smooth == 1);
    }
    SUBCASE("three-point stencil has second-order error") {
        auto x = Tensor::scalar(0.3, true);
        GradCheckOptions three{1e-3, 1e-5, Stencil::three_point, 0.0, 0.0};
        auto rep = grad_check([](const std::vector<Tensor>& in) { return ops::sigmoid(in[0]); }, {x}, three);
        CHECK(rep.max_rel_error > 1e-8);
        CHECK(grad_check([](const std::vector<Tensor>& in) { return ops::sigmoid(in[0]); }, {x}).max_rel_error <
              rep.max_rel_error);
    }
    SUBCASE("wrong analytic gradient fails even where smooth") {
        // scale by a constant detached from the leaf: forward 2x, gradient only 1x
        auto x = random_tensor({1, 1, 2, 2}, 82, 0.5, 1.0, true);
        auto rep = grad_check(
            [](const std::vector<Tensor>& in) {
                return ops::sum(ops::add(in[0], in[0].detach()));
            },
            {x});
        CHECK_FALSE(rep.passed);
        CHECK(rep.non_smooth == 0);
        CHECK(rep.worst_numeric == doctest::Approx(2.0));
    }
    SUBCASE("non-leaf inputs rejected") {
        auto x = Tensor::scalar(1.0, true);
        CHECK_THROWS_AS(grad_check([](const std::vector<Tensor>& in) { return in[0]; }, {ops::scale(x, 2.0)}),
                        ContractError);
    }
}

TEST_CASE("primitive gradients match finite differences") {
    for (const Shape s : {Shape{1, 4, 6, 6}, Shape{1, 8, 7, 8}}) {
        for (const auto& c : primitive_gradients(s, 100)) {
            INFO(c.name << " on " << s.c << "x" << s.h << "x" << s.w << ": " << c.report.summary());
            CHECK(c.report.passed);
        }
    }
}

TEST_CASE("forward determinism") {
    auto x = random_tensor({2, 4, 6, 6}, 121);
    auto w = random_tensor({4, 4, 3, 3}, 122);
    auto a = ops::conv2d(x, w, {1, 1, 1});
    auto b = ops::conv2d(x, w, {1, 1, 1});
    CHECK(std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("snapshot format") {
    auto t = Tensor::from({1, 2, 1, 2}, {1.0, -2.5, 0.25, 3.0});
    std::ostringstream out;
    write_snapshot(out, t.shape(), t.to_vector());
    const std::string bytes = out.str();
    REQUIRE(bytes.size() == 4 + 4 + 32 + 16);
    CHECK(bytes.substr(0, 4) == "LET4");
    CHECK(static_cast<unsigned char>(bytes[4]) == 1);
    CHECK(bytes[5] == 0);
    CHECK(static_cast<unsigned char>(bytes[8]) == 1);   // n
    CHECK(static_cast<unsigned char>(bytes[16]) == 2);  // c
    // 1.0f little-endian = 00 00 80 3f
    CHECK(static_cast<unsigned char>(bytes[40]) == 0x00);
    CHECK(static_cast<unsigned char>(bytes[43]) == 0x3f);
    std::istringstream in(bytes);
    auto back = read_snapshot(in);
    CHECK(back.shape() == t.shape());
    CHECK(back.to_vector() == t.to_vector());

    std::string bad = bytes;
    bad[0] = 'X';
    std::istringstream bin(bad);
    CHECK_THROWS_AS(read_snapshot(bin), DataError);
    std::istringstream trunc(bytes.substr(0, 30));
    CHECK_THROWS_AS(read_snapshot(trunc), IoError);
}
