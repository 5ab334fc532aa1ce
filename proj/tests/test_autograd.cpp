#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "gradcheck.hpp"
#include "hmdr/autograd.hpp"
#include "hmdr/error.hpp"
#include "hmdr/nn.hpp"

using namespace hmdr;
using ag::Var;
using testing::grad_check;
using testing::random_tensor;

namespace {

// Reduces any tensor to a scalar with fixed random weights so every output
// element contributes a distinct sensitivity.
Var weighted_sum(const Var& y, std::uint64_t seed = 99)
{
    nn::Rng rng(seed);
    return ag::sum(ag::mul(y, Var::constant(random_tensor(y.shape(), rng))));
}

} // namespace

TEST_CASE("elementwise ops match finite differences")
{
    nn::Rng rng(3);
    Var a = Var::parameter(random_tensor({2, 3, 4}, rng));
    Var b = Var::parameter(random_tensor({2, 3, 4}, rng, 0.5, 2.0));
    auto r = grad_check(
        [&] {
            Var y = ag::add(ag::mul(ag::sigmoid(a), ag::log(b)), ag::leaky_relu(ag::sub(a, b), 0.2));
            y = ag::add(y, ag::mul_scalar(ag::exp(ag::mul_scalar(a, 0.3)), 0.5));
            y = ag::add(y, ag::sqrt(b, 0.1));
            y = ag::add(y, ag::huber(a, 0.4));
            return weighted_sum(y);
        },
        {a, b});
    CHECK(r.relative_error < 1e-7);
}

TEST_CASE("shape ops route gradients")
{
    nn::Rng rng(4);
    Var a = Var::parameter(random_tensor({2, 3, 2, 2}, rng));
    Var b = Var::parameter(random_tensor({2, 1, 2, 2}, rng));
    Var c = Var::parameter(random_tensor({1, 3, 2, 2}, rng));
    auto r = grad_check(
        [&] {
            Var cat = ag::concat({a, b}, 1);
            Var s = ag::slice(cat, 1, 1, 4);
            Var rep = ag::repeat_leading(c, 2);
            Var y = ag::add(s, rep);
            Var flat = ag::reshape(y, {6, 4});
            return weighted_sum(ag::gather(flat, {5, 0, 0, 2}));
        },
        {a, b, c});
    CHECK(r.relative_error < 1e-7);
}

TEST_CASE("bmm handles every transpose combination")
{
    nn::Rng rng(5);
    for (int ta = 0; ta < 2; ++ta) {
        for (int tb = 0; tb < 2; ++tb) {
            Var a = Var::parameter(random_tensor(ta ? Shape{2, 4, 3} : Shape{2, 3, 4}, rng));
            Var b = Var::parameter(random_tensor(tb ? Shape{2, 5, 4} : Shape{2, 4, 5}, rng));
            auto r = grad_check([&] { return weighted_sum(ag::bmm(a, b, ta, tb)); }, {a, b});
            CHECK(r.relative_error < 1e-7);
        }
    }
}

TEST_CASE("linear, affine_const, softmax, apply_affine")
{
    nn::Rng rng(6);
    Var x = Var::parameter(random_tensor({3, 4}, rng));
    Var w = Var::parameter(random_tensor({5, 4}, rng));
    Var bias = Var::parameter(random_tensor({5}, rng));
    Tensor m = random_tensor({6, 4}, rng);
    Tensor off = random_tensor({6}, rng);
    Var pose = Var::parameter(random_tensor({2, 3, 4}, rng));
    Var pts = Var::parameter(random_tensor({2, 7, 3}, rng));
    auto r = grad_check(
        [&] {
            Var y = ag::softmax(ag::linear(x, w, bias));
            Var z = ag::affine_const(m, x, off);
            Var p = ag::apply_affine(pose, pts);
            return ag::add(ag::add(weighted_sum(y), weighted_sum(z)), weighted_sum(p));
        },
        {x, w, bias, pose, pts});
    CHECK(r.relative_error < 1e-7);
}

TEST_CASE("softmax rows sum to one")
{
    nn::Rng rng(7);
    Var y = ag::softmax(Var::constant(random_tensor({4, 9}, rng, -5, 5)));
    for (int r = 0; r < 4; ++r) {
        double s = 0;
        for (int i = 0; i < 9; ++i) {
            s += y.value()[static_cast<std::size_t>(r * 9 + i)];
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("conv2d gradients across stride, padding and dilation")
{
    nn::Rng rng(8);
    const ag::Conv2dSpec specs[] = {{1, 0, 1}, {2, 1, 1}, {1, 2, 2}, {2, 2, 1}};
    const int kernels[] = {1, 4, 3, 5};
    for (int s = 0; s < 4; ++s) {
        Var x = Var::parameter(random_tensor({2, 3, 7, 6}, rng));
        Var w = Var::parameter(random_tensor({4, 3, kernels[s], kernels[s]}, rng));
        Var b = Var::parameter(random_tensor({4}, rng));
        auto r = grad_check([&] { return weighted_sum(ag::conv2d(x, w, b, specs[s])); }, {x, w, b});
        CHECK(r.relative_error < 1e-7);
    }
}

TEST_CASE("conv2d matches a direct loop")
{
    nn::Rng rng(9);
    Tensor x = random_tensor({1, 2, 5, 5}, rng);
    Tensor w = random_tensor({3, 2, 3, 3}, rng);
    const ag::Conv2dSpec spec{2, 1, 1};
    Var y = ag::conv2d(Var::constant(x), Var::constant(w), Var(), spec);
    REQUIRE(y.shape() == Shape{1, 3, 3, 3});
    for (int o = 0; o < 3; ++o) {
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
                double acc = 0;
                for (int c = 0; c < 2; ++c) {
                    for (int ki = 0; ki < 3; ++ki) {
                        for (int kj = 0; kj < 3; ++kj) {
                            const int ii = i * 2 - 1 + ki, jj = j * 2 - 1 + kj;
                            if (ii < 0 || jj < 0 || ii >= 5 || jj >= 5) {
                                continue;
                            }
                            acc += x[static_cast<std::size_t>((c * 5 + ii) * 5 + jj)] *
                                   w[static_cast<std::size_t>(((o * 2 + c) * 3 + ki) * 3 + kj)];
                        }
                    }
                }
                CHECK(y.value()[static_cast<std::size_t>((o * 3 + i) * 3 + j)] == doctest::Approx(acc).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("pooling, upsampling, gram, gating, temporal shift gradients")
{
    nn::Rng rng(10);
    Var x = Var::parameter(random_tensor({3, 4, 4, 6}, rng));
    Var k = Var::parameter(random_tensor({2, 3}, rng));
    auto r = grad_check(
        [&] {
            Var y = ag::add(weighted_sum(ag::avg_pool2d(x, 2)), weighted_sum(ag::upsample_nearest2x(x)));
            y = ag::add(y, weighted_sum(ag::global_avg_pool(x)));
            y = ag::add(y, weighted_sum(ag::gram(x)));
            y = ag::add(y, weighted_sum(ag::gated_activation(x, 0.2)));
            y = ag::add(y, weighted_sum(ag::temporal_shift(x, k)));
            return y;
        },
        {x, k});
    CHECK(r.relative_error < 1e-7);
}

TEST_CASE("where routes gradients by mask and passes values bitwise")
{
    nn::Rng rng(11);
    Var a = Var::parameter(random_tensor({2, 3}, rng));
    Var b = Var::parameter(random_tensor({2, 3}, rng));
    Tensor mask({2, 3}, {1, 0, 1, 0, 0, 1});
    Var y = ag::where(mask, a, b);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(y.value()[i] == (mask[i] != 0 ? a.value()[i] : b.value()[i]));
    }
    ag::backward(ag::sum(y));
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(a.grad()[i] == mask[i]);
        CHECK(b.grad()[i] == 1.0 - mask[i]);
    }
}

TEST_CASE("no-grad mode builds no graph")
{
    Var p = Var::parameter(Tensor({2}, {1.0, 2.0}));
    ag::NoGradGuard guard;
    Var y = ag::mul(p, p);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("shape errors are rejected")
{
    Var a = Var::constant(Tensor({2, 2}));
    Var b = Var::constant(Tensor({3}));
    CHECK_THROWS_AS(ag::add(a, b), InvalidInput);
    CHECK_THROWS_AS(ag::backward(a), InvalidInput);
    CHECK_THROWS_AS(ag::conv2d(Var::constant(Tensor({1, 2, 4, 4})), Var::constant(Tensor({1, 3, 3, 3})), Var(), {}),
                    InvalidInput);
}

TEST_CASE("adam moves parameters against the gradient")
{
    Var p = Var::parameter(Tensor({1}, {1.0}));
    nn::Adam opt({{"p", p}}, {.lr = 0.1});
    for (int i = 0; i < 50; ++i) {
        opt.zero_grad();
        ag::backward(ag::square(p));
        opt.step();
    }
    CHECK(std::abs(p.value()[0]) < 0.2);
}

TEST_CASE("derived seeds differ per component and are stable")
{
    CHECK(nn::derive_seed(1, "generator") != nn::derive_seed(1, "discriminator"));
    CHECK(nn::derive_seed(1, "generator") == nn::derive_seed(1, "generator"));
    nn::Rng a(5), b(5);
    for (int i = 0; i < 10; ++i) {
        CHECK(a.normal() == b.normal());
    }
}
