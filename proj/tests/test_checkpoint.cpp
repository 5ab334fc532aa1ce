#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "gradcheck.hpp"
#include "hmdr/checkpoint.hpp"
#include "hmdr/error.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

using namespace hmdr;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir()
{
    const fs::path d = fs::temp_directory_path() / "hmdr_checkpoint_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

} // namespace

TEST_CASE("round trip is bit-exact")
{
    const fs::path dir = temp_dir();
    nn::Rng rng(1);
    Checkpoint c;
    c.stage = "stage1";
    c.config = R"({"a": 1})";
    c.meta["seed"] = "42";
    c.put("x", hmdr::testing::random_tensor({3, 4, 5}, rng));
    c.put("odd", Tensor({2}, std::vector<double>{std::numeric_limits<double>::denorm_min(), -0.0}));
    c.put("empty", Tensor({0}));
    save_checkpoint(c, dir / "a.ckpt");
    const Checkpoint r = load_checkpoint(dir / "a.ckpt");
    CHECK(r.stage == "stage1");
    CHECK(r.config == c.config);
    CHECK(r.meta == c.meta);
    REQUIRE(r.tensors.size() == 3);
    CHECK(r.get("x") == c.get("x"));
    CHECK(std::signbit(r.get("odd")[1]));
    CHECK(r.get("odd")[0] == std::numeric_limits<double>::denorm_min());
    CHECK_THROWS_AS(r.get("nope"), IncompatibleCheckpoint);
}

TEST_CASE("parameters and optimizer state")
{
    nn::Rng rng(2);
    nn::NamedParams p{{"w", ag::Var::parameter(hmdr::testing::random_tensor({2, 3}, rng))},
                      {"b", ag::Var::parameter(Tensor({3}))}};
    nn::Adam adam(p, {});
    p[0].second.grad().fill(0.5);
    p[1].second.grad().fill(-0.25);
    adam.step();
    Checkpoint c;
    c.put_params(p);
    c.put_optimizer("opt", adam);

    nn::NamedParams q{{"w", ag::Var::parameter(Tensor({2, 3}))}, {"b", ag::Var::parameter(Tensor({3}))}};
    nn::Adam adam2(q, {});
    c.load_params(q);
    c.load_optimizer("opt", adam2);
    CHECK(q[0].second.value() == p[0].second.value());
    CHECK(adam2.steps() == 1);
    CHECK(adam2.first_moments()[0] == adam.first_moments()[0]);
    CHECK(adam2.second_moments()[1] == adam.second_moments()[1]);

    nn::NamedParams wrong{{"w", ag::Var::parameter(Tensor({3, 2}))}};
    CHECK_THROWS_AS(c.load_params(wrong), IncompatibleCheckpoint);
}

TEST_CASE("foreign and truncated files are rejected")
{
    const fs::path dir = temp_dir();
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), FormatError);
    {
        std::ofstream out(dir / "foreign.ckpt");
        out << "not a checkpoint at all";
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "foreign.ckpt"), FormatError);

    Checkpoint c;
    c.put("x", Tensor({100}, 1.0));
    save_checkpoint(c, dir / "full.ckpt");
    const auto size = fs::file_size(dir / "full.ckpt");
    fs::copy_file(dir / "full.ckpt", dir / "cut.ckpt");
    fs::resize_file(dir / "cut.ckpt", size - 8);
    CHECK_THROWS_AS(load_checkpoint(dir / "cut.ckpt"), FormatError);
}
