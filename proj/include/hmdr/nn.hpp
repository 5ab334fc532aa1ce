#pragma once

#include "hmdr/autograd.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace hmdr::nn {

using ag::Var;
using NamedParams = std::vector<std::pair<std::string, Var>>;

/// Derives an independent stream seed for a named component from a root seed.
std::uint64_t derive_seed(std::uint64_t root, const std::string& component);

/// Platform-independent random source (mt19937_64 bits, explicit transforms).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    double uniform(); // [0, 1)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal(); // standard normal
    std::uint64_t bits() { return engine_(); }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

struct Conv2d {
    Var weight; // [out, in, k, k]
    Var bias;   // [out]
    ag::Conv2dSpec spec;

    /// He-uniform weights, zero bias.
    static Conv2d make(int in, int out, int kernel, ag::Conv2dSpec spec, Rng& rng);
    Var operator()(const Var& x) const { return ag::conv2d(x, weight, bias, spec); }
    int out_channels() const { return weight.dim(0); }
    void collect(const std::string& prefix, NamedParams& out) const;
};

struct Linear {
    Var weight; // [out, in]
    Var bias;   // [out]

    static Linear make(int in, int out, Rng& rng, double gain = 1.0);
    static Linear zeros(int in, int out);
    Var operator()(const Var& x) const { return ag::linear(x, weight, bias); }
    void collect(const std::string& prefix, NamedParams& out) const;
};

std::vector<Var> values_of(const NamedParams& params);
std::uint64_t checksum(const NamedParams& params);
void set_requires_grad(const NamedParams& params, bool flag);
void zero_grad(const NamedParams& params);

struct AdamOptions {
    double lr = 9.6e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam over a fixed parameter list. Parameters without gradients are skipped.
class Adam {
public:
    Adam(NamedParams params, AdamOptions options);

    void step();
    void zero_grad();

    const AdamOptions& options() const { return options_; }
    void set_lr(double lr) { options_.lr = lr; }
    long long steps() const { return steps_; }
    const NamedParams& params() const { return params_; }

    // Moment buffers, in parameter order; exposed for checkpointing.
    std::vector<Tensor>& first_moments() { return m_; }
    std::vector<Tensor>& second_moments() { return v_; }
    void set_steps(long long steps) { steps_ = steps; }

private:
    NamedParams params_;
    AdamOptions options_;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    long long steps_ = 0;
};

} // namespace hmdr::nn
