#include "hmdr/nn.hpp"

#include "hmdr/error.hpp"

#include <cmath>
#include <numbers>

namespace hmdr::nn {

std::uint64_t derive_seed(std::uint64_t root, const std::string& component)
{
    // FNV-1a of the name mixed into the root, finished with splitmix64.
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : component) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    std::uint64_t z = root ^ h;
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

double Rng::uniform()
{
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal()
{
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) {
        u1 = uniform();
    }
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

Conv2d Conv2d::make(int in, int out, int kernel, ag::Conv2dSpec spec, Rng& rng)
{
    Tensor w({out, in, kernel, kernel});
    const double bound = std::sqrt(6.0 / static_cast<double>(in * kernel * kernel));
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = rng.uniform(-bound, bound);
    }
    return Conv2d{Var::parameter(std::move(w)), Var::parameter(Tensor({out}, 0.0)), spec};
}

void Conv2d::collect(const std::string& prefix, NamedParams& out) const
{
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
}

Linear Linear::make(int in, int out, Rng& rng, double gain)
{
    Tensor w({out, in});
    const double bound = gain * std::sqrt(6.0 / static_cast<double>(in + out));
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = rng.uniform(-bound, bound);
    }
    return Linear{Var::parameter(std::move(w)), Var::parameter(Tensor({out}, 0.0))};
}

Linear Linear::zeros(int in, int out)
{
    return Linear{Var::parameter(Tensor({out, in}, 0.0)), Var::parameter(Tensor({out}, 0.0))};
}

void Linear::collect(const std::string& prefix, NamedParams& out) const
{
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
}

std::vector<Var> values_of(const NamedParams& params)
{
    std::vector<Var> out;
    out.reserve(params.size());
    for (const auto& [name, v] : params) {
        out.push_back(v);
    }
    return out;
}

std::uint64_t checksum(const NamedParams& params)
{
    return ag::checksum(values_of(params));
}

void set_requires_grad(const NamedParams& params, bool flag)
{
    for (const auto& [name, v] : params) {
        Var copy = v;
        copy.set_requires_grad(flag);
    }
}

void zero_grad(const NamedParams& params)
{
    for (const auto& [name, v] : params) {
        Var copy = v;
        copy.zero_grad();
    }
}

Adam::Adam(NamedParams params, AdamOptions options) : params_(std::move(params)), options_(options)
{
    for (const auto& [name, v] : params_) {
        m_.emplace_back(v.shape(), 0.0);
        v_.emplace_back(v.shape(), 0.0);
    }
}

void Adam::step()
{
    ++steps_;
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
    for (std::size_t p = 0; p < params_.size(); ++p) {
        Var param = params_[p].second;
        if (!param.has_grad()) {
            continue;
        }
        const Tensor& g = param.grad();
        Tensor& value = param.mutable_value();
        Tensor& m = m_[p];
        Tensor& v = v_[p];
        for (std::size_t i = 0; i < value.size(); ++i) {
            m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * g[i];
            v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            value[i] -= options_.lr * mhat / (std::sqrt(vhat) + options_.eps);
        }
    }
}

void Adam::zero_grad()
{
    nn::zero_grad(params_);
}

} // namespace hmdr::nn
