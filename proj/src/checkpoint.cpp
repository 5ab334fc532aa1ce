#include "hmdr/checkpoint.hpp"

#include "hmdr/error.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace hmdr {

namespace {

constexpr char kMagic[8] = {'H', 'M', 'D', 'R', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void write_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint64_t read_u64(std::istream& in, const std::string& path)
{
    std::uint64_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
        throw FormatError(path, "truncated checkpoint header");
    }
    return v;
}

} // namespace

void Checkpoint::put(const std::string& name, Tensor value)
{
    for (auto& [n, t] : tensors) {
        if (n == name) {
            t = std::move(value);
            return;
        }
    }
    tensors.emplace_back(name, std::move(value));
}

bool Checkpoint::has(const std::string& name) const
{
    for (const auto& [n, t] : tensors) {
        if (n == name) {
            return true;
        }
    }
    return false;
}

const Tensor& Checkpoint::get(const std::string& name) const
{
    for (const auto& [n, t] : tensors) {
        if (n == name) {
            return t;
        }
    }
    throw IncompatibleCheckpoint("checkpoint has no tensor '" + name + "'");
}

void Checkpoint::put_params(const nn::NamedParams& params)
{
    for (const auto& [name, p] : params) {
        put(name, p.value());
    }
}

void Checkpoint::load_params(const nn::NamedParams& params) const
{
    for (const auto& [name, p] : params) {
        const Tensor& t = get(name);
        if (t.shape() != p.shape()) {
            throw IncompatibleCheckpoint("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) +
                                         ", model expects " + shape_str(p.shape()));
        }
        ag::Var v = p;
        v.mutable_value() = t;
    }
}

void Checkpoint::put_optimizer(const std::string& prefix, nn::Adam& adam)
{
    const auto& params = adam.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
        put(prefix + ".m." + params[i].first, adam.first_moments()[i]);
        put(prefix + ".v." + params[i].first, adam.second_moments()[i]);
    }
    put(prefix + ".steps", Tensor({1}, std::vector<double>{static_cast<double>(adam.steps())}));
}

void Checkpoint::load_optimizer(const std::string& prefix, nn::Adam& adam) const
{
    const auto& params = adam.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor& m = get(prefix + ".m." + params[i].first);
        const Tensor& v = get(prefix + ".v." + params[i].first);
        if (m.shape() != params[i].second.shape() || v.shape() != params[i].second.shape()) {
            throw IncompatibleCheckpoint("optimizer state for '" + params[i].first + "' has the wrong shape");
        }
        adam.first_moments()[i] = m;
        adam.second_moments()[i] = v;
    }
    adam.set_steps(static_cast<long long>(get(prefix + ".steps")[0]));
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path)
{
    nlohmann::json header;
    header["version"] = Checkpoint::kVersion;
    header["stage"] = ckpt.stage;
    header["config"] = ckpt.config;
    header["meta"] = ckpt.meta;
    auto& list = header["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ckpt.tensors) {
        list.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
        offset += t.size();
    }
    const std::string text = header.dump();

    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError(path.string(), "cannot open for writing");
    }
    out.write(kMagic, sizeof kMagic);
    write_u64(out, Checkpoint::kVersion);
    write_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!out) {
        throw FormatError(path.string(), "write failed");
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& path)
{
    const std::string p = path.string();
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError(p, "cannot open checkpoint");
    }
    char magic[8];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
        throw FormatError(p, "not a checkpoint (bad magic)");
    }
    const auto version = read_u64(in, p);
    if (version != static_cast<std::uint64_t>(Checkpoint::kVersion)) {
        throw FormatError(p, "unsupported checkpoint version " + std::to_string(version));
    }
    const auto length = read_u64(in, p);
    if (length > (1u << 30)) {
        throw FormatError(p, "implausible header length");
    }
    std::string text(length, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(length))) {
        throw FormatError(p, "truncated checkpoint header");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(p, std::string("bad checkpoint header: ") + e.what());
    }

    Checkpoint ckpt;
    try {
        ckpt.stage = header.at("stage").get<std::string>();
        ckpt.config = header.at("config").get<std::string>();
        ckpt.meta = header.at("meta").get<std::map<std::string, std::string>>();
        for (const auto& entry : header.at("tensors")) {
            Tensor t(entry.at("shape").get<Shape>());
            if (!in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)))) {
                throw FormatError(p, "truncated tensor data for '" + entry.at("name").get<std::string>() + "'");
            }
            ckpt.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(p, std::string("bad checkpoint header: ") + e.what());
    }
    return ckpt;
}

} // namespace hmdr
