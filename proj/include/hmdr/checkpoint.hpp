#pragma once

// Binary tensor archive: magic "HMDRCKPT", format version, a JSON header
// (metadata, tensor names, shapes, offsets) and raw little-endian doubles.
// Round trips are bit-exact.

#include "hmdr/nn.hpp"
#include "hmdr/tensor.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace hmdr {

struct Checkpoint {
    static constexpr int kVersion = 1;

    std::string stage;                          // e.g. "init", "stage1", "stage2"
    std::string config;                         // serialized configuration (JSON text)
    std::map<std::string, std::string> meta;    // free-form string metadata
    std::vector<std::pair<std::string, Tensor>> tensors;

    void put(const std::string& name, Tensor value);
    bool has(const std::string& name) const;
    /// Throws IncompatibleCheckpoint if the name is absent.
    const Tensor& get(const std::string& name) const;

    /// Stores parameter values under their names.
    void put_params(const nn::NamedParams& params);
    /// Copies stored values into `params`; every name must be present with a matching shape.
    void load_params(const nn::NamedParams& params) const;
    /// Adam moments and step count under `prefix`.
    void put_optimizer(const std::string& prefix, nn::Adam& adam);
    void load_optimizer(const std::string& prefix, nn::Adam& adam) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
/// Throws FormatError for missing, truncated or foreign files.
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace hmdr
