#pragma once

// Versioned binary checkpoint container.
//
// A checkpoint stores a kind tag ("autoencoder", "denoiser", ...), the full
// config echo it was trained under plus that echo's hash, free-form string
// metadata, named scalars (e.g. the latent normalization constant), and named
// double-precision tensor blocks (the parameter state of a ParamRegistry).
// Loading verifies magic, version, and internal size consistency; `require`
// additionally refuses checkpoints whose kind or config hash do not match the
// run that is trying to consume them.

#include <cstdint>
#include <map>
#include <string>

#include "cvox/core.hpp"
#include "cvox/tensor.hpp"

namespace cvox::ckpt {

struct Checkpoint {
    std::string kind;
    uint64_t config_hash = 0;
    std::string config_echo;
    std::map<std::string, std::string> meta;
    std::map<std::string, double> scalars;
    std::map<std::string, ad::Tensor<double>> blocks;

    // Fetch helpers that throw Error::data with the missing name.
    const std::string& meta_at(const std::string& key) const;
    double scalar_at(const std::string& key) const;
};

// Serializes to/from the binary container format (little-endian).
std::string serialize(const Checkpoint& c);
Checkpoint deserialize(const std::string& bytes);

// File convenience wrappers; save writes atomically via a temp file rename.
void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Refuses a checkpoint whose kind or config hash does not match the caller's.
void require(const Checkpoint& c, const std::string& kind, uint64_t config_hash);

}  // namespace cvox::ckpt
