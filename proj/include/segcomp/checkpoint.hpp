#pragma once

#include <filesystem>
#include <optional>

#include "segcomp/compensation.hpp"
#include "segcomp/netcore.hpp"

namespace segcomp {

struct Checkpoint {
    SegModel model;
    std::optional<CompensationMatrix> comp;
};

// Versioned binary: a text header (magic, version, shape metadata), then all
// parameters as little-endian 64-bit floats in declaration order (model
// parameters, batchnorm running stats, then compensation parameters when
// present).
void save_checkpoint(const std::filesystem::path& file, const SegModel& model,
                     const CompensationMatrix* comp);
Checkpoint load_checkpoint(const std::filesystem::path& file);

}  // namespace segcomp
