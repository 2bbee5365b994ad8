#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "atroseg/model.hpp"
#include "atroseg/pipeline.hpp"

namespace atroseg {

// Plain-text run configuration: one "key = value" per line, '#' starts a
// comment, unknown keys are rejected. serialize() emits the canonical
// normalized form (fixed key order, no comments), a fixpoint of parse.
struct RunConfig {
    TrainConfig train;
    ModelConfig model;
    std::optional<std::string> data_dir;
    std::optional<std::string> out_dir;

    bool operator==(const RunConfig&) const = default;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string serialize_run_config(const RunConfig& config);

}  // namespace atroseg
