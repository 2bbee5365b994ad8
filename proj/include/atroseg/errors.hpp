#pragma once

#include <stdexcept>
#include <string>

namespace atroseg {

// Usage / configuration problems (CLI exit code 2).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// File format / filesystem problems (CLI exit code 2).
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite loss during training (CLI exit code 3).
struct DivergenceError : std::runtime_error {
    DivergenceError(int stage, int epoch, int batch, double lr, const std::string& msg)
        : std::runtime_error(msg), stage(stage), epoch(epoch), batch(batch), lr(lr) {}
    int stage;
    int epoch;
    int batch;
    double lr;
};

}  // namespace atroseg
