#pragma once

#include <stdexcept>
#include <string>

namespace dwn {

/// Invalid configuration, incompatible shapes, malformed inputs.
class config_error : public std::runtime_error {
public:
    explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

/// File format or filesystem failures.
class io_error : public std::runtime_error {
public:
    explicit io_error(const std::string& what) : std::runtime_error(what) {}
};

/// Non-finite values in parameters or losses, degenerate partitions.
class divergence_error : public std::runtime_error {
public:
    explicit divergence_error(const std::string& what) : std::runtime_error(what) {}
};

} // namespace dwn
