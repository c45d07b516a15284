#pragma once

#include <stdexcept>
#include <string>

namespace cbq {

// Error taxonomy shared by the library and the CLI exit codes.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace cbq
