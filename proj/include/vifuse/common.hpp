#pragma once

#include <stdexcept>
#include <string>

namespace vifuse {

// Bad input data: unreadable files, shape mismatches, out-of-range parameters.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Numerical failure: non-finite values where the contract requires finite ones.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace vifuse
