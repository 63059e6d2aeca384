#ifndef PLNBENCH_ERRORS_HPP
#define PLNBENCH_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace plnbench {

// Base class for all library errors. The CLI maps each subtype to a
// distinct exit code.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File missing, unreadable, or empty.
struct io_error : error {
    using error::error;
};

// Bad inputs: malformed files, invariant violations, out-of-range arguments.
struct validation_error : error {
    using error::error;
};

// Numerical failure: non-finite objectives, singular matrices, iteration caps.
struct convergence_error : error {
    using error::error;
};

} // namespace plnbench

#endif
