#pragma once

#include <stdexcept>
#include <string>

namespace mkid {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Precondition on arguments or data violated (bad sizes, NaN input, ...).
struct InvalidInput : Error {
    using Error::Error;
};

// Sweep has no visible resonance dip.
struct NoDipFound : Error {
    using Error::Error;
};

// Normal-equation / Jacobian rank deficiency where a unique solution is required.
struct IllConditioned : Error {
    using Error::Error;
};

// Fit stopped at the iteration cap without meeting the convergence tolerances.
// Thrown only by callers that cannot return a best-so-far flag.
struct NonConvergence : Error {
    using Error::Error;
};

// Data cannot identify a parameter (e.g. no temperature lever arm on the gap).
struct DegenerateData : Error {
    using Error::Error;
};

// Conic fit did not produce an ellipse.
struct DegenerateConic : Error {
    using Error::Error;
};

// Requested frequency outside a tabulated profile.
struct FrequencyOutOfRange : Error {
    using Error::Error;
};

// Circle fit residual too large for the data to be treated as an arc.
struct CircleFitFailed : Error {
    using Error::Error;
};

// Moebius readout transform evaluated at its pole.
struct PoleAtUnity : Error {
    using Error::Error;
};

// No threshold crossing found by the onset detector.
struct NoOnset : Error {
    using Error::Error;
};

// Too few points outside the exclusion band to fit a background.
struct InsufficientBackground : Error {
    using Error::Error;
};

// Histogram with no counts.
struct EmptyHistogram : Error {
    using Error::Error;
};

// File / stream problems.
struct IoError : Error {
    using Error::Error;
};

// Malformed or inconsistent configuration.
struct ConfigError : Error {
    using Error::Error;
};

}  // namespace mkid
