#pragma once

#include <stdexcept>
#include <string>

namespace ldm {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed VOL1 streams, CSV or JSON inputs.
class FormatError : public Error {
public:
    using Error::Error;
};

// Mismatched grid extents, channel counts or label kinds.
class ShapeError : public Error {
public:
    using Error::Error;
};

// A simulation or sampling request that cannot be satisfied.
class InfeasibleError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace ldm
