#pragma once

#include <stdexcept>
#include <string>

namespace abltx {

// Input or contract violation: malformed files, mismatched headers, bad
// arguments. The CLI maps this to exit code 2.
class ContractError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operating-system level failure (open, read, write, rename). Exit code 3.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace abltx
