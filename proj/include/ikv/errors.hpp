#pragma once

#include <stdexcept>
#include <string>

namespace ikv {

// Shape/dimension mismatch between operands.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Non-finite or otherwise out-of-domain values.
struct DomainError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Index or position outside its valid range.
struct IndexError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

// Malformed user input (tokens, corpora, configs).
struct InputError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Cache or sequence capacity exceeded.
struct CapacityError : std::length_error {
    using std::length_error::length_error;
};

// Malformed binary file; carries the byte offset of the failure.
struct FormatError : std::runtime_error {
    FormatError(const std::string& what, std::uint64_t offset)
        : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"),
          byte_offset(offset) {}
    std::uint64_t byte_offset;
};

}  // namespace ikv
