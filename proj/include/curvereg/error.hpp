#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace curvereg {

enum class ErrorKind {
    MissingFile,
    HeaderParse,
    SizeMismatch,
    IoFailure,
    MissingChannel,
    IndexOutOfRange,
    GridMismatch,
    InsufficientPoints,
    DegenerateSystem,
    NoOverlap,
    NoSharedCurves,
    SingularTransform,
    ControlMismatch,
    DegenerateControls,
    InverseNonConvergent,
    ChannelMismatch,
    LocationMismatch,
    EmptyGrid,
    OptimizerBudgetExceeded,
    InvalidArgument,
};

std::string_view error_name(ErrorKind kind) noexcept;

// Numerical failures (as opposed to bad input data) map to a distinct CLI exit code.
bool is_numerical(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string &what);

    ErrorKind kind() const noexcept { return kind_; }
    std::string_view name() const noexcept { return error_name(kind_); }

private:
    ErrorKind kind_;
};

} // namespace curvereg
