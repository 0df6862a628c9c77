#include "curvereg/error.hpp"

namespace curvereg {

std::string_view error_name(ErrorKind kind) noexcept {
    switch(kind){
        case ErrorKind::MissingFile: return "MissingFile";
        case ErrorKind::HeaderParse: return "HeaderParse";
        case ErrorKind::SizeMismatch: return "SizeMismatch";
        case ErrorKind::IoFailure: return "IoFailure";
        case ErrorKind::MissingChannel: return "MissingChannel";
        case ErrorKind::IndexOutOfRange: return "IndexOutOfRange";
        case ErrorKind::GridMismatch: return "GridMismatch";
        case ErrorKind::InsufficientPoints: return "InsufficientPoints";
        case ErrorKind::DegenerateSystem: return "DegenerateSystem";
        case ErrorKind::NoOverlap: return "NoOverlap";
        case ErrorKind::NoSharedCurves: return "NoSharedCurves";
        case ErrorKind::SingularTransform: return "SingularTransform";
        case ErrorKind::ControlMismatch: return "ControlMismatch";
        case ErrorKind::DegenerateControls: return "DegenerateControls";
        case ErrorKind::InverseNonConvergent: return "InverseNonConvergent";
        case ErrorKind::ChannelMismatch: return "ChannelMismatch";
        case ErrorKind::LocationMismatch: return "LocationMismatch";
        case ErrorKind::EmptyGrid: return "EmptyGrid";
        case ErrorKind::OptimizerBudgetExceeded: return "OptimizerBudgetExceeded";
        case ErrorKind::InvalidArgument: return "InvalidArgument";
    }
    return "Unknown";
}

bool is_numerical(ErrorKind kind) noexcept {
    switch(kind){
        case ErrorKind::DegenerateSystem:
        case ErrorKind::SingularTransform:
        case ErrorKind::DegenerateControls:
        case ErrorKind::InverseNonConvergent:
        case ErrorKind::OptimizerBudgetExceeded:
            return true;
        default:
            return false;
    }
}

Error::Error(ErrorKind kind, const std::string &what)
    : std::runtime_error(std::string(error_name(kind)) + ": " + what), kind_(kind) {}

} // namespace curvereg
