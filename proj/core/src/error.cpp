#include "sae/error.hpp"

namespace sae {

std::string_view to_string(Errc code) noexcept {
    switch (code) {
        case Errc::InvalidInput: return "InvalidInput";
        case Errc::Io: return "Io";
        case Errc::MissingMeasurement: return "MissingMeasurement";
        case Errc::EmptyArea: return "EmptyArea";
        case Errc::SingleCluster: return "SingleCluster";
        case Errc::KTooLarge: return "KTooLarge";
        case Errc::MissingBoundary: return "MissingBoundary";
        case Errc::ZeroVariance: return "ZeroVariance";
        case Errc::SingularDesign: return "SingularDesign";
        case Errc::ZeroTotalVariance: return "ZeroTotalVariance";
        case Errc::NoConvergence: return "NoConvergence";
        case Errc::ColumnMismatch: return "ColumnMismatch";
        case Errc::SingularAtRho: return "SingularAtRho";
        case Errc::TooFewSuccessfulReplicates: return "TooFewSuccessfulReplicates";
        case Errc::MissingPoverty: return "MissingPoverty";
    }
    return "Unknown";
}

}  // namespace sae
