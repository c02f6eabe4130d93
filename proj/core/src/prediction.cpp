#include "sae/prediction.hpp"

namespace sae {

std::string_view to_string(EstimatorKind kind) noexcept {
    switch (kind) {
        case EstimatorKind::Direct: return "direct";
        case EstimatorKind::Eblup: return "eblup";
        case EstimatorKind::Seblup: return "seblup";
        case EstimatorKind::Synthetic: return "synthetic";
    }
    return "unknown";
}

std::string prediction_flags_to_string(std::uint32_t flags) {
    std::string out;
    auto add = [&](std::uint32_t bit, const char* name) {
        if (flags & bit) {
            if (!out.empty()) out += ';';
            out += name;
        }
    };
    add(kFlagClamped, "clamped");
    add(kFlagIsland, "island");
    add(kFlagOutOfSample, "out_of_sample");
    add(kFlagDisconnected, "disconnected");
    add(kFlagBoundaryRho, "boundary_rho");
    add(kFlagVarianceImputed, "variance_imputed");
    return out;
}

}  // namespace sae
