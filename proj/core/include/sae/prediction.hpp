#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace sae {

enum class EstimatorKind { Direct, Eblup, Seblup, Synthetic };

std::string_view to_string(EstimatorKind kind) noexcept;

enum PredictionFlag : std::uint32_t {
    kFlagNone = 0,
    kFlagClamped = 1u << 0,
    kFlagIsland = 1u << 1,
    kFlagOutOfSample = 1u << 2,
    kFlagDisconnected = 1u << 3,
    kFlagBoundaryRho = 1u << 4,
    kFlagVarianceImputed = 1u << 5,
};

std::string prediction_flags_to_string(std::uint32_t flags);

// One predicted value for one area. `index` refers to the row order of the
// input the predictor was applied to.
struct Prediction {
    std::size_t index = 0;
    EstimatorKind kind = EstimatorKind::Eblup;
    double value = 0.0;
    double gamma = 0.0;
    std::optional<double> mse;
    std::uint32_t flags = kFlagNone;
};

}  // namespace sae
