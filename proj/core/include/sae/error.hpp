#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sae {

enum class Errc {
    InvalidInput,
    Io,
    MissingMeasurement,
    EmptyArea,
    SingleCluster,
    KTooLarge,
    MissingBoundary,
    ZeroVariance,
    SingularDesign,
    ZeroTotalVariance,
    NoConvergence,
    ColumnMismatch,
    SingularAtRho,
    TooFewSuccessfulReplicates,
    MissingPoverty,
};

std::string_view to_string(Errc code) noexcept;

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

}  // namespace sae
