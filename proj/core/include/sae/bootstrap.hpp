#pragma once

#include "sae/fh.hpp"
#include "sae/rng.hpp"
#include "sae/sfh.hpp"
#include "sae/weights.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace sae::bootstrap {

enum class Model { FH, SFH };

inline constexpr int kDefaultReplicates = 400;
inline constexpr int kMinReportedReplicates = 50;

struct BootstrapSpec {
    int replicates = kDefaultReplicates;
    std::uint64_t seed = 1;
    Model model = Model::FH;
    fh::Method refit_method = fh::Method::REML;
    // false: known-parameter mode, the predictor reuses the fitted beta and
    // variance components instead of re-estimating them per replicate.
    bool refit = true;
    unsigned threads = 1;
    fh::FitOptions fh_options;
    sfh::SfhOptions sfh_options;
};

// Per-area bootstrap MSE. Rows are the in-sample areas followed by the
// out-of-sample areas (when supplied), in input order.
struct MseTable {
    std::vector<double> prediction;
    std::vector<double> mse;
    std::vector<double> rrmse;
    int b_effective = 0;
    int replicates = 0;
    bool below_reporting_minimum = false;  // replicates < 50
};

// Out-of-sample areas for a synthetic / spatial prediction.
struct OutOfSample {
    std::vector<std::string> ids;
    fh::Matrix x;
    const spatial::SpatialWeights* full_w = nullptr;  // SFH only
};

// Draws u = (I - rho W)^-1 eps, eps ~ N(0, sigma2 I), by a sparse LU solve.
class SarSampler {
public:
    SarSampler(const spatial::SpatialWeights& w, double sigma2, double rho);
    fh::Vector draw(Engine& eng) const;

private:
    double sigma_;
    Eigen::Index n_;
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu_;
};

MseTable bootstrap_mse_fh(const fh::FhInput& input, const fh::FhFit& fit, const BootstrapSpec& spec,
                          const OutOfSample* out_of_sample = nullptr);

MseTable bootstrap_mse_sfh(const sfh::SfhInput& input, const sfh::SfhFit& fit, const BootstrapSpec& spec,
                           const OutOfSample* out_of_sample = nullptr);

void write_mse_csv(const std::filesystem::path& path, std::span<const std::string> area_ids, const MseTable& table);

}  // namespace sae::bootstrap
