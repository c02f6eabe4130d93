#pragma once

#include "sae/fh.hpp"
#include "sae/rng.hpp"
#include "sae/weights.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace sae::simulate {

using fh::Matrix;
using fh::Vector;

// rows x cols grid of square cells, row-major, ids "L0001", "L0002", ...
// Each area carries its square boundary, so rook contiguity recovers the grid.
std::vector<spatial::AreaGeo> lattice(std::size_t rows, std::size_t cols, double cell_deg = 0.1,
                                      double lon0 = -76.0, double lat0 = -12.0);

// Rook weights of the same grid, built from indices without any geometry.
spatial::SpatialWeights rook_lattice(std::size_t rows, std::size_t cols);

struct Draw {
    Vector u;      // area random effects
    Vector theta;  // X beta + u
    Vector y;      // theta + sampling error
};

Draw draw_fh(const Matrix& x, const Vector& beta, double sigma2_u, const Vector& sigma2_e, Engine& eng);

// u = (I - rho W)^-1 eps with eps ~ N(0, sigma2_eps I).
Draw draw_sfh(const Matrix& x, const Vector& beta, double sigma2_eps, double rho, const spatial::SpatialWeights& w,
              const Vector& sigma2_e, Engine& eng);

// Synthetic national dataset: a mainland grid with an irregular coast,
// offshore islands, three poverty strata, census-style covariates, SAR area
// effects per stratum and clustered survey rows for the sampled areas.
struct NationalOptions {
    std::uint64_t seed = 2019;
    std::size_t rows = 44;
    std::size_t cols = 44;
    double cell_deg = 0.25;
    double sample_rate = 0.4;
    std::size_t islands = 8;
};

struct NationalFiles {
    std::filesystem::path areas;     // area table with direct estimates
    std::filesystem::path geometry;  // GeoJSON polygons
    std::filesystem::path survey;    // unit-level rows
    std::filesystem::path truth;     // true prevalences
    std::filesystem::path config;    // pipeline config over the files above
};

NationalFiles write_national_fixture(const std::filesystem::path& dir, const NationalOptions& options = {});

// Lattice dataset for a single model: areas.csv, areas.geojson and
// weights.csv (rook triplets), plus truth.csv.
struct LatticeOptions {
    std::uint64_t seed = 1;
    std::size_t rows = 15;
    std::size_t cols = 20;
    double sigma2 = 0.00401;
    double rho = 0.0;  // 0 gives iid FH effects
    double intercept = 0.4;
    double slope = 0.1;
    double sigma2_e_min = 0.002;
    double sigma2_e_max = 0.02;
    double sample_rate = 1.0;
};

NationalFiles write_lattice_dataset(const std::filesystem::path& dir, const LatticeOptions& options = {});

}  // namespace sae::simulate
