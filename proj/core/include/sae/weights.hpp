#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace sae::spatial {

struct LonLat {
    double lon = 0.0;
    double lat = 0.0;
};

// Closed or open ring; the closing edge is implied.
using Ring = std::vector<LonLat>;

struct AreaGeo {
    std::string area_id;
    double latitude = 0.0;
    double longitude = 0.0;
    double altitude_km = 0.0;
    std::vector<Ring> boundary;  // empty when only a centroid is known
};

inline constexpr double kEarthRadiusKm = 6371.0088;
inline constexpr double kSnapToleranceDeg = 1e-9;

// Haversine distance in km.
double great_circle_km(double lat1, double lon1, double lat2, double lon2);

// Row-stochastic proximity matrix with w_ij = 1/K_i for j in S_i, zero
// diagonal. Rows with K_i = 0 are islands and stay all-zero.
class SpatialWeights {
public:
    SpatialWeights() = default;
    SpatialWeights(std::vector<std::string> ids, std::vector<std::vector<std::size_t>> neighbors,
                   std::string rule = "custom");

    std::size_t size() const noexcept { return ids_.size(); }
    const std::vector<std::string>& ids() const noexcept { return ids_; }
    const std::string& rule() const noexcept { return rule_; }

    const std::vector<std::size_t>& neighbors(std::size_t i) const { return neighbors_[i]; }
    std::size_t degree(std::size_t i) const { return neighbors_[i].size(); }
    bool is_island(std::size_t i) const { return neighbors_[i].empty(); }
    std::vector<std::size_t> islands() const;
    bool contains(std::size_t i, std::size_t j) const;
    double weight(std::size_t i, std::size_t j) const;
    double total_weight() const;  // sum_ij w_ij = number of non-island rows

    std::size_t index_of(const std::string& id) const;

    Eigen::SparseMatrix<double> matrix() const;
    Eigen::MatrixXd dense() const;

    // Sub-matrix over `keep` (in that order), neighbour sets intersected and
    // rows renormalized.
    SpatialWeights restrict_to(std::span<const std::size_t> keep) const;

    // Same matrix expressed under a different ordering of the same ids.
    SpatialWeights reorder(std::span<const std::string> ids) const;

private:
    std::vector<std::string> ids_;
    std::vector<std::vector<std::size_t>> neighbors_;
    std::unordered_map<std::string, std::size_t> index_;
    std::string rule_;
};

// Areas within L km (great circle) of each other.
SpatialWeights neighbors_distance(std::span<const AreaGeo> geos, double max_km);

// The k nearest areas; ties broken by area_id. Generally asymmetric.
SpatialWeights neighbors_knn(std::span<const AreaGeo> geos, std::size_t k);

// Rook contiguity: areas sharing a boundary segment of positive length.
SpatialWeights neighbors_contiguity(std::span<const AreaGeo> geos, double tolerance_deg = kSnapToleranceDeg);

// Global Moran's I. Throws ZeroVariance for constant input.
double morans_i(std::span<const double> values, const SpatialWeights& w);

std::vector<AreaGeo> read_geojson(const std::filesystem::path& path);
std::vector<AreaGeo> read_centroids_csv(const std::filesystem::path& path);

// CSV `i_id,j_id,w`. Import needs the full id list because islands have no
// triplets; weights are re-derived as 1/K_i and checked against the file.
void write_triplets(const std::filesystem::path& path, const SpatialWeights& w);
SpatialWeights read_triplets(const std::filesystem::path& path, std::span<const std::string> ids);

}  // namespace sae::spatial
