#pragma once

#include "sae/bootstrap.hpp"
#include "sae/fh.hpp"
#include "sae/sfh.hpp"
#include "sae/weights.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sae::pipeline {

std::string_view version() noexcept;

// One row per area. Every column other than area_id is numeric; empty cells
// and "NA" are missing.
class AreaTable {
public:
    static AreaTable read_csv(const std::filesystem::path& path);
    AreaTable(std::vector<std::string> ids, std::map<std::string, std::vector<std::optional<double>>> columns);

    std::size_t size() const noexcept { return ids_.size(); }
    const std::vector<std::string>& ids() const noexcept { return ids_; }
    std::size_t index_of(const std::string& id) const;

    bool has_column(const std::string& name) const { return columns_.count(name) != 0; }
    // Throws InvalidInput naming the missing column.
    const std::vector<std::optional<double>>& column(const std::string& name) const;
    void set_column(const std::string& name, std::vector<std::optional<double>> values);

    double lat(std::size_t i) const;
    double lon(std::size_t i) const;

private:
    std::vector<std::string> ids_;
    std::map<std::string, std::vector<std::optional<double>>> columns_;
    std::map<std::string, std::size_t> index_;
};

// 1: below 30, 2: [30, 55), 3: 55 and above.
int stratum_of(double poverty_pct);

// Throws MissingPoverty when the column or any value is absent.
std::vector<int> stratify(const AreaTable& table);

struct ResponseSpec {
    std::string name;
    std::string y_column;
    std::string var_column;
    // "anemia" or "stunting": recompute y and var from the survey when one is given.
    std::optional<std::string> indicator;
};

// Model inputs for one response over a subset of areas. Sampled areas are
// those with both y and var present; design columns are an intercept
// followed by the covariates.
struct Domain {
    std::vector<std::size_t> sampled;    // table rows, in subset order
    std::vector<std::size_t> unsampled;  // table rows, in subset order
    std::vector<std::string> terms;
    fh::FhInput input;
    fh::Matrix x_out;
};

Domain build_domain(const AreaTable& table, std::span<const std::size_t> rows, const ResponseSpec& response,
                    const std::vector<std::string>& covariates);

// Two-sided normal p-values of beta / se.
fh::Vector coefficient_p_values(const fh::Vector& beta, const fh::Vector& se);

// Fit reports and the inverse: an FhFit with the coefficients, their
// covariance and sigma2_u, enough for EBLUP and synthetic prediction.
nlohmann::json fh_report(const fh::FhFit& fit, const std::vector<std::string>& terms);
nlohmann::json sfh_report(const sfh::SfhFit& fit, const std::vector<std::string>& terms);
fh::FhFit fh_fit_from_report(const nlohmann::json& report, std::vector<std::string>& terms);

struct SpatialConfig {
    bool enabled = false;
    std::string rule = "contiguity";  // contiguity | knn | distance | file
    std::size_t k = 4;
    double distance_km = 50.0;
    std::optional<std::filesystem::path> weights_file;
    std::string scope = "stratum";  // stratum | national
    sfh::RhoBounds rho_bounds;
    fh::Method method = fh::Method::REML;
    std::optional<double> fixed_rho;
};

struct BootstrapConfig {
    bool enabled = false;
    int replicates = bootstrap::kDefaultReplicates;
    bool spatial = true;  // also bootstrap the spatial model
    bool refit = true;
};

struct PipelineConfig {
    std::filesystem::path areas;
    std::optional<std::filesystem::path> geometry;  // GeoJSON
    std::optional<std::filesystem::path> survey;
    std::vector<ResponseSpec> responses;
    std::vector<std::string> covariates;
    fh::Method method = fh::Method::REML;
    fh::FitOptions fit_options;
    sfh::SfhOptions sfh_options;
    bool stratify = true;
    bool backward = false;
    double alpha = 0.10;
    bool clamp = true;
    SpatialConfig spatial;
    BootstrapConfig bootstrap;
    std::uint64_t seed = 1;
    unsigned threads = 1;
    std::filesystem::path output_dir = "out";
    nlohmann::json raw;  // as given, echoed into the manifest

    // Relative paths resolve against base_dir.
    static PipelineConfig from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir);
    static PipelineConfig read(const std::filesystem::path& path);
};

struct RunSummary {
    std::size_t areas = 0;
    std::map<int, std::size_t> stratum_sizes;
    std::vector<std::string> outputs;  // file names inside output_dir
};

RunSummary run_pipeline(const PipelineConfig& config);

}  // namespace sae::pipeline
