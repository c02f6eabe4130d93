#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sae::direct {

// One child record from a clustered household survey.
struct SurveyRow {
    std::string area_id;
    std::string cluster_id;
    double sampling_weight = 1.0;
    std::optional<double> hemoglobin_g_dl;
    std::optional<bool> stunted;       // precomputed height-for-age flag
    std::optional<double> height_cm;   // used with a GrowthReference when `stunted` is absent
    int age_months = 0;
};

enum DirectFlag : std::uint32_t {
    kNone = 0,
    kVarianceImputed = 1u << 0,
    kSingleCluster = 1u << 1,
    kZeroVariance = 1u << 2,
    kNoDonor = 1u << 3,
};

std::string flags_to_string(std::uint32_t flags);

struct DirectEstimate {
    std::string area_id;
    double y = 0.0;        // weighted proportion
    double var_y = 0.0;    // design variance of y
    double n_eff = 0.0;    // y(1-y)/var_y
    std::size_t n_raw = 0;
    std::size_t n_clusters = 0;
    std::uint32_t flags = kNone;
};

inline constexpr double kAnemiaThresholdGdl = 11.0;

// Strict: a child is anaemic iff hemoglobin < 11 g/dl.
bool anemia_indicator(const SurveyRow& row, double threshold_g_dl = kAnemiaThresholdGdl);

// Height-for-age cutoff by age in months, linearly interpolated. The cutoff
// percentile (2.5th, 10th, ...) is whatever the user-supplied table encodes.
class GrowthReference {
public:
    GrowthReference(std::vector<int> ages_months, std::vector<double> cutoffs_cm);
    static GrowthReference read_csv(const std::filesystem::path& path);

    double cutoff_cm(int age_months) const;

private:
    std::vector<int> ages_;
    std::vector<double> cutoffs_;
};

// Uses the precomputed flag when present, else height against `reference`.
bool stunting_indicator(const SurveyRow& row, const GrowthReference* reference = nullptr);

// Hajek-form Horvitz-Thompson proportion with a with-replacement
// first-stage (cluster) linearization variance. Throws EmptyArea,
// SingleCluster (with the point estimate unusable for variance) and
// InvalidInput for mixed areas or non-positive weights.
DirectEstimate ht_proportion(std::span<const SurveyRow> rows, std::span<const std::uint8_t> indicator);

enum class Indicator { Anemia, Stunting };

struct EstimateOptions {
    Indicator indicator = Indicator::Anemia;
    const GrowthReference* growth = nullptr;
    // area_id -> imputation group; areas absent from the map share one group.
    std::map<std::string, std::string> groups;
};

// Groups rows by area and estimates each. Single-cluster and zero-variance
// areas get var_y imputed as median(var_y * n_raw) over the group's donor
// areas divided by their own n_raw. Output is sorted by area_id.
std::vector<DirectEstimate> estimate_areas(std::span<const SurveyRow> rows, const EstimateOptions& options);

std::vector<SurveyRow> read_survey_csv(const std::filesystem::path& path);
void write_direct_csv(const std::filesystem::path& path, std::span<const DirectEstimate> estimates);

}  // namespace sae::direct
