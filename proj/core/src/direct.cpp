#include "sae/direct.hpp"

#include "sae/csv.hpp"
#include "sae/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <unordered_map>

namespace sae::direct {

std::string flags_to_string(std::uint32_t flags) {
    std::string out;
    auto add = [&](std::uint32_t bit, const char* name) {
        if (flags & bit) {
            if (!out.empty()) out += ';';
            out += name;
        }
    };
    add(kVarianceImputed, "variance_imputed");
    add(kSingleCluster, "single_cluster");
    add(kZeroVariance, "zero_variance");
    add(kNoDonor, "no_donor");
    return out;
}

bool anemia_indicator(const SurveyRow& row, double threshold_g_dl) {
    if (!row.hemoglobin_g_dl) {
        throw Error(Errc::MissingMeasurement, "hemoglobin missing for area " + row.area_id);
    }
    return *row.hemoglobin_g_dl < threshold_g_dl;
}

GrowthReference::GrowthReference(std::vector<int> ages_months, std::vector<double> cutoffs_cm)
    : ages_(std::move(ages_months)), cutoffs_(std::move(cutoffs_cm)) {
    if (ages_.empty() || ages_.size() != cutoffs_.size()) {
        throw Error(Errc::InvalidInput, "growth reference needs matching, nonempty age and cutoff columns");
    }
    std::vector<std::size_t> order(ages_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return ages_[a] < ages_[b]; });
    std::vector<int> a;
    std::vector<double> c;
    for (auto i : order) {
        if (!a.empty() && a.back() == ages_[i]) {
            throw Error(Errc::InvalidInput, "duplicate age in growth reference: " + std::to_string(ages_[i]));
        }
        a.push_back(ages_[i]);
        c.push_back(cutoffs_[i]);
    }
    ages_ = std::move(a);
    cutoffs_ = std::move(c);
}

GrowthReference GrowthReference::read_csv(const std::filesystem::path& path) {
    const auto table = csv::Table::read(path);
    const auto age_col = table.require("age_months");
    const auto cut_col = table.require("cutoff_cm");
    std::vector<int> ages;
    std::vector<double> cutoffs;
    for (std::size_t r = 0; r < table.rows(); ++r) {
        ages.push_back(static_cast<int>(table.required_number(r, age_col)));
        cutoffs.push_back(table.required_number(r, cut_col));
    }
    return GrowthReference(std::move(ages), std::move(cutoffs));
}

double GrowthReference::cutoff_cm(int age_months) const {
    if (age_months <= ages_.front()) return cutoffs_.front();
    if (age_months >= ages_.back()) return cutoffs_.back();
    auto it = std::upper_bound(ages_.begin(), ages_.end(), age_months);
    const auto hi = static_cast<std::size_t>(it - ages_.begin());
    const auto lo = hi - 1;
    const double t = static_cast<double>(age_months - ages_[lo]) / static_cast<double>(ages_[hi] - ages_[lo]);
    return cutoffs_[lo] + t * (cutoffs_[hi] - cutoffs_[lo]);
}

bool stunting_indicator(const SurveyRow& row, const GrowthReference* reference) {
    if (row.stunted) return *row.stunted;
    if (reference != nullptr && row.height_cm) return *row.height_cm < reference->cutoff_cm(row.age_months);
    throw Error(Errc::MissingMeasurement, "no stunting flag or usable height for area " + row.area_id);
}

namespace {

struct PointEstimate {
    double y = 0.0;
    double weight_total = 0.0;
};

PointEstimate hajek(std::span<const SurveyRow> rows, std::span<const std::uint8_t> indicator) {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t k = 0; k < rows.size(); ++k) {
        num += rows[k].sampling_weight * (indicator[k] ? 1.0 : 0.0);
        den += rows[k].sampling_weight;
    }
    return {std::clamp(num / den, 0.0, 1.0), den};
}

void validate(std::span<const SurveyRow> rows, std::span<const std::uint8_t> indicator) {
    if (rows.empty()) throw Error(Errc::EmptyArea, "no survey rows");
    if (indicator.size() != rows.size()) {
        throw Error(Errc::InvalidInput, "indicator length does not match rows");
    }
    for (const auto& r : rows) {
        if (r.area_id != rows.front().area_id) {
            throw Error(Errc::InvalidInput, "rows span areas " + rows.front().area_id + " and " + r.area_id);
        }
        if (!(r.sampling_weight > 0.0) || !std::isfinite(r.sampling_weight)) {
            throw Error(Errc::InvalidInput, "non-positive sampling weight in area " + r.area_id);
        }
    }
}

}  // namespace

DirectEstimate ht_proportion(std::span<const SurveyRow> rows, std::span<const std::uint8_t> indicator) {
    validate(rows, indicator);
    const auto point = hajek(rows, indicator);

    // Linearized scores z_k = w_k (I_k - y) / sum(w), totalled per cluster.
    std::vector<std::string> cluster_ids;
    std::unordered_map<std::string, std::size_t> index;
    std::vector<double> totals;
    double abs_scores = 0.0;
    for (std::size_t k = 0; k < rows.size(); ++k) {
        auto [it, inserted] = index.emplace(rows[k].cluster_id, totals.size());
        if (inserted) totals.push_back(0.0);
        const double ik = indicator[k] ? 1.0 : 0.0;
        const double z = rows[k].sampling_weight * (ik - point.y) / point.weight_total;
        totals[it->second] += z;
        abs_scores += std::abs(z);
    }
    const std::size_t n_c = totals.size();
    if (n_c < 2) {
        throw Error(Errc::SingleCluster, "area " + rows.front().area_id + " has a single cluster");
    }
    double mean = 0.0;
    for (double t : totals) mean += t;
    mean /= static_cast<double>(n_c);
    double ss = 0.0;
    for (double t : totals) ss += (t - mean) * (t - mean);

    DirectEstimate est;
    est.area_id = rows.front().area_id;
    est.y = point.y;
    // Spread at rounding level (equal cluster totals) counts as zero.
    const double noise = 16.0 * std::numeric_limits<double>::epsilon() * abs_scores;
    if (ss <= static_cast<double>(n_c) * noise * noise) ss = 0.0;
    est.var_y = static_cast<double>(n_c) / static_cast<double>(n_c - 1) * ss;
    est.n_raw = rows.size();
    est.n_clusters = n_c;
    if (est.var_y > 0.0) {
        est.n_eff = est.y * (1.0 - est.y) / est.var_y;
    } else {
        est.n_eff = static_cast<double>(est.n_raw);
        est.flags |= kZeroVariance;
    }
    return est;
}

std::vector<DirectEstimate> estimate_areas(std::span<const SurveyRow> rows, const EstimateOptions& options) {
    auto has_measurement = [&](const SurveyRow& r) {
        if (options.indicator == Indicator::Anemia) return r.hemoglobin_g_dl.has_value();
        return r.stunted.has_value() || (options.growth != nullptr && r.height_cm.has_value());
    };
    auto indicate = [&](const SurveyRow& r) -> std::uint8_t {
        return options.indicator == Indicator::Anemia ? anemia_indicator(r) : stunting_indicator(r, options.growth);
    };

    std::map<std::string, std::vector<SurveyRow>> by_area;
    for (const auto& r : rows) {
        if (has_measurement(r)) by_area[r.area_id].push_back(r);
    }

    std::vector<DirectEstimate> out;
    out.reserve(by_area.size());
    for (const auto& [area, area_rows] : by_area) {
        std::vector<std::uint8_t> ind;
        ind.reserve(area_rows.size());
        for (const auto& r : area_rows) ind.push_back(indicate(r));
        try {
            out.push_back(ht_proportion(area_rows, ind));
        } catch (const Error& e) {
            if (e.code() != Errc::SingleCluster) throw;
            DirectEstimate est;
            est.area_id = area;
            est.y = hajek(area_rows, ind).y;
            est.var_y = std::nan("");
            est.n_raw = area_rows.size();
            est.n_clusters = 1;
            est.flags = kSingleCluster;
            out.push_back(std::move(est));
        }
    }

    auto group_of = [&](const std::string& area) {
        auto it = options.groups.find(area);
        return it == options.groups.end() ? std::string() : it->second;
    };
    std::map<std::string, std::vector<double>> donors;
    for (const auto& est : out) {
        if ((est.flags & (kSingleCluster | kZeroVariance)) == 0) {
            donors[group_of(est.area_id)].push_back(est.var_y * static_cast<double>(est.n_raw));
        }
    }
    for (auto& est : out) {
        if ((est.flags & (kSingleCluster | kZeroVariance)) == 0) continue;
        auto it = donors.find(group_of(est.area_id));
        if (it == donors.end() || it->second.empty()) {
            est.flags |= kNoDonor;
            continue;
        }
        auto values = it->second;
        const auto mid = values.begin() + static_cast<std::ptrdiff_t>(values.size() / 2);
        std::nth_element(values.begin(), mid, values.end());
        double median = *mid;
        if (values.size() % 2 == 0) {
            median = 0.5 * (median + *std::max_element(values.begin(), mid));
        }
        est.var_y = median / static_cast<double>(est.n_raw);
        est.n_eff = est.var_y > 0.0 ? est.y * (1.0 - est.y) / est.var_y : static_cast<double>(est.n_raw);
        if (!(est.n_eff > 0.0)) est.n_eff = static_cast<double>(est.n_raw);
        est.flags |= kVarianceImputed;
    }
    return out;
}

std::vector<SurveyRow> read_survey_csv(const std::filesystem::path& path) {
    const auto t = csv::Table::read(path);
    const auto c_area = t.require("area_id");
    const auto c_cluster = t.require("cluster_id");
    const auto c_weight = t.require("weight");
    const auto c_hb = t.require("hemoglobin");
    const auto c_stunted = t.require("stunted");
    const auto c_age = t.require("age_months");
    const auto c_height = t.find("height_cm");

    std::vector<SurveyRow> rows;
    rows.reserve(t.rows());
    for (std::size_t r = 0; r < t.rows(); ++r) {
        SurveyRow row;
        row.area_id = t.text(r, c_area);
        row.cluster_id = t.text(r, c_cluster);
        row.sampling_weight = t.required_number(r, c_weight);
        if (!(row.sampling_weight > 0.0)) {
            throw Error(Errc::InvalidInput, path.string() + ": row " + std::to_string(r + 2) + ": weight must be > 0");
        }
        row.hemoglobin_g_dl = t.number(r, c_hb);
        if (row.hemoglobin_g_dl && *row.hemoglobin_g_dl < 0.0) {
            throw Error(Errc::InvalidInput, path.string() + ": negative hemoglobin");
        }
        const auto& s = t.cell(r, c_stunted);
        if (s == "1" || s == "true" || s == "TRUE") {
            row.stunted = true;
        } else if (s == "0" || s == "false" || s == "FALSE") {
            row.stunted = false;
        } else if (!s.empty()) {
            throw Error(Errc::InvalidInput, path.string() + ": bad stunted value '" + s + "'");
        }
        row.age_months = static_cast<int>(t.required_number(r, c_age));
        if (c_height) row.height_cm = t.number(r, *c_height);
        rows.push_back(std::move(row));
    }
    return rows;
}

void write_direct_csv(const std::filesystem::path& path, std::span<const DirectEstimate> estimates) {
    std::ofstream out(path);
    if (!out) throw Error(Errc::Io, "cannot write " + path.string());
    out << "area_id,y,var_y,n_eff,n_raw,flags\n";
    for (const auto& e : estimates) {
        out << csv::quote(e.area_id) << ',' << csv::format_double(e.y) << ',' << csv::format_double(e.var_y) << ','
            << csv::format_double(e.n_eff) << ',' << e.n_raw << ',' << flags_to_string(e.flags) << '\n';
    }
}

}  // namespace sae::direct
