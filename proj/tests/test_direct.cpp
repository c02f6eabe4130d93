#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sae/direct.hpp"
#include "sae/error.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

using namespace sae;
using namespace sae::direct;

namespace {

SurveyRow row(const std::string& cluster, double w, std::optional<double> hb = std::nullopt) {
    SurveyRow r;
    r.area_id = "A";
    r.cluster_id = cluster;
    r.sampling_weight = w;
    r.hemoglobin_g_dl = hb;
    return r;
}

// Ratio-estimator form of the linearized variance, written out by cluster:
// R = Y/X, var = n/(n-1) sum_c (e_c - mean e)^2 / X^2, e_c = y_c - R x_c.
double oracle_variance(const std::vector<SurveyRow>& rows, const std::vector<std::uint8_t>& ind) {
    std::map<std::string, std::pair<double, double>> by_cluster;  // (sum w I, sum w)
    double total_y = 0.0, total_x = 0.0;
    for (std::size_t k = 0; k < rows.size(); ++k) {
        auto& c = by_cluster[rows[k].cluster_id];
        c.first += rows[k].sampling_weight * ind[k];
        c.second += rows[k].sampling_weight;
        total_y += rows[k].sampling_weight * ind[k];
        total_x += rows[k].sampling_weight;
    }
    const double r = total_y / total_x;
    std::vector<double> e;
    for (const auto& [id, c] : by_cluster) e.push_back(c.first - r * c.second);
    double mean = 0.0;
    for (double v : e) mean += v;
    mean /= static_cast<double>(e.size());
    double ss = 0.0;
    for (double v : e) ss += (v - mean) * (v - mean);
    const double n = static_cast<double>(e.size());
    return n / (n - 1.0) * ss / (total_x * total_x);
}

}  // namespace

TEST_CASE("anemia indicator uses a strict 11 g/dl threshold") {
    CHECK(anemia_indicator(row("c", 1.0, 10.9)));
    CHECK_FALSE(anemia_indicator(row("c", 1.0, 11.0)));
    CHECK_FALSE(anemia_indicator(row("c", 1.0, 13.2)));
}

TEST_CASE("anemia indicator requires a hemoglobin reading") {
    try {
        anemia_indicator(row("c", 1.0));
        FAIL("expected MissingMeasurement");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::MissingMeasurement);
    }
}

TEST_CASE("stunting indicator: precomputed flag, growth reference, or error") {
    SurveyRow r = row("c", 1.0);
    r.stunted = true;
    CHECK(stunting_indicator(r));
    r.stunted.reset();
    r.age_months = 24;
    r.height_cm = 80.0;
    const GrowthReference ref({12, 36}, {70.0, 90.0});  // 80 cm at 24 months
    CHECK(ref.cutoff_cm(24) == doctest::Approx(80.0));
    CHECK_FALSE(stunting_indicator(r, &ref));
    r.height_cm = 79.9;
    CHECK(stunting_indicator(r, &ref));
    r.height_cm.reset();
    CHECK_THROWS_AS(stunting_indicator(r, &ref), Error);
}

TEST_CASE("equal weights reduce to the sample mean") {
    std::vector<SurveyRow> rows{row("1", 1), row("2", 1), row("3", 1), row("4", 1)};
    const std::vector<std::uint8_t> ind{1, 1, 0, 0};
    const auto est = ht_proportion(rows, ind);
    CHECK(est.y == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(est.n_raw == 4);
    CHECK(est.n_clusters == 4);
}

TEST_CASE("weighted mean by hand") {
    std::vector<SurveyRow> rows{row("1", 3), row("2", 1)};
    const std::vector<std::uint8_t> ind{1, 0};
    CHECK(ht_proportion(rows, ind).y == doctest::Approx(0.75).epsilon(1e-15));
}

TEST_CASE("30 rows over 5 clusters match the brute-force linearization") {
    std::mt19937_64 gen(7);
    std::uniform_real_distribution<double> wd(1.0, 50.0);
    std::bernoulli_distribution bd(0.4);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<SurveyRow> rows;
        std::vector<std::uint8_t> ind;
        for (int k = 0; k < 30; ++k) {
            rows.push_back(row(std::to_string(k % 5), wd(gen)));
            ind.push_back(bd(gen) ? 1 : 0);
        }
        double num = 0.0, den = 0.0;
        for (std::size_t k = 0; k < rows.size(); ++k) {
            num += rows[k].sampling_weight * ind[k];
            den += rows[k].sampling_weight;
        }
        const auto est = ht_proportion(rows, ind);
        CHECK(est.y == doctest::Approx(num / den).epsilon(1e-14));
        CHECK(est.var_y == doctest::Approx(oracle_variance(rows, ind)).epsilon(1e-12));
        CHECK(est.var_y >= 0.0);
        if (est.var_y > 0.0) CHECK(est.n_eff == doctest::Approx(est.y * (1 - est.y) / est.var_y));
    }
}

TEST_CASE("estimate is invariant to weight rescaling and row duplication") {
    std::mt19937_64 gen(11);
    std::uniform_real_distribution<double> wd(1.0, 20.0);
    std::vector<SurveyRow> rows;
    std::vector<std::uint8_t> ind;
    for (int k = 0; k < 17; ++k) {
        rows.push_back(row(std::to_string(k % 4), wd(gen)));
        ind.push_back(k % 3 == 0 ? 1 : 0);
    }
    const auto base = ht_proportion(rows, ind);
    auto scaled = rows;
    for (auto& r : scaled) r.sampling_weight *= 7.25;
    CHECK(ht_proportion(scaled, ind).y == doctest::Approx(base.y).epsilon(1e-14));
    auto doubled = rows;
    doubled.insert(doubled.end(), rows.begin(), rows.end());
    auto ind2 = ind;
    ind2.insert(ind2.end(), ind.begin(), ind.end());
    CHECK(ht_proportion(doubled, ind2).y == doctest::Approx(base.y).epsilon(1e-14));
}

TEST_CASE("error conditions") {
    std::vector<SurveyRow> none;
    std::vector<std::uint8_t> no_ind;
    try {
        ht_proportion(none, no_ind);
        FAIL("expected EmptyArea");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::EmptyArea);
    }
    std::vector<SurveyRow> one{row("1", 1), row("1", 2)};
    std::vector<std::uint8_t> ind{1, 0};
    try {
        ht_proportion(one, ind);
        FAIL("expected SingleCluster");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::SingleCluster);
    }
    auto mixed = one;
    mixed[1].area_id = "B";
    mixed[1].cluster_id = "2";
    CHECK_THROWS_AS(ht_proportion(mixed, ind), Error);
    auto bad = one;
    bad[1].cluster_id = "2";
    bad[0].sampling_weight = 0.0;
    CHECK_THROWS_AS(ht_proportion(bad, ind), Error);
}

TEST_CASE("equal cluster totals give an exact zero variance, flagged") {
    std::vector<SurveyRow> rows{row("1", 3), row("1", 3), row("2", 3), row("2", 3)};
    const std::vector<std::uint8_t> ind{1, 0, 1, 0};
    const auto est = ht_proportion(rows, ind);
    CHECK(est.var_y == 0.0);
    CHECK((est.flags & kZeroVariance) != 0);
}

TEST_CASE("single-cluster areas get an imputed, flagged variance") {
    // Donors B and C: var*n = v_B*n_B and v_C*n_C; A is single-cluster.
    std::vector<SurveyRow> rows;
    auto add = [&](const std::string& area, const std::string& cl, double w, double hb) {
        SurveyRow r = row(cl, w, hb);
        r.area_id = area;
        rows.push_back(r);
    };
    add("A", "a1", 1, 10);
    add("A", "a1", 1, 12);
    add("A", "a1", 1, 12);
    add("B", "b1", 1, 10);
    add("B", "b2", 2, 12);
    add("B", "b3", 1, 10.5);
    add("C", "c1", 1, 12);
    add("C", "c2", 1, 10);
    add("C", "c2", 3, 12);
    EstimateOptions opt;
    const auto est = estimate_areas(rows, opt);
    REQUIRE(est.size() == 3);
    CHECK(est[0].area_id == "A");
    CHECK((est[0].flags & kSingleCluster) != 0);
    CHECK((est[0].flags & kVarianceImputed) != 0);
    const double vb = est[1].var_y * static_cast<double>(est[1].n_raw);
    const double vc = est[2].var_y * static_cast<double>(est[2].n_raw);
    CHECK(est[0].var_y == doctest::Approx(0.5 * (vb + vc) / 3.0).epsilon(1e-14));
    CHECK(est[0].y == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("rows without the measurement are skipped; CSV round trip") {
    const auto dir = std::filesystem::temp_directory_path() / "sae_test_direct";
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "survey.csv");
        out << "area_id,cluster_id,weight,hemoglobin,stunted,age_months\n"
               "X,1,2,10.5,1,12\n"
               "X,2,2,,0,20\n"
               "X,2,1,12.5,0,30\n"
               "X,3,1,11.0,1,40\n";
    }
    const auto rows = read_survey_csv(dir / "survey.csv");
    REQUIRE(rows.size() == 4);
    CHECK_FALSE(rows[1].hemoglobin_g_dl.has_value());
    EstimateOptions opt;
    const auto est = estimate_areas(rows, opt);
    REQUIRE(est.size() == 1);
    CHECK(est[0].n_raw == 3);
    CHECK(est[0].y == doctest::Approx(0.5));
    opt.indicator = Indicator::Stunting;
    const auto st = estimate_areas(rows, opt);
    CHECK(st[0].n_raw == 4);
    CHECK(st[0].y == doctest::Approx(0.5));
    write_direct_csv(dir / "direct.csv", est);
    std::ifstream in(dir / "direct.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "area_id,y,var_y,n_eff,n_raw,flags");
}
