#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sae/csv.hpp"
#include "sae/error.hpp"
#include "sae/pipeline.hpp"
#include "sae/simulate.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace sae;
using namespace sae::pipeline;
namespace fs = std::filesystem;

namespace {

template <class F>
Errc error_code(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an sae::Error");
    return Errc::InvalidInput;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("sae_pipeline_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

using Col = std::vector<std::optional<double>>;

AreaTable small_table() {
    std::map<std::string, Col> cols;
    cols["lat"] = {-10.0, -10.1, -10.2, -10.3};
    cols["lon"] = {-75.0, -75.1, -75.2, -75.3};
    cols["y"] = {0.2, std::nullopt, 0.4, 0.3};
    cols["y_var"] = {0.01, std::nullopt, 0.02, 0.015};
    cols["x1"] = {0.1, 0.5, 0.9, 0.3};
    cols["poverty_pct"] = {10.0, 30.0, 54.9, 55.0};
    return AreaTable({"a", "b", "c", "d"}, cols);
}

nlohmann::json lattice_config(const fs::path& dir) {
    std::ifstream in(dir / "config.json");
    return nlohmann::json::parse(in);
}

RunSummary run(const nlohmann::json& doc, const fs::path& base) {
    return run_pipeline(PipelineConfig::from_json(doc, base));
}

}  // namespace

TEST_CASE("poverty strata boundaries") {
    CHECK(stratum_of(0.0) == 1);
    CHECK(stratum_of(29.999) == 1);
    CHECK(stratum_of(30.0) == 2);
    CHECK(stratum_of(54.999) == 2);
    CHECK(stratum_of(55.0) == 3);
    CHECK(stratum_of(100.0) == 3);
    CHECK(stratify(small_table()) == std::vector<int>{1, 2, 2, 3});
}

TEST_CASE("missing poverty is an error") {
    auto t = small_table();
    t.set_column("poverty_pct", {10.0, std::nullopt, 20.0, 30.0});
    CHECK(error_code([&] { stratify(t); }) == Errc::MissingPoverty);
    std::map<std::string, Col> cols{{"lat", {1.0}}, {"lon", {1.0}}};
    CHECK(error_code([&] { stratify(AreaTable({"a"}, cols)); }) == Errc::MissingPoverty);
}

TEST_CASE("area table validation") {
    std::map<std::string, Col> cols{{"lat", {1.0, 2.0}}, {"lon", {1.0, 2.0}}};
    CHECK_THROWS_AS(AreaTable({"a", "a"}, cols), Error);
    CHECK_THROWS_AS(AreaTable({"a", ""}, cols), Error);
    cols["lon"] = {1.0, std::nullopt};
    CHECK_THROWS_AS(AreaTable({"a", "b"}, cols), Error);
    cols["lon"] = {1.0, 2.0};
    cols["poverty_pct"] = {50.0, 101.0};
    CHECK_THROWS_AS(AreaTable({"a", "b"}, cols), Error);
    const auto t = small_table();
    CHECK(t.index_of("c") == 2);
    CHECK_THROWS_AS(t.index_of("z"), Error);
    CHECK_THROWS_AS(t.column("nope"), Error);
}

TEST_CASE("domain splits sampled and unsampled areas") {
    const auto t = small_table();
    const std::vector<std::size_t> rows{0, 1, 2, 3};
    const ResponseSpec resp{"y", "y", "y_var", std::nullopt};
    const auto d = build_domain(t, rows, resp, {"x1"});
    CHECK(d.sampled == std::vector<std::size_t>{0, 2, 3});
    CHECK(d.unsampled == std::vector<std::size_t>{1});
    CHECK(d.terms == std::vector<std::string>{"intercept", "x1"});
    REQUIRE(d.input.x.rows() == 3);
    CHECK(d.input.x(1, 0) == 1.0);
    CHECK(d.input.x(1, 1) == 0.9);
    CHECK(d.input.y[2] == 0.3);
    CHECK(d.input.sigma2_e[1] == 0.02);
    REQUIRE(d.x_out.rows() == 1);
    CHECK(d.x_out(0, 1) == 0.5);

    const std::vector<std::size_t> sub{2, 0};
    CHECK(build_domain(t, sub, resp, {}).sampled == std::vector<std::size_t>{2, 0});

    auto bad = small_table();
    bad.set_column("y_var", {0.01, 0.01, 0.02, 0.015});
    CHECK_THROWS_AS(build_domain(bad, rows, resp, {"x1"}), Error);
    bad = small_table();
    bad.set_column("y", {1.2, std::nullopt, 0.4, 0.3});
    CHECK_THROWS_AS(build_domain(bad, rows, resp, {"x1"}), Error);
    bad = small_table();
    bad.set_column("y_var", {-0.01, std::nullopt, 0.02, 0.015});
    CHECK_THROWS_AS(build_domain(bad, rows, resp, {"x1"}), Error);
    bad = small_table();
    bad.set_column("x1", {0.1, 1.5, 0.9, 0.3});
    CHECK_THROWS_AS(build_domain(bad, rows, resp, {"x1"}), Error);
    bad.set_column("x1", {0.1, std::nullopt, 0.9, 0.3});
    CHECK_THROWS_AS(build_domain(bad, rows, resp, {"x1"}), Error);
    CHECK_THROWS_AS(build_domain(t, rows, resp, {"x9"}), Error);
}

TEST_CASE("coefficient p-values and fit reports") {
    const auto p = coefficient_p_values(fh::Vector{{1.959963984540054, 0.0, -1.0}}, fh::Vector{{1.0, 1.0, 0.5}});
    CHECK(p[0] == doctest::Approx(0.05).epsilon(1e-9));
    CHECK(p[1] == doctest::Approx(1.0));
    CHECK(p[2] == doctest::Approx(0.04550026389635842).epsilon(1e-9));

    fh::FhFit f;
    f.beta = fh::Vector{{0.3, -0.25}};
    f.beta_cov = fh::Matrix{{0.01, 0.002}, {0.002, 0.04}};
    f.beta_se = fh::Vector{{0.1, 0.2}};
    f.sigma2_u = 0.0123;
    f.method = fh::Method::REML;
    f.converged = true;
    const auto rep = fh_report(f, {"intercept", "x1"});
    std::vector<std::string> terms;
    const auto back = fh_fit_from_report(rep, terms);
    CHECK(terms == std::vector<std::string>{"intercept", "x1"});
    CHECK(back.beta == f.beta);
    CHECK(back.beta_cov == f.beta_cov);
    CHECK(back.sigma2_u == f.sigma2_u);
    auto broken = rep;
    broken["model"] = "SFH";
    CHECK_THROWS_AS(fh_fit_from_report(broken, terms), Error);
}

TEST_CASE("config parsing") {
    const nlohmann::json base = {{"areas", "a.csv"}, {"responses", {"anemia"}}};
    const auto c = PipelineConfig::from_json(base, "/data");
    CHECK(c.areas == fs::path("/data/a.csv"));
    REQUIRE(c.responses.size() == 1);
    CHECK(c.responses[0].var_column == "anemia_var");
    CHECK(c.responses[0].indicator == std::optional<std::string>("anemia"));
    CHECK(c.method == fh::Method::REML);
    CHECK_FALSE(c.spatial.enabled);
    CHECK_FALSE(c.bootstrap.enabled);
    CHECK(c.bootstrap.replicates == 400);
    CHECK(c.output_dir == fs::path("/data/out"));

    auto with = [&](const char* key, nlohmann::json value) {
        auto d = base;
        d[key] = std::move(value);
        return d;
    };
    auto bad = [&](const nlohmann::json& d) { return error_code([&] { PipelineConfig::from_json(d, "."); }); };
    CHECK(bad(with("responses", nlohmann::json::array())) == Errc::InvalidInput);
    CHECK(bad(with("method", "bogus")) == Errc::InvalidInput);
    CHECK(bad(with("spatial", {{"rule", "queen"}})) == Errc::InvalidInput);
    CHECK(bad(with("spatial", {{"scope", "planet"}})) == Errc::InvalidInput);
    CHECK(bad(with("spatial", {{"rule", "file"}})) == Errc::InvalidInput);
    CHECK(bad(with("spatial", {{"method", "FH"}})) == Errc::InvalidInput);
    CHECK(bad(with("spatial", {{"rho_bounds", {0.5}}})) == Errc::InvalidInput);
    CHECK(bad(with("bootstrap", {{"replicates", 0}})) == Errc::InvalidInput);
    CHECK(bad(with("selection", {{"alpha", 1.5}})) == Errc::InvalidInput);
    CHECK(bad(with("responses", {{{"name", "z"}, {"indicator", "obesity"}}})) == Errc::InvalidInput);
    CHECK(bad(nlohmann::json{{"responses", {"y"}}}) == Errc::InvalidInput);
    CHECK(bad(with("seed", "seven")) == Errc::InvalidInput);

    const auto wf = PipelineConfig::from_json(with("spatial", {{"weights_file", "w.csv"}, {"fixed_rho", 0.2}}), "/d");
    CHECK(wf.spatial.rule == "file");
    CHECK(wf.spatial.weights_file == std::optional<fs::path>("/d/w.csv"));
    CHECK(wf.sfh_options.fixed_rho == std::optional<double>(0.2));

    const auto dir = scratch("config");
    CHECK(error_code([&] { PipelineConfig::read(dir / "missing.json"); }) == Errc::Io);
    std::ofstream(dir / "broken.json") << "{ not json";
    CHECK(error_code([&] { PipelineConfig::read(dir / "broken.json"); }) == Errc::InvalidInput);
}

TEST_CASE("non-spatial run: one row per area, direct / EBLUP / synthetic only") {
    const auto dir = scratch("fh");
    simulate::LatticeOptions opt;
    opt.rows = 8;
    opt.cols = 9;
    opt.rho = 0.0;
    opt.sigma2 = 0.005;
    opt.sample_rate = 0.7;
    opt.seed = 5;
    simulate::write_lattice_dataset(dir, opt);
    const auto summary = run(lattice_config(dir), dir);
    CHECK(summary.areas == 72);

    const auto pred = csv::Table::read(dir / "out" / "predictions.csv");
    const auto c_kind = pred.require("estimator_kind");
    std::set<std::string> kinds;
    for (std::size_t r = 0; r < pred.rows(); ++r) kinds.insert(pred.text(r, c_kind));
    CHECK(kinds == std::set<std::string>{"direct", "eblup", "synthetic"});

    const auto est = csv::Table::read(dir / "out" / "estimates_y.csv");
    REQUIRE(est.rows() == 72);
    std::set<std::string> ids;
    const auto c_id = est.require("area_id"), c_s = est.require("sampled"), c_k = est.require("estimator_kind");
    const auto c_f = est.require("flags");
    for (std::size_t r = 0; r < est.rows(); ++r) {
        ids.insert(est.text(r, c_id));
        const bool sampled = est.text(r, c_s) == "1";
        CHECK(est.text(r, c_k) == (sampled ? "eblup" : "synthetic"));
        CHECK((est.text(r, c_f).find("out_of_sample") != std::string::npos) == !sampled);
    }
    CHECK(ids.size() == 72);

    const auto gj = nlohmann::json::parse(slurp(dir / "out" / "estimates_y.geojson"));
    CHECK(gj["type"] == "FeatureCollection");
    REQUIRE(gj["features"].size() == 72);
    for (const auto& f : gj["features"]) {
        CHECK(f["type"] == "Feature");
        CHECK(f["geometry"]["type"] == "Polygon");
        for (const char* k : {"area_id", "value", "mse", "estimator_kind"}) CHECK(f["properties"].contains(k));
    }
}

TEST_CASE("fixed rho = 0 makes SEBLUP equal EBLUP") {
    const auto dir = scratch("rho0");
    simulate::LatticeOptions opt;
    opt.rows = 7;
    opt.cols = 8;
    opt.rho = 0.5;
    opt.seed = 9;
    opt.sample_rate = 0.8;
    simulate::write_lattice_dataset(dir, opt);
    auto cfg = lattice_config(dir);
    cfg["spatial"]["fixed_rho"] = 0.0;
    run(cfg, dir);
    const auto est = csv::Table::read(dir / "out" / "estimates_y.csv");
    const auto c_e = est.require("eblup"), c_s = est.require("seblup");
    REQUIRE(est.rows() == 56);
    for (std::size_t r = 0; r < est.rows(); ++r) {
        CHECK(std::abs(est.required_number(r, c_e) - est.required_number(r, c_s)) <= 1e-8);
    }
}

TEST_CASE("reruns are byte-identical, whatever the thread count") {
    const auto dir = scratch("rerun");
    simulate::LatticeOptions opt;
    opt.rows = 6;
    opt.cols = 7;
    opt.rho = 0.6;
    opt.seed = 21;
    opt.sample_rate = 0.75;
    simulate::write_lattice_dataset(dir, opt);
    auto cfg = lattice_config(dir);
    cfg["bootstrap"] = {{"enabled", true}, {"replicates", 60}};
    cfg["responses"].push_back({{"name", "y2"}, {"y", "y"}, {"var", "y_var"}});
    cfg["output_dir"] = "a";
    const auto s1 = run(cfg, dir);
    cfg["output_dir"] = "b";
    cfg["threads"] = 3;
    run(cfg, dir);
    REQUIRE_FALSE(s1.outputs.empty());
    for (const auto& name : s1.outputs) {
        if (name == "manifest.json") continue;
        INFO(name);
        CHECK(slurp(dir / "a" / name) == slurp(dir / "b" / name));
    }
    // The manifest echoes the thread count; everything else must agree.
    auto ma = nlohmann::json::parse(slurp(dir / "a" / "manifest.json"));
    auto mb = nlohmann::json::parse(slurp(dir / "b" / "manifest.json"));
    ma["config"].erase("threads");
    mb["config"].erase("threads");
    CHECK(ma == mb);
}

TEST_CASE("negative predictions are clamped and flagged") {
    // A steep altitude trend fitted on low areas extrapolates below zero for
    // the two high, unsampled ones.
    const auto dir = scratch("clamp");
    {
        std::ofstream out(dir / "areas.csv");
        out << "area_id,lat,lon,y,y_var,altitude_km\n";
        for (int i = 0; i < 12; ++i) {
            const double alt = 0.1 * i;
            const double y = 0.6 - 0.45 * alt + (i % 3 == 0 ? 0.03 : -0.015);
            out << "c" << i << ',' << -10.0 - 0.1 * i << ",-75," << csv::format_double(y) << ",0.004,"
                << csv::format_double(alt) << '\n';
        }
        out << "c12,-12,-75,,,3\nc13,-12.1,-75,,,3.5\n";
    }
    const nlohmann::json cfg = {{"areas", "areas.csv"},
                                {"responses", {{{"name", "y"}}}},
                                {"covariates", {"altitude_km"}},
                                {"stratify", false}};
    run(cfg, dir);
    const auto est = csv::Table::read(dir / "out" / "estimates_y.csv");
    REQUIRE(est.rows() == 14);
    const auto c_v = est.require("value"), c_raw = est.require("raw_value"), c_f = est.require("flags");
    int clamped = 0;
    for (std::size_t r = 0; r < est.rows(); ++r) {
        const double v = est.required_number(r, c_v), raw = est.required_number(r, c_raw);
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        const bool flagged = est.text(r, c_f).find("clamped") != std::string::npos;
        CHECK(flagged == (v != raw));
        clamped += flagged ? 1 : 0;
    }
    CHECK(clamped == 2);
    CHECK(est.required_number(13, c_v) == 0.0);
    CHECK(est.required_number(13, c_raw) < 0.0);
}
