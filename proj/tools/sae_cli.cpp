#include "sae/bootstrap.hpp"
#include "sae/csv.hpp"
#include "sae/direct.hpp"
#include "sae/error.hpp"
#include "sae/fh.hpp"
#include "sae/pipeline.hpp"
#include "sae/sfh.hpp"
#include "sae/simulate.hpp"
#include "sae/weights.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace {

using namespace sae;

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (ch == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else if (ch != ' ') {
            cur.push_back(ch);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

void write_json(const std::string& path, const nlohmann::json& doc) {
    if (path.empty() || path == "-") {
        std::cout << doc.dump(2) << '\n';
        return;
    }
    std::ofstream out(path);
    if (!out) throw Error(Errc::Io, "cannot write " + path);
    out << doc.dump(2) << '\n';
}

nlohmann::json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::Io, "cannot open " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::InvalidInput, path + ": " + e.what());
    }
}

std::vector<spatial::AreaGeo> load_geos(const std::string& geometry, const std::string& centroids) {
    if (!geometry.empty()) return spatial::read_geojson(geometry);
    if (!centroids.empty()) return spatial::read_centroids_csv(centroids);
    throw Error(Errc::InvalidInput, "give --geometry or --centroids");
}

// Model data shared by fit and bootstrap.
struct ModelArgs {
    std::string areas;
    std::string response = "y";
    std::string var;
    std::string covariates;
    std::string method = "REML";
    std::string model = "fh";
    std::string weights;
    std::optional<double> fixed_rho;

    void add(CLI::App* app) {
        app->add_option("--areas", areas, "area table CSV")->required();
        app->add_option("--response", response, "response column")->capture_default_str();
        app->add_option("--var", var, "sampling-variance column (default <response>_var)");
        app->add_option("--covariates", covariates, "comma-separated covariate columns");
        app->add_option("--method", method, "ML, REML, MOMENTS or FH_ITERATIVE")->capture_default_str();
        app->add_option("--model", model, "fh or sfh")->capture_default_str()->check(CLI::IsMember({"fh", "sfh"}));
        app->add_option("--weights", weights, "weights triplet CSV over every area in the table (sfh)");
        app->add_option("--fixed-rho", fixed_rho, "hold rho at this value (sfh)");
    }
};

struct Loaded {
    pipeline::AreaTable table;
    pipeline::Domain dom;
    std::optional<spatial::SpatialWeights> full_w;  // over sampled then unsampled areas
    std::optional<sfh::SfhInput> sin;
};

Loaded load_model(const ModelArgs& a) {
    auto table = pipeline::AreaTable::read_csv(a.areas);
    pipeline::ResponseSpec resp{a.response, a.response, a.var.empty() ? a.response + "_var" : a.var, std::nullopt};
    std::vector<std::size_t> rows(table.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    auto dom = pipeline::build_domain(table, rows, resp, split_list(a.covariates));
    Loaded out{std::move(table), std::move(dom), std::nullopt, std::nullopt};
    if (a.model == "sfh") {
        if (a.weights.empty()) throw Error(Errc::InvalidInput, "--model sfh needs --weights");
        const auto w = spatial::read_triplets(a.weights, out.table.ids());
        std::vector<std::size_t> order = out.dom.sampled;
        order.insert(order.end(), out.dom.unsampled.begin(), out.dom.unsampled.end());
        out.full_w = w.restrict_to(order);
        std::vector<std::size_t> keep(out.dom.sampled.size());
        std::iota(keep.begin(), keep.end(), std::size_t{0});
        out.sin = sfh::SfhInput{out.dom.input, out.full_w->restrict_to(keep), {}};
    }
    return out;
}

int run_direct(const std::string& survey, const std::string& indicator, const std::string& growth,
               const std::string& out) {
    const auto rows = direct::read_survey_csv(survey);
    std::optional<direct::GrowthReference> ref;
    if (!growth.empty()) ref = direct::GrowthReference::read_csv(growth);
    direct::EstimateOptions opt;
    opt.indicator = indicator == "anemia" ? direct::Indicator::Anemia : direct::Indicator::Stunting;
    opt.growth = ref ? &*ref : nullptr;
    const auto est = direct::estimate_areas(rows, opt);
    direct::write_direct_csv(out, est);
    std::cerr << "direct: " << est.size() << " areas from " << rows.size() << " rows\n";
    return 0;
}

int run_weights(const std::string& geometry, const std::string& centroids, const std::string& rule, std::size_t k,
                double distance_km, const std::string& out) {
    const auto geos = load_geos(geometry, centroids);
    spatial::SpatialWeights w;
    if (rule == "contiguity") {
        w = spatial::neighbors_contiguity(geos);
    } else if (rule == "knn") {
        w = spatial::neighbors_knn(geos, k);
    } else {
        w = spatial::neighbors_distance(geos, distance_km);
    }
    spatial::write_triplets(out, w);
    std::size_t links = 0;
    for (std::size_t i = 0; i < w.size(); ++i) links += w.degree(i);
    std::cerr << "weights: " << w.rule() << ", " << w.size() << " areas, " << links << " links, "
              << w.islands().size() << " islands\n";
    return 0;
}

int run_moran(const std::string& values, const std::string& column, const std::string& weights) {
    const auto t = csv::Table::read(values);
    const auto c_id = t.require("area_id");
    const auto c_v = t.require(column);
    std::vector<std::string> ids;
    std::vector<double> v;
    for (std::size_t r = 0; r < t.rows(); ++r) {
        const auto x = t.number(r, c_v);
        if (!x) continue;  // areas without a value are left out
        ids.push_back(t.text(r, c_id));
        v.push_back(*x);
    }
    const auto all_ids = [&] {
        std::vector<std::string> out;
        for (std::size_t r = 0; r < t.rows(); ++r) out.push_back(t.text(r, c_id));
        return out;
    }();
    const auto full = spatial::read_triplets(weights, all_ids);
    std::vector<std::size_t> keep;
    for (const auto& id : ids) keep.push_back(full.index_of(id));
    const auto w = full.restrict_to(keep);
    const double i = spatial::morans_i(v, w);
    std::cout << nlohmann::json({{"morans_i", i}, {"areas", v.size()}, {"islands", w.islands().size()}}).dump() << '\n';
    return 0;
}

int run_fit(const ModelArgs& a, const std::string& out) {
    auto m = load_model(a);
    const auto method = fh::parse_method(a.method);
    nlohmann::json report;
    if (a.model == "fh") {
        const auto fit = fh::fit(m.dom.input, method);
        report = pipeline::fh_report(fit, m.dom.terms);
    } else {
        sfh::SfhOptions opt;
        opt.fixed_rho = a.fixed_rho;
        const auto fit = sfh::fit_sfh(*m.sin, method, opt);
        report = pipeline::sfh_report(fit, m.dom.terms);
        report["weights_rule"] = m.sin->w.rule();
    }
    report["response"] = a.response;
    report["n_sampled"] = m.dom.sampled.size();
    write_json(out, report);
    return 0;
}

int run_predict(const std::string& fit_path, const std::string& areas, const std::string& response,
                const std::string& var, const std::string& out_path) {
    std::vector<std::string> terms;
    const auto fit = pipeline::fh_fit_from_report(read_json(fit_path), terms);
    const auto table = pipeline::AreaTable::read_csv(areas);
    const std::vector<std::string> covs(terms.begin() + 1, terms.end());
    if (terms.empty() || terms.front() != "intercept") throw Error(Errc::ColumnMismatch, "fit report lacks an intercept");
    std::vector<std::size_t> rows(table.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});

    std::vector<Prediction> in_pred, out_pred;
    pipeline::Domain dom;
    if (!response.empty() && table.has_column(response)) {
        pipeline::ResponseSpec resp{response, response, var.empty() ? response + "_var" : var, std::nullopt};
        dom = pipeline::build_domain(table, rows, resp, covs);
        in_pred = fh::eblup(dom.input, fit);
    } else {
        // No response: every area is predicted synthetically.
        pipeline::AreaTable t2 = table;
        std::vector<std::optional<double>> none(table.size());
        t2.set_column("__y", none);
        t2.set_column("__y_var", none);
        dom = pipeline::build_domain(t2, rows, {"__y", "__y", "__y_var", std::nullopt}, covs);
    }
    out_pred = fh::synthetic_predict(dom.x_out, fit);

    std::ofstream out(out_path);
    if (!out) throw Error(Errc::Io, "cannot write " + out_path);
    out << "area_id,estimator_kind,value,gamma,mse,flags\n";
    auto emit = [&](const std::vector<Prediction>& preds, const std::vector<std::size_t>& which) {
        for (const auto& p : preds) {
            out << csv::quote(table.ids()[which[p.index]]) << ',' << to_string(p.kind) << ','
                << csv::format_double(p.value) << ',' << csv::format_double(p.gamma) << ','
                << (p.mse ? csv::format_double(*p.mse) : std::string()) << ',' << prediction_flags_to_string(p.flags)
                << '\n';
        }
    };
    emit(in_pred, dom.sampled);
    emit(out_pred, dom.unsampled);
    return 0;
}

int run_bootstrap(const ModelArgs& a, int replicates, std::uint64_t seed, bool known, unsigned threads,
                  const std::string& out) {
    auto m = load_model(a);
    bootstrap::BootstrapSpec spec;
    spec.replicates = replicates;
    spec.seed = seed;
    spec.refit_method = fh::parse_method(a.method);
    spec.refit = !known;
    spec.threads = threads;
    spec.sfh_options.fixed_rho = a.fixed_rho;
    std::vector<std::string> ids;
    for (auto r : m.dom.sampled) ids.push_back(m.table.ids()[r]);
    bootstrap::OutOfSample oos;
    for (auto r : m.dom.unsampled) oos.ids.push_back(m.table.ids()[r]);
    oos.x = m.dom.x_out;
    ids.insert(ids.end(), oos.ids.begin(), oos.ids.end());
    bootstrap::MseTable table;
    if (a.model == "fh") {
        spec.model = bootstrap::Model::FH;
        const auto fit = fh::fit(m.dom.input, spec.refit_method);
        table = bootstrap::bootstrap_mse_fh(m.dom.input, fit, spec, &oos);
    } else {
        spec.model = bootstrap::Model::SFH;
        const auto fit = sfh::fit_sfh(*m.sin, spec.refit_method, spec.sfh_options);
        oos.full_w = &*m.full_w;
        table = bootstrap::bootstrap_mse_sfh(*m.sin, fit, spec, &oos);
    }
    bootstrap::write_mse_csv(out, ids, table);
    std::cerr << "bootstrap: " << table.b_effective << " of " << table.replicates << " replicates used"
              << (table.below_reporting_minimum ? " (below the reporting minimum of 50)" : "") << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Small area estimation with Fay-Herriot and spatial Fay-Herriot models"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(sae::pipeline::version()));

    // direct
    std::string survey, indicator = "anemia", growth, direct_out = "direct.csv";
    auto* c_direct = app.add_subcommand("direct", "Horvitz-Thompson direct estimates per area from survey rows");
    c_direct->add_option("--survey", survey, "survey CSV")->required();
    c_direct->add_option("--indicator", indicator)->check(CLI::IsMember({"anemia", "stunting"}))->capture_default_str();
    c_direct->add_option("--growth", growth, "height-for-age cutoff table (age_months,cutoff_cm)");
    c_direct->add_option("--out", direct_out)->capture_default_str();

    // weights
    std::string geometry, centroids, rule = "contiguity", weights_out = "weights.csv";
    std::size_t k = 4;
    double distance_km = 50.0;
    auto* c_weights = app.add_subcommand("weights", "Build a row-stochastic spatial weights matrix");
    c_weights->add_option("--geometry", geometry, "GeoJSON FeatureCollection with area_id properties");
    c_weights->add_option("--centroids", centroids, "CSV area_id,lat,lon");
    c_weights->add_option("--rule", rule)->check(CLI::IsMember({"contiguity", "knn", "distance"}))->capture_default_str();
    c_weights->add_option("--k", k)->capture_default_str();
    c_weights->add_option("--distance-km", distance_km)->capture_default_str();
    c_weights->add_option("--out", weights_out)->capture_default_str();

    // moran
    std::string moran_values, moran_column, moran_weights;
    auto* c_moran = app.add_subcommand("moran", "Global Moran's I of a column");
    c_moran->add_option("--values", moran_values, "CSV with area_id and the value column")->required();
    c_moran->add_option("--column", moran_column)->required();
    c_moran->add_option("--weights", moran_weights, "weights triplet CSV")->required();

    // fit
    ModelArgs fit_args;
    std::string fit_out = "-";
    auto* c_fit = app.add_subcommand("fit", "Fit an FH or spatial FH model and write the fit report");
    fit_args.add(c_fit);
    c_fit->add_option("--out", fit_out, "report path, '-' for stdout")->capture_default_str();

    // predict
    std::string pred_fit, pred_areas, pred_response, pred_var, pred_out = "predictions.csv";
    auto* c_predict = app.add_subcommand("predict", "EBLUP / synthetic predictions from an FH fit report");
    c_predict->add_option("--fit", pred_fit, "FH fit report JSON")->required();
    c_predict->add_option("--areas", pred_areas, "area table CSV")->required();
    c_predict->add_option("--response", pred_response, "response column; areas with a value get the EBLUP");
    c_predict->add_option("--var", pred_var);
    c_predict->add_option("--out", pred_out)->capture_default_str();

    // bootstrap
    ModelArgs boot_args;
    int replicates = sae::bootstrap::kDefaultReplicates;
    std::uint64_t boot_seed = 1;
    bool known = false;
    unsigned boot_threads = 1;
    std::string boot_out = "mse.csv";
    auto* c_boot = app.add_subcommand("bootstrap", "Parametric bootstrap MSE");
    boot_args.add(c_boot);
    c_boot->add_option("--replicates", replicates)->capture_default_str()->check(CLI::PositiveNumber);
    c_boot->add_option("--seed", boot_seed)->capture_default_str();
    c_boot->add_flag("--known", known, "keep the fitted parameters instead of refitting each replicate");
    c_boot->add_option("--threads", boot_threads)->capture_default_str();
    c_boot->add_option("--out", boot_out)->capture_default_str();

    // pipeline
    std::string config;
    std::optional<std::uint64_t> pipe_seed;
    std::optional<std::string> pipe_output;
    std::optional<unsigned> pipe_threads;
    auto* c_pipe = app.add_subcommand("pipeline", "Stratified FH / spatial FH run over a national area table");
    c_pipe->add_option("--config", config, "pipeline JSON config")->required();
    c_pipe->add_option("--seed", pipe_seed, "overrides the config seed");
    c_pipe->add_option("--output", pipe_output, "overrides the config output_dir");
    c_pipe->add_option("--threads", pipe_threads);

    // simulate
    std::string sim_kind = "national", sim_out = "fixture";
    std::uint64_t sim_seed = 2019;
    sae::simulate::LatticeOptions lat;
    auto* c_sim = app.add_subcommand("simulate", "Write synthetic datasets");
    c_sim->add_option("kind", sim_kind, "national or lattice")->check(CLI::IsMember({"national", "lattice"}))->capture_default_str();
    c_sim->add_option("--out", sim_out, "output directory")->capture_default_str();
    c_sim->add_option("--seed", sim_seed)->capture_default_str();
    c_sim->add_option("--rows", lat.rows)->capture_default_str();
    c_sim->add_option("--cols", lat.cols)->capture_default_str();
    c_sim->add_option("--sigma2", lat.sigma2)->capture_default_str();
    c_sim->add_option("--rho", lat.rho)->capture_default_str();
    c_sim->add_option("--sample-rate", lat.sample_rate)->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*c_direct) return run_direct(survey, indicator, growth, direct_out);
        if (*c_weights) return run_weights(geometry, centroids, rule, k, distance_km, weights_out);
        if (*c_moran) return run_moran(moran_values, moran_column, moran_weights);
        if (*c_fit) return run_fit(fit_args, fit_out);
        if (*c_predict) return run_predict(pred_fit, pred_areas, pred_response, pred_var, pred_out);
        if (*c_boot) return run_bootstrap(boot_args, replicates, boot_seed, known, boot_threads, boot_out);
        if (*c_pipe) {
            auto cfg = sae::pipeline::PipelineConfig::read(config);
            if (pipe_seed) cfg.seed = *pipe_seed;
            if (pipe_output) cfg.output_dir = *pipe_output;
            if (pipe_threads) cfg.threads = *pipe_threads;
            const auto summary = sae::pipeline::run_pipeline(cfg);
            std::cerr << "pipeline: " << summary.areas << " areas";
            for (const auto& [s, count] : summary.stratum_sizes) std::cerr << ", stratum " << s << ": " << count;
            std::cerr << "; " << summary.outputs.size() << " files in " << cfg.output_dir.string() << '\n';
            return 0;
        }
        if (*c_sim) {
            if (sim_kind == "national") {
                sae::simulate::NationalOptions opt;
                opt.seed = sim_seed;
                sae::simulate::write_national_fixture(sim_out, opt);
            } else {
                lat.seed = sim_seed;
                sae::simulate::write_lattice_dataset(sim_out, lat);
            }
            return 0;
        }
    } catch (const sae::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
