#include "sae/pipeline.hpp"

#include "sae/csv.hpp"
#include "sae/direct.hpp"
#include "sae/error.hpp"
#include "sae/geojson.hpp"
#include "sae/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#ifndef SAE_VERSION
#define SAE_VERSION "0.0.0"
#endif

namespace sae::pipeline {

std::string_view version() noexcept { return SAE_VERSION; }

// ---------------------------------------------------------------- AreaTable

AreaTable AreaTable::read_csv(const std::filesystem::path& path) {
    const auto t = csv::Table::read(path);
    const auto c_id = t.require("area_id");
    t.require("lat");
    t.require("lon");
    std::vector<std::string> ids;
    ids.reserve(t.rows());
    for (std::size_t r = 0; r < t.rows(); ++r) ids.push_back(t.text(r, c_id));
    std::map<std::string, std::vector<std::optional<double>>> columns;
    for (std::size_t c = 0; c < t.header().size(); ++c) {
        if (c == c_id) continue;
        auto& col = columns[t.header()[c]];
        if (!col.empty()) throw Error(Errc::InvalidInput, path.string() + ": duplicate column '" + t.header()[c] + "'");
        col.reserve(t.rows());
        for (std::size_t r = 0; r < t.rows(); ++r) col.push_back(t.number(r, c));
    }
    return AreaTable(std::move(ids), std::move(columns));
}

AreaTable::AreaTable(std::vector<std::string> ids, std::map<std::string, std::vector<std::optional<double>>> columns)
    : ids_(std::move(ids)), columns_(std::move(columns)) {
    for (std::size_t i = 0; i < ids_.size(); ++i) {
        if (ids_[i].empty()) throw Error(Errc::InvalidInput, "empty area_id in row " + std::to_string(i + 1));
        if (!index_.emplace(ids_[i], i).second) throw Error(Errc::InvalidInput, "duplicate area_id " + ids_[i]);
    }
    for (const auto& [name, col] : columns_) {
        if (col.size() != ids_.size()) throw Error(Errc::InvalidInput, "column '" + name + "' has the wrong length");
    }
    for (const char* name : {"lat", "lon"}) {
        const auto& col = column(name);
        for (std::size_t i = 0; i < col.size(); ++i) {
            if (!col[i]) throw Error(Errc::InvalidInput, "area " + ids_[i] + ": missing " + name);
        }
    }
    if (has_column("poverty_pct")) {
        for (const auto& v : column("poverty_pct")) {
            if (v && !(*v >= 0.0 && *v <= 100.0)) throw Error(Errc::InvalidInput, "poverty_pct outside [0,100]");
        }
    }
}

std::size_t AreaTable::index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw Error(Errc::InvalidInput, "unknown area_id " + id);
    return it->second;
}

const std::vector<std::optional<double>>& AreaTable::column(const std::string& name) const {
    auto it = columns_.find(name);
    if (it == columns_.end()) throw Error(Errc::InvalidInput, "area table has no column '" + name + "'");
    return it->second;
}

void AreaTable::set_column(const std::string& name, std::vector<std::optional<double>> values) {
    if (values.size() != ids_.size()) throw Error(Errc::InvalidInput, "column '" + name + "' has the wrong length");
    columns_[name] = std::move(values);
}

double AreaTable::lat(std::size_t i) const { return *column("lat")[i]; }
double AreaTable::lon(std::size_t i) const { return *column("lon")[i]; }

int stratum_of(double poverty_pct) {
    if (poverty_pct < 30.0) return 1;
    if (poverty_pct < 55.0) return 2;
    return 3;
}

std::vector<int> stratify(const AreaTable& table) {
    if (!table.has_column("poverty_pct")) throw Error(Errc::MissingPoverty, "area table has no poverty_pct column");
    const auto& pov = table.column("poverty_pct");
    std::vector<int> out;
    out.reserve(table.size());
    for (std::size_t i = 0; i < table.size(); ++i) {
        if (!pov[i]) throw Error(Errc::MissingPoverty, "area " + table.ids()[i] + " has no poverty_pct");
        out.push_back(stratum_of(*pov[i]));
    }
    return out;
}

// ------------------------------------------------------------------- Domain

Domain build_domain(const AreaTable& table, std::span<const std::size_t> rows, const ResponseSpec& response,
                    const std::vector<std::string>& covariates) {
    const auto& ys = table.column(response.y_column);
    const auto& vs = table.column(response.var_column);
    std::vector<const std::vector<std::optional<double>>*> cols;
    for (const auto& c : covariates) cols.push_back(&table.column(c));

    Domain d;
    d.terms.push_back("intercept");
    d.terms.insert(d.terms.end(), covariates.begin(), covariates.end());
    for (const auto r : rows) {
        const auto& id = table.ids()[r];
        if (ys[r].has_value() != vs[r].has_value()) {
            throw Error(Errc::InvalidInput, "area " + id + ": " + response.y_column + " and " + response.var_column +
                                                " must be both present or both absent");
        }
        if (ys[r]) {
            if (!(*ys[r] >= 0.0 && *ys[r] <= 1.0)) throw Error(Errc::InvalidInput, "area " + id + ": y outside [0,1]");
            if (!(*vs[r] >= 0.0)) throw Error(Errc::InvalidInput, "area " + id + ": negative sampling variance");
            d.sampled.push_back(r);
        } else {
            d.unsampled.push_back(r);
        }
        for (std::size_t c = 0; c < covariates.size(); ++c) {
            const auto& v = (*cols[c])[r];
            if (!v) throw Error(Errc::InvalidInput, "area " + id + ": missing covariate " + covariates[c]);
            if (covariates[c] != "altitude_km" && !(*v >= 0.0 && *v <= 1.0)) {
                throw Error(Errc::InvalidInput, "area " + id + ": covariate " + covariates[c] + " outside [0,1]");
            }
        }
    }
    const auto p = static_cast<Eigen::Index>(covariates.size() + 1);
    auto fill = [&](const std::vector<std::size_t>& which, fh::Matrix& x) {
        x.resize(static_cast<Eigen::Index>(which.size()), p);
        for (std::size_t k = 0; k < which.size(); ++k) {
            const auto row = static_cast<Eigen::Index>(k);
            x(row, 0) = 1.0;
            for (std::size_t c = 0; c < covariates.size(); ++c) {
                x(row, static_cast<Eigen::Index>(c + 1)) = *(*cols[c])[which[k]];
            }
        }
    };
    fill(d.sampled, d.input.x);
    fill(d.unsampled, d.x_out);
    const auto n = static_cast<Eigen::Index>(d.sampled.size());
    d.input.y.resize(n);
    d.input.sigma2_e.resize(n);
    for (Eigen::Index k = 0; k < n; ++k) {
        d.input.y[k] = *ys[d.sampled[static_cast<std::size_t>(k)]];
        d.input.sigma2_e[k] = *vs[d.sampled[static_cast<std::size_t>(k)]];
    }
    return d;
}

fh::Vector coefficient_p_values(const fh::Vector& beta, const fh::Vector& se) {
    fh::Vector p(beta.size());
    for (Eigen::Index j = 0; j < beta.size(); ++j) {
        p[j] = se[j] > 0.0 ? std::erfc(std::abs(beta[j] / se[j]) / std::sqrt(2.0)) : std::nan("");
    }
    return p;
}

// ------------------------------------------------------------------ reports

namespace {

nlohmann::json coefficients_json(const fh::Vector& beta, const fh::Matrix& cov, const std::vector<std::string>& terms) {
    const fh::Vector se = cov.diagonal().cwiseSqrt();
    const fh::Vector pv = coefficient_p_values(beta, se);
    auto out = nlohmann::json::array();
    for (Eigen::Index j = 0; j < beta.size(); ++j) {
        out.push_back({{"term", terms[static_cast<std::size_t>(j)]},
                       {"estimate", beta[j]},
                       {"se", se[j]},
                       {"z", beta[j] / se[j]},
                       {"p_value", pv[j]}});
    }
    return out;
}

nlohmann::json matrix_json(const fh::Matrix& m) {
    auto out = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        auto row = nlohmann::json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        out.push_back(row);
    }
    return out;
}

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

}  // namespace

nlohmann::json fh_report(const fh::FhFit& fit, const std::vector<std::string>& terms) {
    auto trace = nlohmann::json::array();
    for (const auto& t : fit.trace) {
        trace.push_back({{"iteration", t.iteration}, {"sigma2", t.sigma2}, {"objective", t.objective},
                         {"gradient", t.gradient}});
    }
    return {{"model", "FH"},
            {"method", std::string(fh::to_string(fit.method))},
            {"coefficients", coefficients_json(fit.beta, fit.beta_cov, terms)},
            {"beta_cov", matrix_json(fit.beta_cov)},
            {"sigma2_u", fit.sigma2_u},
            {"sigma2_u_se", finite_or_null(fit.sigma2_u_se)},
            {"loglik", optional_json(fit.loglik)},
            {"converged", fit.converged},
            {"at_boundary", fit.at_boundary},
            {"iterations", fit.iterations},
            {"trace", trace}};
}

nlohmann::json sfh_report(const sfh::SfhFit& fit, const std::vector<std::string>& terms) {
    auto starts = nlohmann::json::array();
    for (const auto& s : fit.starts) {
        starts.push_back({{"sigma2_start", s.sigma2_start}, {"rho_start", s.rho_start}, {"sigma2", s.sigma2},
                          {"rho", s.rho}, {"loglik", finite_or_null(s.loglik)}, {"iterations", s.iterations},
                          {"converged", s.converged}});
    }
    return {{"model", "SFH"},
            {"method", std::string(fh::to_string(fit.method))},
            {"coefficients", coefficients_json(fit.beta, fit.beta_cov, terms)},
            {"beta_cov", matrix_json(fit.beta_cov)},
            {"sigma2_eps", fit.sigma2_eps},
            {"sigma2_eps_se", finite_or_null(fit.sigma2_eps_se)},
            {"rho", fit.rho},
            {"rho_se", finite_or_null(fit.rho_se)},
            {"loglik", fit.loglik},
            {"converged", fit.converged},
            {"boundary_rho", fit.boundary_rho},
            {"boundary_sigma2", fit.boundary_sigma2},
            {"iterations", fit.iterations},
            {"starts", starts}};
}

fh::FhFit fh_fit_from_report(const nlohmann::json& report, std::vector<std::string>& terms) {
    try {
        if (report.value("model", "") != "FH") throw Error(Errc::InvalidInput, "fit report is not an FH model");
        fh::FhFit fit;
        fit.method = fh::parse_method(report.at("method").get<std::string>());
        const auto& coefs = report.at("coefficients");
        const auto p = static_cast<Eigen::Index>(coefs.size());
        terms.clear();
        fit.beta.resize(p);
        for (Eigen::Index j = 0; j < p; ++j) {
            terms.push_back(coefs[static_cast<std::size_t>(j)].at("term").get<std::string>());
            fit.beta[j] = coefs[static_cast<std::size_t>(j)].at("estimate").get<double>();
        }
        const auto& cov = report.at("beta_cov");
        if (static_cast<Eigen::Index>(cov.size()) != p) throw Error(Errc::InvalidInput, "beta_cov has the wrong shape");
        fit.beta_cov.resize(p, p);
        for (Eigen::Index i = 0; i < p; ++i) {
            const auto& row = cov[static_cast<std::size_t>(i)];
            if (static_cast<Eigen::Index>(row.size()) != p) throw Error(Errc::InvalidInput, "beta_cov has the wrong shape");
            for (Eigen::Index j = 0; j < p; ++j) fit.beta_cov(i, j) = row[static_cast<std::size_t>(j)].get<double>();
        }
        fit.beta_se = fit.beta_cov.diagonal().cwiseSqrt();
        fit.sigma2_u = report.at("sigma2_u").get<double>();
        fit.converged = report.value("converged", true);
        fit.at_boundary = report.value("at_boundary", false);
        return fit;
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::InvalidInput, std::string("malformed fit report: ") + e.what());
    }
}

// ------------------------------------------------------------------- config

namespace {

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base / path;
}

ResponseSpec parse_response(const nlohmann::json& j) {
    ResponseSpec r;
    if (j.is_string()) {
        r.name = j.get<std::string>();
        r.y_column = r.name;
        r.var_column = r.name + "_var";
        if (r.name == "anemia" || r.name == "stunting") r.indicator = r.name;
        return r;
    }
    r.name = j.at("name").get<std::string>();
    r.y_column = j.value("y", r.name);
    r.var_column = j.value("var", r.y_column + "_var");
    if (j.contains("indicator")) r.indicator = j.at("indicator").get<std::string>();
    if (r.indicator && *r.indicator != "anemia" && *r.indicator != "stunting") {
        throw Error(Errc::InvalidInput, "unknown indicator '" + *r.indicator + "'");
    }
    return r;
}

sfh::RhoBounds parse_bounds(const nlohmann::json& j) {
    if (!j.is_array() || j.size() != 2) throw Error(Errc::InvalidInput, "rho_bounds must be [lower, upper]");
    return {j[0].get<double>(), j[1].get<double>()};
}

}  // namespace

PipelineConfig PipelineConfig::from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir) {
    PipelineConfig c;
    try {
        c.raw = doc;
        c.areas = resolve(base_dir, doc.at("areas").get<std::string>());
        if (doc.contains("geometry")) c.geometry = resolve(base_dir, doc["geometry"].get<std::string>());
        if (doc.contains("survey")) c.survey = resolve(base_dir, doc["survey"].get<std::string>());
        for (const auto& r : doc.at("responses")) c.responses.push_back(parse_response(r));
        if (c.responses.empty()) throw Error(Errc::InvalidInput, "config lists no responses");
        c.covariates = doc.value("covariates", std::vector<std::string>{});
        c.method = fh::parse_method(doc.value("method", std::string("REML")));
        c.fit_options.tolerance = doc.value("tolerance", c.fit_options.tolerance);
        c.fit_options.max_iter = doc.value("max_iter", c.fit_options.max_iter);
        c.stratify = doc.value("stratify", true);
        c.clamp = doc.value("clamp", true);
        if (doc.contains("selection")) {
            const auto& s = doc["selection"];
            c.backward = s.value("backward", false);
            c.alpha = s.value("alpha", 0.10);
        }
        if (doc.contains("spatial")) {
            const auto& s = doc["spatial"];
            c.spatial.enabled = s.value("enabled", true);
            c.spatial.rule = s.value("rule", c.spatial.rule);
            c.spatial.k = s.value("k", c.spatial.k);
            c.spatial.distance_km = s.value("distance_km", c.spatial.distance_km);
            if (s.contains("weights_file")) {
                c.spatial.weights_file = resolve(base_dir, s["weights_file"].get<std::string>());
                if (!s.contains("rule")) c.spatial.rule = "file";
            }
            c.spatial.scope = s.value("scope", c.spatial.scope);
            if (s.contains("rho_bounds")) c.spatial.rho_bounds = parse_bounds(s["rho_bounds"]);
            c.spatial.method = fh::parse_method(s.value("method", std::string(fh::to_string(c.method))));
            if (s.contains("fixed_rho")) c.spatial.fixed_rho = s["fixed_rho"].get<double>();
            if (s.contains("gradient_tolerance")) c.sfh_options.gradient_tolerance = s["gradient_tolerance"].get<double>();
        }
        if (doc.contains("bootstrap")) {
            const auto& b = doc["bootstrap"];
            c.bootstrap.enabled = b.value("enabled", true);
            c.bootstrap.replicates = b.value("replicates", c.bootstrap.replicates);
            c.bootstrap.spatial = b.value("spatial", true);
            c.bootstrap.refit = b.value("refit", true);
        }
        c.seed = doc.value("seed", c.seed);
        c.threads = doc.value("threads", c.threads);
        c.output_dir = resolve(base_dir, doc.value("output_dir", std::string("out")));
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::InvalidInput, std::string("config: ") + e.what());
    }
    const std::set<std::string> rules{"contiguity", "knn", "distance", "file"};
    if (!rules.count(c.spatial.rule)) throw Error(Errc::InvalidInput, "config: unknown weights rule " + c.spatial.rule);
    if (c.spatial.scope != "stratum" && c.spatial.scope != "national") {
        throw Error(Errc::InvalidInput, "config: spatial scope must be 'stratum' or 'national'");
    }
    if (c.spatial.rule == "file" && !c.spatial.weights_file) {
        throw Error(Errc::InvalidInput, "config: rule 'file' needs spatial.weights_file");
    }
    if (c.spatial.method != fh::Method::ML && c.spatial.method != fh::Method::REML) {
        throw Error(Errc::InvalidInput, "config: the spatial model supports ML or REML only");
    }
    if (c.bootstrap.replicates < 1) throw Error(Errc::InvalidInput, "config: bootstrap.replicates must be positive");
    if (!(c.alpha > 0.0 && c.alpha < 1.0)) throw Error(Errc::InvalidInput, "config: selection.alpha must be in (0,1)");
    c.sfh_options.fixed_rho = c.spatial.fixed_rho;
    return c;
}

PipelineConfig PipelineConfig::read(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::Io, "cannot open " + path.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::InvalidInput, path.string() + ": " + e.what());
    }
    return from_json(doc, path.parent_path());
}

// ---------------------------------------------------------------- pipeline

namespace {

enum class Model { Direct, Fh, Sfh };

std::string_view model_name(Model m) {
    switch (m) {
        case Model::Direct: return "direct";
        case Model::Fh: return "fh";
        case Model::Sfh: return "sfh";
    }
    return "";
}

struct Row {
    std::size_t area = 0;  // table row
    Model model = Model::Direct;
    EstimatorKind kind = EstimatorKind::Direct;
    double value = 0.0;
    double raw_value = 0.0;
    double gamma = 0.0;
    std::optional<double> mse;
    std::string mse_method;
    std::uint32_t flags = kFlagNone;
};

struct JobResult {
    std::vector<Row> rows;
    std::vector<std::pair<std::string, nlohmann::json>> reports;  // file name, body
    std::vector<std::pair<std::string, std::string>> mse_files;  // file name, CSV text
};

struct Job {
    std::size_t response = 0;
    int stratum = 0;
    std::vector<std::size_t> areas;  // table rows
    const spatial::SpatialWeights* weights = nullptr;  // over `areas`, same order
};

std::string context(const ResponseSpec& r, int stratum, std::string_view model) {
    return "response " + r.name + ", stratum " + std::to_string(stratum) + ", model " + std::string(model) + ": ";
}

std::string mse_csv(std::span<const std::string> ids, const bootstrap::MseTable& t) {
    std::ostringstream out;
    out << "area_id,prediction,mse,rrmse,b_effective\n";
    for (std::size_t i = 0; i < ids.size(); ++i) {
        out << csv::quote(ids[i]) << ',' << csv::format_double(t.prediction[i]) << ',' << csv::format_double(t.mse[i])
            << ',' << csv::format_double(t.rrmse[i]) << ',' << t.b_effective << '\n';
    }
    return out.str();
}

nlohmann::json bootstrap_json(const bootstrap::MseTable& t, std::uint64_t seed, bool refit) {
    return {{"replicates", t.replicates},
            {"b_effective", t.b_effective},
            {"seed", seed},
            {"refit", refit},
            {"below_reporting_minimum", t.below_reporting_minimum}};
}

std::optional<double> moran_or_null(const fh::Vector& v, const spatial::SpatialWeights& w) {
    if (w.total_weight() <= 0.0) return std::nullopt;
    try {
        return spatial::morans_i(std::span<const double>(v.data(), static_cast<std::size_t>(v.size())), w);
    } catch (const Error&) {
        return std::nullopt;
    }
}

// Backward elimination on the FH fit: drop the least significant covariate
// while its p-value exceeds alpha. The intercept always stays.
std::vector<std::string> select_covariates(const AreaTable& table, const Job& job, const ResponseSpec& resp,
                                           std::vector<std::string> covs, const PipelineConfig& cfg,
                                           nlohmann::json& dropped) {
    dropped = nlohmann::json::array();
    while (!covs.empty()) {
        const auto dom = build_domain(table, job.areas, resp, covs);
        const auto fit = fh::fit(dom.input, cfg.method, cfg.fit_options);
        const auto pv = coefficient_p_values(fit.beta, fit.beta_se);
        Eigen::Index worst = -1;
        for (Eigen::Index j = 1; j < pv.size(); ++j) {
            const double v = std::isnan(pv[j]) ? 1.0 : pv[j];
            if (v > cfg.alpha && (worst < 0 || v > (std::isnan(pv[worst]) ? 1.0 : pv[worst]))) worst = j;
        }
        if (worst < 0) break;
        dropped.push_back({{"term", covs[static_cast<std::size_t>(worst - 1)]}, {"p_value", finite_or_null(pv[worst])}});
        covs.erase(covs.begin() + (worst - 1));
    }
    return covs;
}

std::uint64_t job_seed(std::uint64_t seed, std::size_t job) {
    Engine eng = make_stream(seed, 0x10000 + job);
    return eng();
}

JobResult run_job(const AreaTable& table, const Job& job, std::size_t job_index, const PipelineConfig& cfg,
                  const std::map<std::string, std::uint32_t>& direct_flags) {
    const auto& resp = cfg.responses[job.response];
    JobResult res;
    const std::string tag = resp.name + "_s" + std::to_string(job.stratum);

    nlohmann::json dropped = nlohmann::json::array();
    std::vector<std::string> covs = cfg.covariates;
    Domain dom;
    fh::FhFit fit;
    try {
        if (cfg.backward) covs = select_covariates(table, job, resp, covs, cfg, dropped);
        dom = build_domain(table, job.areas, resp, covs);
        if (dom.sampled.empty()) throw Error(Errc::InvalidInput, "no sampled areas");
        fit = fh::fit(dom.input, cfg.method, cfg.fit_options);
    } catch (const Error& e) {
        throw Error(e.code(), context(resp, job.stratum, "FH") + e.what());
    }

    const auto& ids = table.ids();
    std::vector<std::string> ids_s, ids_o;
    for (auto r : dom.sampled) ids_s.push_back(ids[r]);
    for (auto r : dom.unsampled) ids_o.push_back(ids[r]);

    // direct rows
    for (Eigen::Index k = 0; k < dom.input.areas(); ++k) {
        Row row;
        row.area = dom.sampled[static_cast<std::size_t>(k)];
        row.model = Model::Direct;
        row.kind = EstimatorKind::Direct;
        row.value = row.raw_value = dom.input.y[k];
        row.gamma = 1.0;
        row.mse = dom.input.sigma2_e[k];
        row.mse_method = "design";
        auto it = direct_flags.find(ids[row.area]);
        if (it != direct_flags.end() && (it->second & direct::kVarianceImputed)) row.flags |= kFlagVarianceImputed;
        res.rows.push_back(row);
    }

    // FH rows
    const auto in_pred = fh::eblup(dom.input, fit);
    const auto out_pred = fh::synthetic_predict(dom.x_out, fit);
    std::vector<std::optional<double>> fh_boot;
    nlohmann::json fh_rep = fh_report(fit, dom.terms);
    if (cfg.bootstrap.enabled) {
        bootstrap::BootstrapSpec spec;
        spec.replicates = cfg.bootstrap.replicates;
        spec.seed = job_seed(cfg.seed, 2 * job_index);
        spec.model = bootstrap::Model::FH;
        spec.refit_method = cfg.method;
        spec.refit = cfg.bootstrap.refit;
        spec.fh_options = cfg.fit_options;
        bootstrap::OutOfSample oos{ids_o, dom.x_out, nullptr};
        try {
            const auto t = bootstrap::bootstrap_mse_fh(dom.input, fit, spec, &oos);
            fh_boot.assign(t.mse.begin(), t.mse.end());
            fh_rep["bootstrap"] = bootstrap_json(t, spec.seed, spec.refit);
            std::vector<std::string> all = ids_s;
            all.insert(all.end(), ids_o.begin(), ids_o.end());
            res.mse_files.emplace_back("mse_" + tag + "_fh.csv", mse_csv(all, t));
        } catch (const Error& e) {
            throw Error(e.code(), context(resp, job.stratum, "FH bootstrap") + e.what());
        }
    }
    auto push_model_rows = [&](Model model, const std::vector<Prediction>& preds, const std::vector<std::size_t>& areas,
                               std::size_t boot_offset, const std::vector<std::optional<double>>& boot,
                               std::string_view analytic_method) {
        for (const auto& p : preds) {
            Row row;
            row.area = areas[p.index];
            row.model = model;
            row.kind = p.kind;
            row.value = row.raw_value = p.value;
            row.gamma = p.gamma;
            row.flags = p.flags;
            if (!boot.empty()) {
                row.mse = boot[boot_offset + p.index];
                row.mse_method = "bootstrap";
            } else if (p.mse) {
                row.mse = p.mse;
                row.mse_method = std::string(analytic_method);
            }
            res.rows.push_back(row);
        }
    };
    push_model_rows(Model::Fh, in_pred, dom.sampled, 0, fh_boot, "prasad_rao");
    push_model_rows(Model::Fh, out_pred, dom.unsampled, dom.sampled.size(), fh_boot, "synthetic");

    fh_rep["response"] = resp.name;
    fh_rep["stratum"] = job.stratum;
    fh_rep["n_sampled"] = dom.sampled.size();
    fh_rep["n_unsampled"] = dom.unsampled.size();
    fh_rep["selection"] = {{"backward", cfg.backward}, {"alpha", cfg.alpha}, {"dropped", dropped}};

    if (cfg.spatial.enabled) {
        // Positions of the sampled and unsampled areas inside the job's weights.
        std::map<std::size_t, std::size_t> pos;
        for (std::size_t k = 0; k < job.areas.size(); ++k) pos[job.areas[k]] = k;
        std::vector<std::size_t> keep;
        for (auto r : dom.sampled) keep.push_back(pos.at(r));
        sfh::SfhInput sin{dom.input, job.weights->restrict_to(keep), cfg.spatial.rho_bounds};
        const fh::Vector resid = dom.input.y - dom.input.x * fit.beta;
        fh_rep["moran_direct"] = optional_json(moran_or_null(dom.input.y, sin.w));
        fh_rep["moran_residuals"] = optional_json(moran_or_null(resid, sin.w));

        sfh::SfhFit sfit;
        std::vector<Prediction> s_in, s_out;
        try {
            sfit = sfh::fit_sfh(sin, cfg.spatial.method, cfg.sfh_options);
            s_in = sfh::seblup(sin, sfit);
            s_out = sfh::seblup_out_of_sample(*job.weights, ids_o, dom.x_out, sin, sfit);
        } catch (const Error& e) {
            throw Error(e.code(), context(resp, job.stratum, "SFH") + e.what());
        }
        nlohmann::json s_rep = sfh_report(sfit, dom.terms);
        s_rep["response"] = resp.name;
        s_rep["stratum"] = job.stratum;
        s_rep["n_sampled"] = dom.sampled.size();
        s_rep["n_unsampled"] = dom.unsampled.size();
        s_rep["weights_rule"] = job.weights->rule();
        s_rep["islands_in_sample"] = sin.w.islands().size();
        s_rep["islands_in_stratum"] = job.weights->islands().size();
        s_rep["fixed_rho"] = optional_json(cfg.spatial.fixed_rho);
        {
            const fh::Vector sresid = dom.input.y - dom.input.x * sfit.beta;
            s_rep["moran_residuals"] = optional_json(moran_or_null(sresid, sin.w));
        }

        std::vector<std::optional<double>> sfh_boot;
        if (cfg.bootstrap.enabled && cfg.bootstrap.spatial) {
            bootstrap::BootstrapSpec spec;
            spec.replicates = cfg.bootstrap.replicates;
            spec.seed = job_seed(cfg.seed, 2 * job_index + 1);
            spec.model = bootstrap::Model::SFH;
            spec.refit_method = cfg.spatial.method;
            spec.refit = cfg.bootstrap.refit;
            spec.sfh_options = cfg.sfh_options;
            bootstrap::OutOfSample oos{ids_o, dom.x_out, job.weights};
            try {
                const auto t = bootstrap::bootstrap_mse_sfh(sin, sfit, spec, &oos);
                sfh_boot.assign(t.mse.begin(), t.mse.end());
                s_rep["bootstrap"] = bootstrap_json(t, spec.seed, spec.refit);
                std::vector<std::string> all = ids_s;
                all.insert(all.end(), ids_o.begin(), ids_o.end());
                res.mse_files.emplace_back("mse_" + tag + "_sfh.csv", mse_csv(all, t));
            } catch (const Error& e) {
                throw Error(e.code(), context(resp, job.stratum, "SFH bootstrap") + e.what());
            }
        }
        push_model_rows(Model::Sfh, s_in, dom.sampled, 0, sfh_boot, "");
        push_model_rows(Model::Sfh, s_out, dom.unsampled, dom.sampled.size(), sfh_boot, "");
        res.reports.emplace_back("fit_" + tag + "_sfh.json", std::move(s_rep));
    }
    res.reports.emplace_back("fit_" + tag + "_fh.json", std::move(fh_rep));

    if (cfg.clamp) {
        for (auto& row : res.rows) {
            const double c = std::clamp(row.raw_value, 0.0, 1.0);
            if (c != row.raw_value) {
                row.value = c;
                row.flags |= kFlagClamped;
            }
        }
    }
    return res;
}

spatial::SpatialWeights build_weights(const PipelineConfig& cfg, const std::vector<spatial::AreaGeo>& geos) {
    const auto& s = cfg.spatial;
    if (s.rule == "contiguity") return spatial::neighbors_contiguity(geos);
    if (s.rule == "knn") return spatial::neighbors_knn(geos, s.k);
    if (s.rule == "distance") return spatial::neighbors_distance(geos, s.distance_km);
    throw Error(Errc::InvalidInput, "weights rule " + s.rule + " cannot be built from geometry");
}

std::string opt_number(const std::optional<double>& v) { return v ? csv::format_double(*v) : std::string(); }

}  // namespace

RunSummary run_pipeline(const PipelineConfig& cfg) {
    AreaTable table = AreaTable::read_csv(cfg.areas);
    const auto n = table.size();
    const auto& ids = table.ids();

    std::vector<int> strata(n, 1);
    if (cfg.stratify) strata = stratify(table);

    // Direct estimates from the survey replace the table columns.
    std::map<std::string, std::uint32_t> direct_flags;
    if (cfg.survey) {
        const auto rows = direct::read_survey_csv(*cfg.survey);
        std::map<std::string, std::string> groups;
        for (std::size_t i = 0; i < n; ++i) groups[ids[i]] = std::to_string(strata[i]);
        for (const auto& resp : cfg.responses) {
            if (!resp.indicator) continue;
            direct::EstimateOptions opt;
            opt.indicator = *resp.indicator == "anemia" ? direct::Indicator::Anemia : direct::Indicator::Stunting;
            opt.groups = groups;
            std::vector<std::optional<double>> y(n), v(n);
            for (const auto& e : direct::estimate_areas(rows, opt)) {
                const auto i = table.index_of(e.area_id);
                if (!std::isfinite(e.var_y)) continue;  // no donor: treated as unsampled
                y[i] = e.y;
                v[i] = e.var_y;
                direct_flags[e.area_id] |= e.flags;
            }
            table.set_column(resp.y_column, std::move(y));
            table.set_column(resp.var_column, std::move(v));
        }
    }

    // Geometry, keyed by area.
    std::vector<spatial::AreaGeo> geos(n);
    for (std::size_t i = 0; i < n; ++i) {
        geos[i].area_id = ids[i];
        geos[i].latitude = table.lat(i);
        geos[i].longitude = table.lon(i);
    }
    if (cfg.geometry) {
        for (auto& g : spatial::read_geojson(*cfg.geometry)) {
            const auto i = table.index_of(g.area_id);
            geos[i].boundary = std::move(g.boundary);
        }
    }

    std::map<int, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < n; ++i) members[strata[i]].push_back(i);

    // Weights per stratum: rebuilt inside the stratum, or the national
    // matrix restricted to it.
    std::map<int, spatial::SpatialWeights> weights;
    if (cfg.spatial.enabled) {
        std::optional<spatial::SpatialWeights> national;
        if (cfg.spatial.rule == "file") {
            national = spatial::read_triplets(*cfg.spatial.weights_file, ids);
        } else if (cfg.spatial.scope == "national") {
            national = build_weights(cfg, geos);
        }
        for (const auto& [s, rows] : members) {
            if (national) {
                weights.emplace(s, national->restrict_to(rows));
            } else {
                std::vector<spatial::AreaGeo> sub;
                sub.reserve(rows.size());
                for (auto r : rows) sub.push_back(geos[r]);
                weights.emplace(s, build_weights(cfg, sub));
            }
        }
    }

    std::vector<Job> jobs;
    for (std::size_t r = 0; r < cfg.responses.size(); ++r) {
        for (const auto& [s, rows] : members) {
            Job job;
            job.response = r;
            job.stratum = s;
            job.areas = rows;
            job.weights = cfg.spatial.enabled ? &weights.at(s) : nullptr;
            jobs.push_back(std::move(job));
        }
    }

    // Jobs are independent; results land in their own slot and are written
    // afterwards in job order.
    std::vector<JobResult> results(jobs.size());
    std::vector<std::exception_ptr> errors(jobs.size());
    const unsigned workers = std::max(1u, std::min<unsigned>(cfg.threads, static_cast<unsigned>(jobs.size())));
    auto work = [&](unsigned t) {
        for (std::size_t j = t; j < jobs.size(); j += workers) {
            try {
                results[j] = run_job(table, jobs[j], j, cfg, direct_flags);
            } catch (...) {
                errors[j] = std::current_exception();
            }
        }
    };
    if (workers == 1) {
        work(0);
    } else {
        std::vector<std::jthread> pool;
        for (unsigned t = 0; t < workers; ++t) pool.emplace_back(work, t);
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    std::filesystem::create_directories(cfg.output_dir);
    RunSummary summary;
    summary.areas = n;
    for (const auto& [s, rows] : members) summary.stratum_sizes[s] = rows.size();
    auto open = [&](const std::string& name) {
        std::ofstream out(cfg.output_dir / name);
        if (!out) throw Error(Errc::Io, "cannot write " + (cfg.output_dir / name).string());
        summary.outputs.push_back(name);
        return out;
    };

    for (const auto& [s, w] : weights) {
        const std::string name = "weights_s" + std::to_string(s) + ".csv";
        spatial::write_triplets(cfg.output_dir / name, w);
        summary.outputs.push_back(name);
    }
    for (const auto& r : results) {
        for (const auto& [name, body] : r.reports) {
            auto out = open(name);
            out << body.dump(2) << '\n';
        }
        for (const auto& [name, text] : r.mse_files) {
            auto out = open(name);
            out << text;
        }
    }

    // Long table: every estimator row, ordered by response, area, model.
    {
        auto out = open("predictions.csv");
        out << "area_id,stratum,response,model,estimator_kind,value,raw_value,gamma,mse,mse_method,flags\n";
        for (std::size_t r = 0; r < cfg.responses.size(); ++r) {
            std::vector<const Row*> rows;
            for (std::size_t j = 0; j < jobs.size(); ++j) {
                if (jobs[j].response != r) continue;
                for (const auto& row : results[j].rows) rows.push_back(&row);
            }
            std::stable_sort(rows.begin(), rows.end(), [](const Row* a, const Row* b) {
                return a->area != b->area ? a->area < b->area : a->model < b->model;
            });
            for (const Row* row : rows) {
                out << csv::quote(ids[row->area]) << ',' << strata[row->area] << ',' << csv::quote(cfg.responses[r].name)
                    << ',' << model_name(row->model) << ',' << to_string(row->kind) << ','
                    << csv::format_double(row->value) << ',' << csv::format_double(row->raw_value) << ','
                    << csv::format_double(row->gamma) << ',' << opt_number(row->mse) << ',' << row->mse_method << ','
                    << prediction_flags_to_string(row->flags) << '\n';
            }
        }
    }

    // Merged national table and GeoJSON, one row / feature per area.
    for (std::size_t r = 0; r < cfg.responses.size(); ++r) {
        const auto& resp = cfg.responses[r];
        std::vector<const Row*> direct_row(n, nullptr), fh_row(n, nullptr), sfh_row(n, nullptr);
        for (std::size_t j = 0; j < jobs.size(); ++j) {
            if (jobs[j].response != r) continue;
            for (const auto& row : results[j].rows) {
                auto& slot = row.model == Model::Direct ? direct_row[row.area]
                                                        : (row.model == Model::Fh ? fh_row[row.area] : sfh_row[row.area]);
                if (slot != nullptr) throw Error(Errc::InvalidInput, "area " + ids[row.area] + " predicted twice");
                slot = &row;
            }
        }
        auto out = open("estimates_" + resp.name + ".csv");
        out << "area_id,stratum,sampled,direct,direct_mse,eblup,eblup_mse,eblup_kind,eblup_gamma,seblup,seblup_mse,"
               "seblup_kind,seblup_gamma,estimator_kind,value,raw_value,mse,mse_method,flags\n";
        auto features = nlohmann::json::array();
        for (std::size_t i = 0; i < n; ++i) {
            const Row* fin = sfh_row[i] != nullptr ? sfh_row[i] : fh_row[i];
            if (fin == nullptr) throw Error(Errc::InvalidInput, "area " + ids[i] + " received no prediction");
            out << csv::quote(ids[i]) << ',' << strata[i] << ',' << (direct_row[i] != nullptr ? 1 : 0) << ',';
            if (direct_row[i] != nullptr) {
                out << csv::format_double(direct_row[i]->value) << ',' << opt_number(direct_row[i]->mse) << ',';
            } else {
                out << ",,";
            }
            for (const Row* m : {fh_row[i], sfh_row[i]}) {
                if (m != nullptr) {
                    out << csv::format_double(m->value) << ',' << opt_number(m->mse) << ',' << to_string(m->kind) << ','
                        << csv::format_double(m->gamma) << ',';
                } else {
                    out << ",,,,";
                }
            }
            out << to_string(fin->kind) << ',' << csv::format_double(fin->value) << ','
                << csv::format_double(fin->raw_value) << ',' << opt_number(fin->mse) << ',' << fin->mse_method << ','
                << prediction_flags_to_string(fin->flags) << '\n';

            nlohmann::json props = {{"area_id", ids[i]},
                                    {"value", fin->value},
                                    {"mse", optional_json(fin->mse)},
                                    {"estimator_kind", std::string(to_string(fin->kind))},
                                    {"stratum", strata[i]},
                                    {"sampled", direct_row[i] != nullptr},
                                    {"flags", prediction_flags_to_string(fin->flags)}};
            features.push_back({{"type", "Feature"}, {"properties", props}, {"geometry", geojson::geometry(geos[i])}});
        }
        const std::string gname = "estimates_" + resp.name + ".geojson";
        geojson::write(cfg.output_dir / gname, {{"type", "FeatureCollection"}, {"features", features}});
        summary.outputs.push_back(gname);
    }

    // Manifest: no timestamps or absolute paths, so reruns compare equal.
    {
        nlohmann::json config_echo = cfg.raw;
        config_echo.erase("output_dir");
        nlohmann::json strata_json = nlohmann::json::object();
        for (const auto& [s, rows] : members) {
            nlohmann::json sj = {{"areas", rows.size()}};
            for (std::size_t r = 0; r < cfg.responses.size(); ++r) {
                for (std::size_t j = 0; j < jobs.size(); ++j) {
                    if (jobs[j].response != r || jobs[j].stratum != s) continue;
                    std::size_t sampled = 0;
                    for (const auto& row : results[j].rows) sampled += row.model == Model::Direct ? 1 : 0;
                    sj[cfg.responses[r].name] = {{"sampled", sampled}, {"unsampled", rows.size() - sampled}};
                }
            }
            strata_json[std::to_string(s)] = sj;
        }
        std::vector<std::string> outputs = summary.outputs;
        outputs.push_back("manifest.json");
        std::sort(outputs.begin(), outputs.end());
        nlohmann::json weights_json = nullptr;
        if (cfg.spatial.enabled) {
            weights_json = {{"rule", weights.begin()->second.rule()},
                            {"scope", cfg.spatial.rule == "file" ? "national" : cfg.spatial.scope}};
        }
        const nlohmann::json manifest = {{"tool", "sae"},
                                         {"version", std::string(version())},
                                         {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                                       std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                                       std::to_string(EIGEN_MINOR_VERSION)},
                                         {"seed", cfg.seed},
                                         {"config", config_echo},
                                         {"areas", n},
                                         {"strata", strata_json},
                                         {"weights", weights_json},
                                         {"outputs", outputs}};
        auto out = open("manifest.json");
        out << manifest.dump(2) << '\n';
    }
    std::sort(summary.outputs.begin(), summary.outputs.end());
    return summary;
}

}  // namespace sae::pipeline
