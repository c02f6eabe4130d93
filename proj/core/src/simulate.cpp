#include "sae/simulate.hpp"

#include "sae/bootstrap.hpp"
#include "sae/csv.hpp"
#include "sae/direct.hpp"
#include "sae/error.hpp"
#include "sae/geojson.hpp"

#include <boost/random/uniform_01.hpp>
#include <boost/random/uniform_int_distribution.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>

namespace sae::simulate {

namespace {

double uniform(Engine& eng) {
    boost::random::uniform_01<double> dist;
    return dist(eng);
}

int uniform_int(Engine& eng, int lo, int hi) {
    boost::random::uniform_int_distribution<int> dist(lo, hi);
    return dist(eng);
}

double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// step is 10^-k; dividing by 10^k gives the shortest decimal representation.
double round_to(double v, double step) {
    const double inv = std::round(1.0 / step);
    return std::round(v * inv) / inv;
}

spatial::Ring square(double lon, double lat, double side) {
    return {{lon, lat}, {lon + side, lat}, {lon + side, lat + side}, {lon, lat + side}, {lon, lat}};
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(Errc::Io, "cannot write " + path.string());
    return out;
}

void write_geometry(const std::filesystem::path& path, const std::vector<spatial::AreaGeo>& geos) {
    auto features = nlohmann::json::array();
    for (const auto& g : geos) {
        features.push_back({{"type", "Feature"},
                            {"properties", {{"area_id", g.area_id}, {"altitude_km", g.altitude_km}}},
                            {"geometry", geojson::geometry(g)}});
    }
    geojson::write(path, {{"type", "FeatureCollection"}, {"features", features}});
}

// Poverty share by rank of a latent deprivation score, so the three strata
// hold roughly a third of the areas each.
double poverty_from_rank(double q) {
    if (q < 0.33) return 2.0 + q / 0.33 * 27.9;
    if (q < 0.688) return 30.0 + (q - 0.33) / 0.358 * 24.9;
    return 55.0 + (q - 0.688) / 0.312 * 40.0;
}

int stratum_of(double poverty) { return poverty < 30.0 ? 1 : (poverty < 55.0 ? 2 : 3); }

}  // namespace

std::vector<spatial::AreaGeo> lattice(std::size_t rows, std::size_t cols, double cell_deg, double lon0, double lat0) {
    std::vector<spatial::AreaGeo> out;
    out.reserve(rows * cols);
    char buf[32];
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            spatial::AreaGeo g;
            std::snprintf(buf, sizeof buf, "L%04zu", r * cols + c + 1);
            g.area_id = buf;
            const double lon = lon0 + static_cast<double>(c) * cell_deg;
            const double lat = lat0 + static_cast<double>(r) * cell_deg;
            g.longitude = lon + 0.5 * cell_deg;
            g.latitude = lat + 0.5 * cell_deg;
            g.boundary.push_back(square(lon, lat, cell_deg));
            out.push_back(std::move(g));
        }
    }
    return out;
}

spatial::SpatialWeights rook_lattice(std::size_t rows, std::size_t cols) {
    std::vector<std::string> ids;
    std::vector<std::vector<std::size_t>> nb(rows * cols);
    char buf[32];
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            std::snprintf(buf, sizeof buf, "L%04zu", i + 1);
            ids.emplace_back(buf);
            if (r > 0) nb[i].push_back(i - cols);
            if (c > 0) nb[i].push_back(i - 1);
            if (c + 1 < cols) nb[i].push_back(i + 1);
            if (r + 1 < rows) nb[i].push_back(i + cols);
        }
    }
    return spatial::SpatialWeights(std::move(ids), std::move(nb), "contiguity:rook");
}

Draw draw_fh(const Matrix& x, const Vector& beta, double sigma2_u, const Vector& sigma2_e, Engine& eng) {
    const auto d = x.rows();
    Draw out;
    out.u.resize(d);
    const double sd = std::sqrt(std::max(0.0, sigma2_u));
    for (Eigen::Index i = 0; i < d; ++i) out.u[i] = sd * standard_normal(eng);
    out.theta = x * beta + out.u;
    out.y = out.theta;
    for (Eigen::Index i = 0; i < d; ++i) out.y[i] += std::sqrt(sigma2_e[i]) * standard_normal(eng);
    return out;
}

Draw draw_sfh(const Matrix& x, const Vector& beta, double sigma2_eps, double rho, const spatial::SpatialWeights& w,
              const Vector& sigma2_e, Engine& eng) {
    const bootstrap::SarSampler sampler(w, sigma2_eps, rho);
    Draw out;
    out.u = sampler.draw(eng);
    out.theta = x * beta + out.u;
    out.y = out.theta;
    for (Eigen::Index i = 0; i < x.rows(); ++i) out.y[i] += std::sqrt(sigma2_e[i]) * standard_normal(eng);
    return out;
}

NationalFiles write_national_fixture(const std::filesystem::path& dir, const NationalOptions& opt) {
    std::filesystem::create_directories(dir);
    Engine eng_geo = make_stream(opt.seed, 0);
    Engine eng_fx = make_stream(opt.seed, 1);
    Engine eng_survey = make_stream(opt.seed, 2);

    // Mainland cells east of a diagonal coastline; islands are small squares
    // centred in sea cells so they touch nothing.
    struct Cell {
        std::size_t r, c;
        bool island;
    };
    auto at_sea = [](std::size_t r, std::size_t c) { return static_cast<double>(c) + 0.6 * static_cast<double>(r) < 6.0; };
    std::vector<Cell> cells;
    for (std::size_t r = 0; r < opt.rows; ++r) {
        for (std::size_t c = 0; c < opt.cols; ++c) {
            if (!at_sea(r, c)) cells.push_back({r, c, false});
        }
    }
    std::size_t placed = 0;
    for (std::size_t r = 0; r < opt.rows && placed < opt.islands; r += 2) {
        for (std::size_t c = 0; c < opt.cols && placed < opt.islands; c += 2) {
            if (at_sea(r, c)) {
                cells.push_back({r, c, true});
                ++placed;
            }
        }
    }

    const std::size_t n = cells.size();
    std::vector<spatial::AreaGeo> geos(n);
    std::vector<double> latent(n);
    std::map<std::string, std::vector<double>> cov;
    const std::array<std::string, 7> names{"internet", "refrig", "analfabet", "agua", "elect", "rural", "sis"};
    for (const auto& nm : names) cov[nm].resize(n);
    std::vector<double> altitude(n);
    char buf[80];
    std::size_t island_no = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& cell = cells[i];
        auto& g = geos[i];
        const double lon = -81.0 + static_cast<double>(cell.c) * opt.cell_deg;
        const double lat = -18.0 + static_cast<double>(cell.r) * opt.cell_deg;
        if (cell.island) {
            std::snprintf(buf, sizeof buf, "2501%02zu", ++island_no);
            const double side = 0.4 * opt.cell_deg;
            g.boundary.push_back(square(lon + 0.3 * opt.cell_deg, lat + 0.3 * opt.cell_deg, side));
        } else {
            std::snprintf(buf, sizeof buf, "%02zu%02zu%02zu", cell.r / 4 + 1, cell.c / 4 + 1,
                          (cell.r % 4) * 4 + cell.c % 4 + 1);
            g.boundary.push_back(square(lon, lat, opt.cell_deg));
        }
        g.area_id = buf;
        g.longitude = lon + 0.5 * opt.cell_deg;
        g.latitude = lat + 0.5 * opt.cell_deg;

        const double rr = static_cast<double>(cell.r);
        const double cc = static_cast<double>(cell.c);
        const double dev = 0.8 * std::sin(0.15 * rr + 0.5) + 0.6 * std::cos(0.11 * cc) - 0.02 * cc + 0.4 * standard_normal(eng_geo);
        latent[i] = dev;
        altitude[i] = std::clamp(4.5 * std::exp(-std::pow((cc - 28.0) / 10.0, 2)) + 0.3 * standard_normal(eng_geo), 0.0, 4.8);
        g.altitude_km = round_to(altitude[i], 0.001);
        altitude[i] = g.altitude_km;
        auto share = [&](double z) { return round_to(logistic(z + 0.35 * standard_normal(eng_geo)), 1e-4); };
        cov["internet"][i] = share(1.5 * dev - 1.0);
        cov["refrig"][i] = share(1.2 * dev);
        cov["analfabet"][i] = share(-1.2 * dev - 2.0);
        cov["agua"][i] = share(0.8 * dev + 1.0);
        cov["elect"][i] = share(dev + 1.5);
        cov["rural"][i] = share(-1.5 * dev);
        cov["sis"][i] = share(-0.8 * dev + 0.5);
    }

    // Poverty follows deprivation (the negative of development) by rank.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return latent[a] > latent[b]; });
    std::vector<double> poverty(n);
    std::vector<int> stratum(n);
    for (std::size_t k = 0; k < n; ++k) {
        const double q = (static_cast<double>(k) + 0.5) / static_cast<double>(n);
        poverty[order[k]] = round_to(poverty_from_rank(q), 0.1);
        stratum[order[k]] = stratum_of(poverty[order[k]]);
    }

    // True prevalences: per-stratum linear predictor plus SAR effects at the
    // stratum-specific (sigma2, rho) over that stratum's rook contiguity.
    struct Effect {
        double sigma2, rho;
    };
    const std::array<Effect, 3> anemia_fx{{{0.00524, 0.570}, {0.00451, 0.694}, {0.00401, 0.742}}};
    const std::array<Effect, 3> stunting_fx{{{0.00566, 0.474}, {0.00948, 0.235}, {0.01057, 0.317}}};
    std::vector<double> anemia(n), stunting(n);
    for (int s = 1; s <= 3; ++s) {
        std::vector<spatial::AreaGeo> sub;
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < n; ++i) {
            if (stratum[i] == s) {
                sub.push_back(geos[i]);
                idx.push_back(i);
            }
        }
        if (idx.empty()) continue;
        const auto w = spatial::neighbors_contiguity(sub);
        const auto& fa = anemia_fx[static_cast<std::size_t>(s - 1)];
        const auto& fs = stunting_fx[static_cast<std::size_t>(s - 1)];
        const Vector ua = bootstrap::SarSampler(w, fa.sigma2, fa.rho).draw(eng_fx);
        const Vector us = bootstrap::SarSampler(w, fs.sigma2, fs.rho).draw(eng_fx);
        for (std::size_t k = 0; k < idx.size(); ++k) {
            const std::size_t i = idx[k];
            const double inet = cov["internet"][i], rural = cov["rural"][i], illit = cov["analfabet"][i];
            double a = 0.0, st = 0.0;
            switch (s) {
                case 1:
                    a = 0.45 - 0.28 * inet + 0.03 * altitude[i];
                    st = 0.06 + 0.12 * rural;
                    break;
                case 2:
                    a = 0.36 - 0.20 * inet + 0.04 * altitude[i] + 0.08 * rural;
                    st = 0.10 + 0.15 * rural + 0.10 * illit;
                    break;
                default:
                    a = 0.40 + 0.05 * altitude[i] + 0.10 * illit;
                    st = 0.16 + 0.15 * rural + 0.02 * altitude[i];
                    break;
            }
            anemia[i] = std::clamp(a + ua[static_cast<Eigen::Index>(k)], 0.02, 0.98);
            stunting[i] = std::clamp(st + us[static_cast<Eigen::Index>(k)], 0.02, 0.98);
        }
    }

    // Survey: a random subset of areas, a few clusters each, a handful of
    // children per cluster. Some areas get a single cluster and some rows
    // miss the hemoglobin reading.
    std::vector<direct::SurveyRow> survey;
    std::size_t islands_sampled = 0;
    for (std::size_t i = 0; i < n; ++i) {
        bool take = uniform(eng_survey) < opt.sample_rate;
        if (cells[i].island) {
            take = islands_sampled < 2;
            if (take) ++islands_sampled;
        }
        if (!take) continue;
        const int clusters = uniform(eng_survey) < 0.08 ? 1 : uniform_int(eng_survey, 2, 6);
        for (int c = 0; c < clusters; ++c) {
            const int kids = uniform_int(eng_survey, 3, 9);
            const double weight = round_to(20.0 + 380.0 * uniform(eng_survey), 0.01);
            for (int k = 0; k < kids; ++k) {
                direct::SurveyRow row;
                row.area_id = geos[i].area_id;
                row.cluster_id = geos[i].area_id + "-" + std::to_string(c + 1);
                row.sampling_weight = weight;
                row.age_months = uniform_int(eng_survey, 6, 59);
                const bool anaemic = uniform(eng_survey) < anemia[i];
                const double hb = anaemic ? 7.5 + 3.49 * uniform(eng_survey) : 11.0 + 3.5 * uniform(eng_survey);
                if (uniform(eng_survey) >= 0.03) row.hemoglobin_g_dl = round_to(hb, 0.1);
                row.stunted = uniform(eng_survey) < stunting[i];
                survey.push_back(std::move(row));
            }
        }
    }

    std::map<std::string, std::string> groups;
    for (std::size_t i = 0; i < n; ++i) groups[geos[i].area_id] = std::to_string(stratum[i]);
    direct::EstimateOptions ea{direct::Indicator::Anemia, nullptr, groups};
    direct::EstimateOptions es{direct::Indicator::Stunting, nullptr, groups};
    std::map<std::string, direct::DirectEstimate> dir_a, dir_s;
    for (auto& e : direct::estimate_areas(survey, ea)) dir_a[e.area_id] = e;
    for (auto& e : direct::estimate_areas(survey, es)) dir_s[e.area_id] = e;

    NationalFiles files{dir / "areas.csv", dir / "areas.geojson", dir / "survey.csv", dir / "truth.csv",
                        dir / "config.json"};

    // Rows sorted by area_id for stable diffs.
    std::vector<std::size_t> by_id(n);
    std::iota(by_id.begin(), by_id.end(), std::size_t{0});
    std::sort(by_id.begin(), by_id.end(), [&](std::size_t a, std::size_t b) { return geos[a].area_id < geos[b].area_id; });

    {
        auto out = open_out(files.areas);
        out << "area_id,lat,lon,altitude_km,poverty_pct,anemia,anemia_var,stunting,stunting_var";
        for (const auto& nm : names) out << ',' << nm;
        out << '\n';
        auto est = [](const std::map<std::string, direct::DirectEstimate>& m, const std::string& id) {
            auto it = m.find(id);
            if (it == m.end() || !std::isfinite(it->second.var_y)) return std::string(",");
            return csv::format_double(it->second.y) + "," + csv::format_double(it->second.var_y);
        };
        for (const auto i : by_id) {
            const auto& g = geos[i];
            out << g.area_id << ',' << csv::format_double(g.latitude) << ',' << csv::format_double(g.longitude) << ','
                << csv::format_double(altitude[i]) << ',' << csv::format_double(poverty[i]) << ','
                << est(dir_a, g.area_id) << ',' << est(dir_s, g.area_id);
            for (const auto& nm : names) out << ',' << csv::format_double(cov[nm][i]);
            out << '\n';
        }
    }
    {
        std::vector<spatial::AreaGeo> sorted;
        for (const auto i : by_id) sorted.push_back(geos[i]);
        write_geometry(files.geometry, sorted);
    }
    {
        auto out = open_out(files.survey);
        out << "area_id,cluster_id,weight,hemoglobin,stunted,age_months\n";
        for (const auto& r : survey) {
            out << r.area_id << ',' << r.cluster_id << ',' << csv::format_double(r.sampling_weight) << ','
                << (r.hemoglobin_g_dl ? csv::format_double(*r.hemoglobin_g_dl) : std::string()) << ','
                << (*r.stunted ? 1 : 0) << ',' << r.age_months << '\n';
        }
    }
    {
        auto out = open_out(files.truth);
        out << "area_id,stratum,anemia,stunting\n";
        for (const auto i : by_id) {
            out << geos[i].area_id << ',' << stratum[i] << ',' << csv::format_double(anemia[i]) << ','
                << csv::format_double(stunting[i]) << '\n';
        }
    }
    {
        nlohmann::json cfg = {
            {"areas", "areas.csv"},
            {"geometry", "areas.geojson"},
            {"responses", {"anemia", "stunting"}},
            {"covariates", {"internet", "refrig", "analfabet", "agua", "elect", "rural", "sis", "altitude_km"}},
            {"method", "REML"},
            {"stratify", true},
            {"selection", {{"backward", true}, {"alpha", 0.10}}},
            {"spatial", {{"enabled", true}, {"rule", "contiguity"}, {"scope", "stratum"}, {"method", "REML"}}},
            {"bootstrap", {{"enabled", true}, {"replicates", 100}, {"spatial", true}}},
            {"seed", opt.seed},
            {"output_dir", "out"},
        };
        std::ofstream out = open_out(files.config);
        out << cfg.dump(2) << '\n';
    }
    return files;
}

NationalFiles write_lattice_dataset(const std::filesystem::path& dir, const LatticeOptions& opt) {
    std::filesystem::create_directories(dir);
    Engine eng = make_stream(opt.seed, 0);
    const auto geos = lattice(opt.rows, opt.cols);
    const auto w = rook_lattice(opt.rows, opt.cols);
    const auto n = static_cast<Eigen::Index>(geos.size());
    Matrix x(n, 2);
    Vector s2e(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        x(i, 0) = 1.0;
        x(i, 1) = round_to(uniform(eng), 1e-4);
        s2e[i] = opt.sigma2_e_min + (opt.sigma2_e_max - opt.sigma2_e_min) * uniform(eng);
    }
    std::vector<bool> sampled(static_cast<std::size_t>(n));
    for (auto&& s : sampled) s = uniform(eng) < opt.sample_rate;
    const Vector beta = (Vector(2) << opt.intercept, opt.slope).finished();
    const Draw d = draw_sfh(x, beta, opt.sigma2, opt.rho, w, s2e, eng);

    NationalFiles files{dir / "areas.csv", dir / "areas.geojson", {}, dir / "truth.csv", dir / "config.json"};
    {
        auto out = open_out(files.areas);
        out << "area_id,lat,lon,altitude_km,poverty_pct,y,y_var,x1\n";
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto& g = geos[static_cast<std::size_t>(i)];
            out << g.area_id << ',' << csv::format_double(g.latitude) << ',' << csv::format_double(g.longitude)
                << ",0,0,";
            if (sampled[static_cast<std::size_t>(i)]) {
                out << csv::format_double(d.y[i]) << ',' << csv::format_double(s2e[i]);
            } else {
                out << ',';
            }
            out << ',' << csv::format_double(x(i, 1)) << '\n';
        }
    }
    write_geometry(files.geometry, geos);
    spatial::write_triplets(dir / "weights.csv", w);
    {
        auto out = open_out(files.truth);
        out << "area_id,theta,u\n";
        for (Eigen::Index i = 0; i < n; ++i) {
            out << geos[static_cast<std::size_t>(i)].area_id << ',' << csv::format_double(d.theta[i]) << ','
                << csv::format_double(d.u[i]) << '\n';
        }
    }
    {
        nlohmann::json cfg = {
            {"areas", "areas.csv"},
            {"geometry", "areas.geojson"},
            {"responses", {{{"name", "y"}, {"y", "y"}, {"var", "y_var"}}}},
            {"covariates", {"x1"}},
            {"method", "REML"},
            {"stratify", false},
            {"spatial", {{"enabled", opt.rho != 0.0}, {"rule", "file"}, {"weights_file", "weights.csv"}}},
            {"clamp", false},
            {"seed", opt.seed},
            {"output_dir", "out"},
        };
        auto out = open_out(files.config);
        out << cfg.dump(2) << '\n';
    }
    return files;
}

}  // namespace sae::simulate
