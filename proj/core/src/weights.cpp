#include "sae/weights.hpp"

#include "sae/csv.hpp"
#include "sae/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

namespace sae::spatial {

double great_circle_km(double lat1, double lon1, double lat2, double lon2) {
    constexpr double deg = std::numbers::pi / 180.0;
    const double dlat = (lat2 - lat1) * deg;
    const double dlon = (lon2 - lon1) * deg;
    const double s1 = std::sin(dlat / 2.0);
    const double s2 = std::sin(dlon / 2.0);
    const double h = s1 * s1 + std::cos(lat1 * deg) * std::cos(lat2 * deg) * s2 * s2;
    return 2.0 * kEarthRadiusKm * std::asin(std::min(1.0, std::sqrt(h)));
}

SpatialWeights::SpatialWeights(std::vector<std::string> ids, std::vector<std::vector<std::size_t>> neighbors,
                               std::string rule)
    : ids_(std::move(ids)), neighbors_(std::move(neighbors)), rule_(std::move(rule)) {
    if (ids_.size() != neighbors_.size()) {
        throw Error(Errc::InvalidInput, "weights: id list and neighbour lists differ in length");
    }
    for (std::size_t i = 0; i < ids_.size(); ++i) {
        if (!index_.emplace(ids_[i], i).second) throw Error(Errc::InvalidInput, "duplicate area id " + ids_[i]);
    }
    for (std::size_t i = 0; i < neighbors_.size(); ++i) {
        auto& s = neighbors_[i];
        std::sort(s.begin(), s.end());
        if (std::adjacent_find(s.begin(), s.end()) != s.end()) {
            throw Error(Errc::InvalidInput, "duplicate neighbour for area " + ids_[i]);
        }
        for (auto j : s) {
            if (j >= ids_.size()) throw Error(Errc::InvalidInput, "neighbour index out of range");
            if (j == i) throw Error(Errc::InvalidInput, "area " + ids_[i] + " listed as its own neighbour");
        }
    }
}

std::vector<std::size_t> SpatialWeights::islands() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i) {
        if (is_island(i)) out.push_back(i);
    }
    return out;
}

bool SpatialWeights::contains(std::size_t i, std::size_t j) const {
    return std::binary_search(neighbors_[i].begin(), neighbors_[i].end(), j);
}

double SpatialWeights::weight(std::size_t i, std::size_t j) const {
    return contains(i, j) ? 1.0 / static_cast<double>(neighbors_[i].size()) : 0.0;
}

double SpatialWeights::total_weight() const {
    return static_cast<double>(size() - islands().size());
}

std::size_t SpatialWeights::index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw Error(Errc::InvalidInput, "unknown area id " + id);
    return it->second;
}

Eigen::SparseMatrix<double> SpatialWeights::matrix() const {
    std::vector<Eigen::Triplet<double>> trips;
    for (std::size_t i = 0; i < size(); ++i) {
        const double v = neighbors_[i].empty() ? 0.0 : 1.0 / static_cast<double>(neighbors_[i].size());
        for (auto j : neighbors_[i]) trips.emplace_back(static_cast<int>(i), static_cast<int>(j), v);
    }
    const auto n = static_cast<Eigen::Index>(size());
    Eigen::SparseMatrix<double> m(n, n);
    m.setFromTriplets(trips.begin(), trips.end());
    return m;
}

Eigen::MatrixXd SpatialWeights::dense() const { return Eigen::MatrixXd(matrix()); }

SpatialWeights SpatialWeights::restrict_to(std::span<const std::size_t> keep) const {
    std::vector<std::ptrdiff_t> new_index(size(), -1);
    std::vector<std::string> ids;
    ids.reserve(keep.size());
    for (std::size_t k = 0; k < keep.size(); ++k) {
        if (keep[k] >= size()) throw Error(Errc::InvalidInput, "restrict_to: index out of range");
        new_index[keep[k]] = static_cast<std::ptrdiff_t>(k);
        ids.push_back(ids_[keep[k]]);
    }
    std::vector<std::vector<std::size_t>> nb(keep.size());
    for (std::size_t k = 0; k < keep.size(); ++k) {
        for (auto j : neighbors_[keep[k]]) {
            if (new_index[j] >= 0) nb[k].push_back(static_cast<std::size_t>(new_index[j]));
        }
    }
    return SpatialWeights(std::move(ids), std::move(nb), rule_);
}

SpatialWeights SpatialWeights::reorder(std::span<const std::string> ids) const {
    if (ids.size() != size()) throw Error(Errc::InvalidInput, "reorder: id count mismatch");
    std::vector<std::size_t> keep;
    keep.reserve(ids.size());
    for (const auto& id : ids) keep.push_back(index_of(id));
    return restrict_to(keep);
}

namespace {

void validate_geos(std::span<const AreaGeo> geos, bool need_distinct_points) {
    std::set<std::string> seen;
    std::set<std::pair<double, double>> points;
    for (const auto& g : geos) {
        if (!seen.insert(g.area_id).second) throw Error(Errc::InvalidInput, "duplicate area id " + g.area_id);
        if (!(g.latitude >= -90.0 && g.latitude <= 90.0) || !(g.longitude >= -180.0 && g.longitude <= 180.0)) {
            throw Error(Errc::InvalidInput, "coordinates out of range for area " + g.area_id);
        }
        if (need_distinct_points && !points.emplace(g.latitude, g.longitude).second) {
            throw Error(Errc::InvalidInput, "duplicate coordinates for area " + g.area_id);
        }
    }
}

std::vector<std::string> ids_of(std::span<const AreaGeo> geos) {
    std::vector<std::string> ids;
    ids.reserve(geos.size());
    for (const auto& g : geos) ids.push_back(g.area_id);
    return ids;
}

std::string format_param(double v) {
    std::string s = csv::format_double(v);
    return s;
}

}  // namespace

SpatialWeights neighbors_distance(std::span<const AreaGeo> geos, double max_km) {
    if (!(max_km > 0.0)) throw Error(Errc::InvalidInput, "distance threshold must be positive");
    if (geos.size() < 2) throw Error(Errc::InvalidInput, "need at least two areas");
    validate_geos(geos, true);
    const std::size_t n = geos.size();
    std::vector<std::vector<std::size_t>> nb(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double d = great_circle_km(geos[i].latitude, geos[i].longitude, geos[j].latitude, geos[j].longitude);
            if (d <= max_km) {
                nb[i].push_back(j);
                nb[j].push_back(i);
            }
        }
    }
    return SpatialWeights(ids_of(geos), std::move(nb), "distance:L_km=" + format_param(max_km));
}

SpatialWeights neighbors_knn(std::span<const AreaGeo> geos, std::size_t k) {
    if (geos.size() < 2) throw Error(Errc::InvalidInput, "need at least two areas");
    if (k < 1 || k > geos.size() - 1) {
        throw Error(Errc::KTooLarge, "k=" + std::to_string(k) + " with " + std::to_string(geos.size()) + " areas");
    }
    validate_geos(geos, true);
    const std::size_t n = geos.size();
    std::vector<std::vector<std::size_t>> nb(n);
    std::vector<std::pair<double, std::size_t>> cand;
    cand.reserve(n - 1);
    for (std::size_t i = 0; i < n; ++i) {
        cand.clear();
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            cand.emplace_back(
                great_circle_km(geos[i].latitude, geos[i].longitude, geos[j].latitude, geos[j].longitude), j);
        }
        auto closer = [&](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first < b.first;
            return geos[a.second].area_id < geos[b.second].area_id;
        };
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(), closer);
        for (std::size_t m = 0; m < k; ++m) nb[i].push_back(cand[m].second);
    }
    return SpatialWeights(ids_of(geos), std::move(nb), "knn:k=" + std::to_string(k));
}

namespace {

struct Box {
    double min_lon, min_lat, max_lon, max_lat;
    bool overlaps(const Box& o, double tol) const {
        return min_lon <= o.max_lon + tol && o.min_lon <= max_lon + tol && min_lat <= o.max_lat + tol &&
               o.min_lat <= max_lat + tol;
    }
};

struct Edge {
    LonLat a, b;
    Box box;
};

std::vector<Edge> edges_of(const AreaGeo& g) {
    std::vector<Edge> out;
    for (const auto& ring : g.boundary) {
        std::size_t n = ring.size();
        if (n >= 2 && ring.front().lon == ring.back().lon && ring.front().lat == ring.back().lat) --n;
        for (std::size_t v = 0; v < n; ++v) {
            const LonLat a = ring[v];
            const LonLat b = ring[(v + 1) % n];
            out.push_back({a, b,
                           {std::min(a.lon, b.lon), std::min(a.lat, b.lat), std::max(a.lon, b.lon),
                            std::max(a.lat, b.lat)}});
        }
    }
    return out;
}

bool share_segment(const Edge& e, const Edge& f, double tol) {
    const double dx = e.b.lon - e.a.lon;
    const double dy = e.b.lat - e.a.lat;
    const double len = std::hypot(dx, dy);
    if (len <= tol) return false;
    const double ux = dx / len;
    const double uy = dy / len;
    auto offset = [&](const LonLat& p) { return ux * (p.lat - e.a.lat) - uy * (p.lon - e.a.lon); };
    auto along = [&](const LonLat& p) { return ux * (p.lon - e.a.lon) + uy * (p.lat - e.a.lat); };
    if (std::abs(offset(f.a)) > tol || std::abs(offset(f.b)) > tol) return false;
    const double t0 = along(f.a);
    const double t1 = along(f.b);
    const double overlap = std::min(len, std::max(t0, t1)) - std::max(0.0, std::min(t0, t1));
    return overlap > tol;
}

}  // namespace

SpatialWeights neighbors_contiguity(std::span<const AreaGeo> geos, double tolerance_deg) {
    validate_geos(geos, false);
    const std::size_t n = geos.size();
    std::vector<std::vector<Edge>> edges(n);
    std::vector<Box> boxes(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (geos[i].boundary.empty()) throw Error(Errc::MissingBoundary, "area " + geos[i].area_id + " has no polygon");
        edges[i] = edges_of(geos[i]);
        Box b{INFINITY, INFINITY, -INFINITY, -INFINITY};
        for (const auto& e : edges[i]) {
            b.min_lon = std::min(b.min_lon, e.box.min_lon);
            b.min_lat = std::min(b.min_lat, e.box.min_lat);
            b.max_lon = std::max(b.max_lon, e.box.max_lon);
            b.max_lat = std::max(b.max_lat, e.box.max_lat);
        }
        boxes[i] = b;
    }
    std::vector<std::vector<std::size_t>> nb(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (!boxes[i].overlaps(boxes[j], tolerance_deg)) continue;
            bool adjacent = false;
            for (const auto& e : edges[i]) {
                if (!e.box.overlaps(boxes[j], tolerance_deg)) continue;
                for (const auto& f : edges[j]) {
                    if (e.box.overlaps(f.box, tolerance_deg) && share_segment(e, f, tolerance_deg)) {
                        adjacent = true;
                        break;
                    }
                }
                if (adjacent) break;
            }
            if (adjacent) {
                nb[i].push_back(j);
                nb[j].push_back(i);
            }
        }
    }
    return SpatialWeights(ids_of(geos), std::move(nb), "contiguity:rook");
}

double morans_i(std::span<const double> values, const SpatialWeights& w) {
    const std::size_t n = values.size();
    if (n != w.size()) throw Error(Errc::InvalidInput, "morans_i: value count does not match weights");
    double mean = 0.0;
    for (double v : values) {
        if (!std::isfinite(v)) throw Error(Errc::InvalidInput, "morans_i: non-finite value");
        mean += v;
    }
    mean /= static_cast<double>(n);
    double denom = 0.0;
    for (double v : values) denom += (v - mean) * (v - mean);
    const bool constant = std::all_of(values.begin(), values.end(), [&](double v) { return v == values.front(); });
    if (constant || !(denom > 0.0)) throw Error(Errc::ZeroVariance, "morans_i: all values equal");
    const double s0 = w.total_weight();
    if (!(s0 > 0.0)) throw Error(Errc::InvalidInput, "morans_i: weights have no links");
    double num = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (w.is_island(i)) continue;
        const double wi = 1.0 / static_cast<double>(w.degree(i));
        double lag = 0.0;
        for (auto j : w.neighbors(i)) lag += values[j] - mean;
        num += wi * (values[i] - mean) * lag;
    }
    return static_cast<double>(n) / s0 * num / denom;
}

namespace {

Ring parse_ring(const nlohmann::json& coords) {
    Ring ring;
    for (const auto& pt : coords) {
        if (!pt.is_array() || pt.size() < 2) throw Error(Errc::InvalidInput, "geojson: bad coordinate");
        ring.push_back({pt[0].get<double>(), pt[1].get<double>()});
    }
    return ring;
}

// Area-weighted centroid of the largest outer ring (planar in lon/lat).
LonLat ring_centroid(const Ring& ring) {
    double a = 0.0, cx = 0.0, cy = 0.0;
    const std::size_t n = ring.size();
    for (std::size_t i = 0; i < n; ++i) {
        const auto& p = ring[i];
        const auto& q = ring[(i + 1) % n];
        const double cross = p.lon * q.lat - q.lon * p.lat;
        a += cross;
        cx += (p.lon + q.lon) * cross;
        cy += (p.lat + q.lat) * cross;
    }
    if (std::abs(a) < 1e-300) {
        LonLat m{0.0, 0.0};
        for (const auto& p : ring) {
            m.lon += p.lon / static_cast<double>(n);
            m.lat += p.lat / static_cast<double>(n);
        }
        return m;
    }
    return {cx / (3.0 * a), cy / (3.0 * a)};
}

double ring_area(const Ring& ring) {
    double a = 0.0;
    for (std::size_t i = 0; i < ring.size(); ++i) {
        const auto& p = ring[i];
        const auto& q = ring[(i + 1) % ring.size()];
        a += p.lon * q.lat - q.lon * p.lat;
    }
    return std::abs(a) / 2.0;
}

}  // namespace

std::vector<AreaGeo> read_geojson(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::Io, "cannot open " + path.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::InvalidInput, path.string() + ": " + e.what());
    }
    if (doc.value("type", "") != "FeatureCollection") {
        throw Error(Errc::InvalidInput, path.string() + ": expected a FeatureCollection");
    }
    std::vector<AreaGeo> out;
    for (const auto& feature : doc.at("features")) {
        const auto& props = feature.at("properties");
        AreaGeo g;
        const auto& id = props.at("area_id");
        g.area_id = id.is_string() ? id.get<std::string>() : id.dump();
        g.altitude_km = props.value("altitude_km", 0.0);
        const auto& geom = feature.at("geometry");
        const std::string type = geom.at("type").get<std::string>();
        const auto& coords = geom.at("coordinates");
        std::vector<std::vector<Ring>> polygons;
        if (type == "Polygon") {
            std::vector<Ring> poly;
            for (const auto& r : coords) poly.push_back(parse_ring(r));
            polygons.push_back(std::move(poly));
        } else if (type == "MultiPolygon") {
            for (const auto& p : coords) {
                std::vector<Ring> poly;
                for (const auto& r : p) poly.push_back(parse_ring(r));
                polygons.push_back(std::move(poly));
            }
        } else if (type == "Point") {
            g.longitude = coords.at(0).get<double>();
            g.latitude = coords.at(1).get<double>();
        } else {
            throw Error(Errc::InvalidInput, path.string() + ": unsupported geometry " + type);
        }
        const Ring* largest = nullptr;
        for (auto& poly : polygons) {
            for (auto& ring : poly) {
                g.boundary.push_back(ring);
            }
            if (!poly.empty() && (largest == nullptr || ring_area(poly.front()) > ring_area(*largest))) {
                largest = &poly.front();
            }
        }
        if (largest != nullptr) {
            const auto c = ring_centroid(*largest);
            g.longitude = c.lon;
            g.latitude = c.lat;
        }
        if (props.contains("lat") && props.contains("lon")) {
            g.latitude = props["lat"].get<double>();
            g.longitude = props["lon"].get<double>();
        }
        out.push_back(std::move(g));
    }
    return out;
}

std::vector<AreaGeo> read_centroids_csv(const std::filesystem::path& path) {
    const auto t = csv::Table::read(path);
    const auto c_id = t.require("area_id");
    const auto c_lat = t.require("lat");
    const auto c_lon = t.require("lon");
    const auto c_alt = t.find("altitude_km");
    std::vector<AreaGeo> out;
    out.reserve(t.rows());
    for (std::size_t r = 0; r < t.rows(); ++r) {
        AreaGeo g;
        g.area_id = t.text(r, c_id);
        g.latitude = t.required_number(r, c_lat);
        g.longitude = t.required_number(r, c_lon);
        if (c_alt) g.altitude_km = t.number(r, *c_alt).value_or(0.0);
        out.push_back(std::move(g));
    }
    return out;
}

void write_triplets(const std::filesystem::path& path, const SpatialWeights& w) {
    std::ofstream out(path);
    if (!out) throw Error(Errc::Io, "cannot write " + path.string());
    out << "i_id,j_id,w\n";
    for (std::size_t i = 0; i < w.size(); ++i) {
        for (auto j : w.neighbors(i)) {
            out << csv::quote(w.ids()[i]) << ',' << csv::quote(w.ids()[j]) << ','
                << csv::format_double(w.weight(i, j)) << '\n';
        }
    }
}

SpatialWeights read_triplets(const std::filesystem::path& path, std::span<const std::string> ids) {
    const auto t = csv::Table::read(path);
    const auto c_i = t.require("i_id");
    const auto c_j = t.require("j_id");
    const auto c_w = t.require("w");
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < ids.size(); ++i) index.emplace(ids[i], i);
    std::vector<std::vector<std::size_t>> nb(ids.size());
    std::vector<std::vector<double>> given(ids.size());
    for (std::size_t r = 0; r < t.rows(); ++r) {
        auto it = index.find(t.text(r, c_i));
        auto jt = index.find(t.text(r, c_j));
        if (it == index.end() || jt == index.end()) {
            throw Error(Errc::InvalidInput, path.string() + ": triplet references unknown area on row " +
                                                std::to_string(r + 2));
        }
        const double v = t.required_number(r, c_w);
        if (v == 0.0) continue;
        nb[it->second].push_back(jt->second);
        given[it->second].push_back(v);
    }
    for (std::size_t i = 0; i < nb.size(); ++i) {
        const double expect = nb[i].empty() ? 0.0 : 1.0 / static_cast<double>(nb[i].size());
        for (double v : given[i]) {
            if (std::abs(v - expect) > 1e-9) {
                throw Error(Errc::InvalidInput, path.string() + ": row for area " + std::string(ids[i]) +
                                                    " is not of the form 1/K_i");
            }
        }
    }
    return SpatialWeights(std::vector<std::string>(ids.begin(), ids.end()), std::move(nb), "file:" + path.string());
}

}  // namespace sae::spatial
