#include "sae/geojson.hpp"

#include "sae/error.hpp"

#include <fstream>

namespace sae::geojson {

namespace {

nlohmann::json ring_json(const spatial::Ring& ring) {
    auto out = nlohmann::json::array();
    for (const auto& p : ring) out.push_back({p.lon, p.lat});
    if (!ring.empty() && (ring.front().lon != ring.back().lon || ring.front().lat != ring.back().lat)) {
        out.push_back({ring.front().lon, ring.front().lat});
    }
    return out;
}

}  // namespace

nlohmann::json geometry(const spatial::AreaGeo& area) {
    if (area.boundary.empty()) {
        return {{"type", "Point"}, {"coordinates", {area.longitude, area.latitude}}};
    }
    if (area.boundary.size() == 1) {
        return {{"type", "Polygon"}, {"coordinates", nlohmann::json::array({ring_json(area.boundary.front())})}};
    }
    auto polys = nlohmann::json::array();
    for (const auto& ring : area.boundary) polys.push_back(nlohmann::json::array({ring_json(ring)}));
    return {{"type", "MultiPolygon"}, {"coordinates", polys}};
}

void write(const std::filesystem::path& path, const nlohmann::json& doc) {
    std::ofstream out(path);
    if (!out) throw Error(Errc::Io, "cannot write " + path.string());
    out << doc.dump() << '\n';
}

}  // namespace sae::geojson
