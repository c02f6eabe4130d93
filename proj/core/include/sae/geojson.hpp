#pragma once

#include "sae/weights.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>

namespace sae::geojson {

// Polygon for one ring, MultiPolygon (one ring each) for several, Point for a
// centroid-only area.
nlohmann::json geometry(const spatial::AreaGeo& area);

// Compact single-line dump with a trailing newline; keys are sorted, so equal
// documents give identical bytes.
void write(const std::filesystem::path& path, const nlohmann::json& doc);

}  // namespace sae::geojson
