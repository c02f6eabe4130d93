#include "sae/csv.hpp"

#include "sae/error.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>

namespace sae::csv {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(field));
            field.clear();
        } else if (c != '\r') {
            field.push_back(c);
        }
    }
    out.push_back(std::move(field));
    return out;
}

std::string quote(const std::string& field) {
    if (field.find_first_of(",\"\n") == std::string::npos) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out.push_back('"');
        out.push_back(c);
    }
    out.push_back('"');
    return out;
}

std::string format_double(double value) {
    if (std::isnan(value)) return "";
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
    return std::string(buf, ptr);
}

Table Table::parse(std::istream& in, const std::string& source) {
    Table t;
    t.source_ = source;
    std::string line;
    bool have_header = false;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!have_header) {
            // strip UTF-8 BOM
            if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
            if (line.empty()) continue;
            t.header_ = split_line(line);
            have_header = true;
            continue;
        }
        if (line.empty() || line == "\r") continue;
        auto fields = split_line(line);
        if (fields.size() != t.header_.size()) {
            throw Error(Errc::InvalidInput, source + ":" + std::to_string(line_no) + ": expected " +
                                                std::to_string(t.header_.size()) + " fields, got " +
                                                std::to_string(fields.size()));
        }
        t.cells_.push_back(std::move(fields));
    }
    if (!have_header) throw Error(Errc::InvalidInput, source + ": missing header line");
    return t;
}

Table Table::read(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::Io, "cannot open " + path.string());
    return parse(in, path.string());
}

std::optional<std::size_t> Table::find(const std::string& column) const {
    for (std::size_t i = 0; i < header_.size(); ++i) {
        if (header_[i] == column) return i;
    }
    return std::nullopt;
}

std::size_t Table::require(const std::string& column) const {
    auto idx = find(column);
    if (!idx) throw Error(Errc::InvalidInput, source_ + ": missing column '" + column + "'");
    return *idx;
}

std::string Table::text(std::size_t row, std::size_t col) const { return cells_[row][col]; }

std::optional<double> Table::number(std::size_t row, std::size_t col) const {
    const std::string& s = cells_[row][col];
    std::size_t b = s.find_first_not_of(' ');
    if (b == std::string::npos) return std::nullopt;
    std::size_t e = s.find_last_not_of(' ');
    if (s.compare(b, e - b + 1, "NA") == 0) return std::nullopt;
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data() + b, s.data() + e + 1, v);
    if (ec != std::errc() || ptr != s.data() + e + 1) {
        throw Error(Errc::InvalidInput, source_ + ": row " + std::to_string(row + 2) + ", column '" +
                                            header_[col] + "': not a number: '" + s + "'");
    }
    return v;
}

double Table::required_number(std::size_t row, std::size_t col) const {
    auto v = number(row, col);
    if (!v) {
        throw Error(Errc::InvalidInput, source_ + ": row " + std::to_string(row + 2) + ", column '" +
                                            header_[col] + "' is empty");
    }
    return *v;
}

}  // namespace sae::csv
