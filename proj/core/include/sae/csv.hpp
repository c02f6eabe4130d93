#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace sae::csv {

// Minimal RFC-4180 reader: comma separator, optional double-quoted fields,
// '.' decimal point. Empty fields are "missing".
class Table {
public:
    static Table parse(std::istream& in, const std::string& source = "<stream>");
    static Table read(const std::filesystem::path& path);

    const std::vector<std::string>& header() const noexcept { return header_; }
    std::size_t rows() const noexcept { return cells_.size(); }

    std::optional<std::size_t> find(const std::string& column) const;
    std::size_t require(const std::string& column) const;

    const std::string& cell(std::size_t row, std::size_t col) const { return cells_[row][col]; }

    std::string text(std::size_t row, std::size_t col) const;
    std::optional<double> number(std::size_t row, std::size_t col) const;
    double required_number(std::size_t row, std::size_t col) const;

private:
    std::string source_;
    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> cells_;
};

std::vector<std::string> split_line(const std::string& line);
std::string quote(const std::string& field);

// Shortest round-trippable representation.
std::string format_double(double value);

}  // namespace sae::csv
