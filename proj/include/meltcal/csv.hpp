#ifndef MELTCAL_CSV_HPP
#define MELTCAL_CSV_HPP

#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include "meltcal/error.hpp"

namespace meltcal::csv {

inline std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& line, char sep = ',') {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, sep)) out.push_back(trim(cell));
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

/// Parses a full-string double; nullopt-like failure signalled by false.
inline bool parse_double(const std::string& text, double& out) {
    if (text.empty()) return false;
    char* end = nullptr;
    errno = 0;
    out = std::strtod(text.c_str(), &end);
    return errno == 0 && end == text.c_str() + text.size();
}

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    std::vector<std::size_t> line_numbers;

    /// Column index, or -1 when absent. Duplicate header names are rejected at read.
    long column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return static_cast<long>(i);
        return -1;
    }
};

inline Table read(std::istream& in, const std::string& source) {
    Table t;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        if (t.header.empty()) {
            t.header = split(line);
            for (std::size_t i = 0; i < t.header.size(); ++i)
                for (std::size_t j = 0; j < i; ++j)
                    if (t.header[i] == t.header[j])
                        throw ParseError(source + ": duplicate header column '" + t.header[i] + "'");
            continue;
        }
        auto cells = split(line);
        if (cells.size() != t.header.size())
            throw ParseError(source + ": line " + std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                             " cells, header has " + std::to_string(t.header.size()));
        t.rows.push_back(std::move(cells));
        t.line_numbers.push_back(lineno);
    }
    if (t.header.empty()) throw ParseError(source + ": missing header");
    return t;
}

inline Table read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    return read(in, path);
}

} // namespace meltcal::csv

#endif // MELTCAL_CSV_HPP
