#ifndef MELTCAL_FORMAT_HPP
#define MELTCAL_FORMAT_HPP

#include <cstdio>
#include <cstdlib>
#include <string>

namespace meltcal {

/// printf-style formatting into a std::string.
template <typename... Args>
std::string strprintf(const char* fmt, Args... args) {
    int n = std::snprintf(nullptr, 0, fmt, args...);
    std::string out(static_cast<std::size_t>(n), '\0');
    std::snprintf(out.data(), out.size() + 1, fmt, args...);
    return out;
}

/// Shortest text that reads back to the same double.
inline std::string format_exact(double v) {
    for (int prec = 15; prec <= 17; ++prec) {
        std::string s = strprintf("%.*g", prec, v);
        if (std::strtod(s.c_str(), nullptr) == v) return s;
    }
    return strprintf("%.17g", v);
}

} // namespace meltcal

#endif // MELTCAL_FORMAT_HPP
