#ifndef MELTCAL_DOMAIN_HPP
#define MELTCAL_DOMAIN_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "meltcal/csv.hpp"
#include "meltcal/error.hpp"
#include "meltcal/format.hpp"

namespace meltcal {

inline constexpr std::size_t kNumParams = 8;
inline constexpr std::size_t kNumDesign = 3;

/// Controlled settings of one spot-weld experiment, SI units.
struct DesignVars {
    double power = 0.0;          // W
    double beam_radius = 0.0;    // m
    double pulse_duration = 0.0; // s

    void validate() const {
        if (!(power > 0.0) || !(beam_radius > 0.0) || !(pulse_duration > 0.0))
            throw PreconditionError("design variables must be strictly positive");
        if (!(beam_radius < 0.01)) throw PreconditionError("beam radius must be below 1 cm");
        if (!(pulse_duration < 1.0)) throw PreconditionError("pulse duration must be below 1 s");
    }

    std::array<double, kNumDesign> to_array() const { return {power, beam_radius, pulse_duration}; }

    friend bool operator==(const DesignVars&, const DesignVars&) = default;
};

/// The eight uncertain model parameters, in the fixed order used everywhere
/// (vectors, CSV columns, priors).
struct CalibrationParams {
    double alpha = 0.0;       // laser energy absorption coefficient
    double a_h = 0.0;         // heat transfer coefficient, W/(m^2 K)
    double emissivity = 0.0;  //
    double c_l = 0.0;         // specific heat, J/(kg K)
    double k_l = 0.0;         // effective liquid conductivity, W/(m K)
    double latent_heat = 0.0; // J/kg
    double mu_l = 0.0;        // effective viscosity, kg/(m s)
    double gamma_t = 0.0;     // thermocapillary coefficient, N/(m K)

    static constexpr std::array<std::string_view, kNumParams> names = {"alpha", "A_h", "epsilon", "c_l",
                                                                      "k_l",   "L",   "mu_l",    "gamma_T"};

    std::array<double, kNumParams> to_array() const {
        return {alpha, a_h, emissivity, c_l, k_l, latent_heat, mu_l, gamma_t};
    }

    static CalibrationParams from_array(const std::array<double, kNumParams>& v) {
        return {v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]};
    }

    template <typename Vec>
    static CalibrationParams from_vector(const Vec& v) {
        return {v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]};
    }

    double operator[](std::size_t i) const { return to_array()[i]; }

    /// Physical admissibility, independent of any prior.
    bool physical() const {
        return alpha > 0.0 && alpha <= 1.0 && emissivity > 0.0 && emissivity <= 1.0 && a_h > 0.0 && c_l > 0.0 &&
               k_l > 0.0 && latent_heat > 0.0 && mu_l > 0.0 && gamma_t < 0.0;
    }

    friend bool operator==(const CalibrationParams&, const CalibrationParams&) = default;
};

struct Interval {
    double lo = 0.0;
    double hi = 0.0;

    double width() const { return hi - lo; }
    bool contains(double x) const { return x >= lo && x <= hi; }
};

/// One uniform prior: nominal value with multiplicative bounds.
struct PriorEntry {
    std::string name;
    double nominal = 0.0;
    double lower_multiplier = 1.0;
    double upper_multiplier = 1.0;

    /// Endpoints sorted after the signed multiplication, so negative
    /// nominals keep their sign.
    Interval interval() const {
        double a = nominal * lower_multiplier;
        double b = nominal * upper_multiplier;
        return {std::min(a, b), std::max(a, b)};
    }
};

struct PriorSpec {
    std::array<PriorEntry, kNumParams> entries;

    Interval interval(std::size_t i) const { return entries[i].interval(); }

    CalibrationParams nominal() const {
        std::array<double, kNumParams> v{};
        for (std::size_t i = 0; i < kNumParams; ++i) v[i] = entries[i].nominal;
        return CalibrationParams::from_array(v);
    }

    /// Standard deviation of each uniform marginal.
    double stddev(std::size_t i) const { return interval(i).width() / std::sqrt(12.0); }

    void validate() const {
        for (std::size_t i = 0; i < kNumParams; ++i) {
            const auto& e = entries[i];
            if (e.name != CalibrationParams::names[i])
                throw ConfigError("prior entry " + std::to_string(i) + " is '" + e.name + "', expected '" +
                                  std::string(CalibrationParams::names[i]) + "'");
            if (!(e.lower_multiplier > 0.0) || !(e.lower_multiplier < e.upper_multiplier))
                throw ConfigError("prior entry '" + e.name + "' needs 0 < lower multiplier < upper multiplier");
        }
    }
};

/// Uniform priors on the eight parameters for 304 stainless steel.
inline PriorSpec default_prior() {
    return PriorSpec{{{{"alpha", 0.27, 0.5, 1.5},
                       {"A_h", 100.0, 0.8, 1.2},
                       {"epsilon", 0.59, 0.5, 1.5},
                       {"c_l", 837.4, 0.9, 1.1},
                       {"k_l", 209.3, 0.9, 1.1},
                       {"L", 2.5e5, 0.9, 1.1},
                       {"mu_l", 0.1, 0.5, 2.0},
                       {"gamma_T", -4.3e-4, 0.9, 1.1}}}};
}

/// True iff every component lies in its closed prior interval.
inline bool in_support(const CalibrationParams& theta, const PriorSpec& prior) {
    auto v = theta.to_array();
    for (std::size_t i = 0; i < kNumParams; ++i)
        if (!prior.interval(i).contains(v[i])) return false;
    return true;
}

struct PhysicalConstants {
    double density = 7200.0;                     // kg/m^3
    double liquidus = 1727.0;                    // K
    double ambient = 300.0;                      // K
    double stefan_boltzmann = 5.670374419e-8;    // W/(m^2 K^4)
    double solid_conductivity = 28.0;            // W/(m K), 304SS near the solidus

    void validate() const {
        if (!(density > 0.0) || !(liquidus > 0.0) || !(ambient > 0.0) || !(solid_conductivity > 0.0))
            throw ConfigError("physical constants must be positive");
        if (!(liquidus > ambient)) throw ConfigError("liquidus temperature must exceed ambient");
        if (stefan_boltzmann != 5.670374419e-8) throw ConfigError("Stefan-Boltzmann constant is fixed");
    }
};

struct MeltPoolSize {
    double length = 0.0; // m
    double depth = 0.0;  // m
    bool melted = false;

    static MeltPoolSize none() { return {}; }
};

struct ExperimentRow {
    int index = 0;
    DesignVars design;
    double length = 0.0; // m
    double depth = 0.0;  // m
    std::optional<double> length_sigma;
    std::optional<double> depth_sigma;
};

struct ExperimentalDataset {
    std::vector<ExperimentRow> rows;

    std::size_t size() const { return rows.size(); }
    bool has_sigmas() const {
        return !rows.empty() && rows.front().length_sigma.has_value() && rows.front().depth_sigma.has_value();
    }
};

namespace dataset_columns {
inline const std::vector<std::string> required = {"index",     "power_W",   "beam_radius_mm",
                                                  "pulse_ms",  "length_mm", "depth_mm"};
inline const std::vector<std::string> sigmas = {"length_sigma_mm", "depth_sigma_mm"};
} // namespace dataset_columns

/// Parses the dataset CSV (mm / ms in the file, SI in memory).
inline ExperimentalDataset parse_dataset(std::istream& in, const std::string& source) {
    auto table = csv::read(in, source);
    std::vector<std::string> expected = dataset_columns::required;
    bool with_sigma = table.header.size() == expected.size() + 2;
    if (with_sigma) expected.insert(expected.end(), dataset_columns::sigmas.begin(), dataset_columns::sigmas.end());
    for (const auto& name : expected)
        if (table.column(name) < 0) throw ParseError(source + ": missing header column '" + name + "'");
    if (table.header != expected) throw ParseError(source + ": header must be exactly " + [&] {
        std::string s;
        for (const auto& n : expected) s += (s.empty() ? "" : ",") + n;
        return s;
    }());
    if (table.rows.empty()) throw ParseError(source + ": no data rows");

    ExperimentalDataset ds;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& cells = table.rows[r];
        std::array<double, 8> v{};
        for (std::size_t c = 0; c < expected.size(); ++c) {
            if (!csv::parse_double(cells[c], v[c]) || !std::isfinite(v[c]))
                throw ParseError(source + ": row " + std::to_string(r + 1) + " column '" + expected[c] +
                                 "': non-numeric value '" + cells[c] + "'");
            if (c > 0 && !(v[c] > 0.0))
                throw ParseError(source + ": row " + std::to_string(r + 1) + " column '" + expected[c] +
                                 "': value must be positive");
        }
        ExperimentRow row;
        row.index = static_cast<int>(v[0]);
        if (static_cast<double>(row.index) != v[0])
            throw ParseError(source + ": row " + std::to_string(r + 1) + " column 'index': not an integer");
        row.design = {v[1], v[2] * 1e-3, v[3] * 1e-3};
        row.length = v[4] * 1e-3;
        row.depth = v[5] * 1e-3;
        if (with_sigma) {
            row.length_sigma = v[6] * 1e-3;
            row.depth_sigma = v[7] * 1e-3;
        }
        if (row.index != static_cast<int>(r + 1))
            throw ParseError(source + ": row " + std::to_string(r + 1) + " column 'index': indices must be contiguous from 1");
        ds.rows.push_back(row);
    }
    return ds;
}

inline ExperimentalDataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset " + path);
    return parse_dataset(in, path);
}

inline void write_dataset(std::ostream& out, const ExperimentalDataset& ds) {
    bool sig = ds.has_sigmas();
    out << "index,power_W,beam_radius_mm,pulse_ms,length_mm,depth_mm";
    if (sig) out << ",length_sigma_mm,depth_sigma_mm";
    out << '\n';
    // mm and ms columns at 12 significant digits so unit conversion noise stays out of the file
    auto milli = [](double v) { return strprintf("%.12g", v * 1e3); };
    for (const auto& r : ds.rows) {
        out << r.index << ',' << format_exact(r.design.power) << ',' << milli(r.design.beam_radius) << ','
            << milli(r.design.pulse_duration) << ',' << milli(r.length) << ',' << milli(r.depth);
        if (sig) out << ',' << milli(*r.length_sigma) << ',' << milli(*r.depth_sigma);
        out << '\n';
    }
}

inline void write_dataset(const std::string& path, const ExperimentalDataset& ds) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    write_dataset(out, ds);
}

/// The 13 published 304SS spot-weld measurements.
inline const char* bundled_dataset_csv() {
    return "index,power_W,beam_radius_mm,pulse_ms,length_mm,depth_mm\n"
           "1,530,0.159,4,0.625,0.190\n"
           "2,530,0.210,4,0.416,0.267\n"
           "3,530,0.272,4,0.550,0.117\n"
           "4,530,0.313,4,0.519,0.092\n"
           "5,530,0.433,4,0.477,0.058\n"
           "6,1067,0.325,3,0.585,0.192\n"
           "7,1067,0.389,3,0.511,0.164\n"
           "8,1067,0.466,3,0.709,0.220\n"
           "9,1967,0.350,3,0.939,0.493\n"
           "10,1967,0.379,3,0.728,0.436\n"
           "11,1967,0.428,3,0.944,0.296\n"
           "12,1967,0.521,3,0.863,0.195\n"
           "13,1967,0.570,3,1.027,0.212\n";
}

inline ExperimentalDataset bundled_dataset() {
    std::istringstream in(bundled_dataset_csv());
    return parse_dataset(in, "<bundled>");
}

} // namespace meltcal

#endif // MELTCAL_DOMAIN_HPP
