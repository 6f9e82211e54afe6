#ifndef MELTCAL_FORWARD_HPP
#define MELTCAL_FORWARD_HPP

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include "meltcal/csv.hpp"
#include "meltcal/domain.hpp"
#include "meltcal/error.hpp"
#include "meltcal/format.hpp"

namespace meltcal {

/// Any forward melt-pool model: (design, theta) -> pool size.
using ForwardModel = std::function<MeltPoolSize(const DesignVars&, const CalibrationParams&)>;

/// Closure settings of the reduced conduction model.
struct ReducedModelConfig {
    int quadrature_points = 64;
    double tolerance = 1e-6;        // m, isotherm bisection
    double marangoni_chi = 0.2;     // enhancement coefficient
    double marangoni_ref = 100.0;   // reference Marangoni number
    bool loss_correction = true;
    double liquid_weight = 0.02;    // share of enhanced-liquid conductivity in k_eff

    void validate() const {
        if (quadrature_points < 16) throw ConfigError("quadrature_points must be >= 16");
        if (!(tolerance >= 1e-7 && tolerance <= 1e-4)) throw ConfigError("tolerance must lie in [1e-7, 1e-4] m");
        if (!(marangoni_chi >= 0.0)) throw ConfigError("marangoni_chi must be >= 0");
        if (!(marangoni_ref > 0.0)) throw ConfigError("marangoni_ref must be > 0");
        if (!(liquid_weight >= 0.0 && liquid_weight <= 1.0)) throw ConfigError("liquid_weight must lie in [0, 1]");
    }
};

namespace detail {

/// Gauss-Legendre rule on [-1, 1] by Newton iteration on P_n.
struct GaussLegendre {
    std::vector<double> nodes;
    std::vector<double> weights;

    explicit GaussLegendre(int n) : nodes(n), weights(n) {
        for (int i = 0; i < n; ++i) {
            double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
            double dp = 0.0;
            for (int iter = 0; iter < 100; ++iter) {
                double p0 = 1.0, p1 = x;
                for (int k = 2; k <= n; ++k) {
                    double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n * (x * p1 - p0) / (x * x - 1.0);
                double dx = p1 / dp;
                x -= dx;
                if (std::abs(dx) < 1e-16) break;
            }
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
    }
};

inline const GaussLegendre& gauss16() {
    static const GaussLegendre rule(16);
    return rule;
}

} // namespace detail

/// Marangoni number |gamma_T| (T_m - T_0) R_b / (mu_l a0), a0 = k_l / (rho c_l).
inline double marangoni_number(const DesignVars& design, const CalibrationParams& theta,
                               const PhysicalConstants& constants) {
    double a0 = theta.k_l / (constants.density * theta.c_l);
    return std::abs(theta.gamma_t) * (constants.liquidus - constants.ambient) * design.beam_radius / (theta.mu_l * a0);
}

/// Conductivity seen by the linear core: solid conductivity blended with the
/// Marangoni-enhanced liquid conductivity k_l (1 + chi ln(1 + Ma/Ma_ref)).
inline double effective_conductivity(const DesignVars& design, const CalibrationParams& theta,
                                     const PhysicalConstants& constants, const ReducedModelConfig& cfg) {
    double ma = marangoni_number(design, theta, constants);
    double enhanced = theta.k_l * (1.0 + cfg.marangoni_chi * std::log1p(ma / cfg.marangoni_ref));
    return (1.0 - cfg.liquid_weight) * constants.solid_conductivity + cfg.liquid_weight * enhanced;
}

/// Fraction of absorbed power lost to convection and radiation at the melt
/// temperature over the beam footprint, clamped to [0, 0.5].
inline double loss_fraction(const DesignVars& design, const CalibrationParams& theta,
                            const PhysicalConstants& constants) {
    double tm = constants.liquidus, t0 = constants.ambient;
    double flux = theta.a_h * (tm - t0) +
                  constants.stefan_boltzmann * theta.emissivity * (std::pow(tm, 4) - std::pow(t0, 4));
    double area = std::numbers::pi * design.beam_radius * design.beam_radius;
    double f = flux * area / (theta.alpha * design.power);
    return std::clamp(f, 0.0, 0.5);
}

/// Precomputed quantities for one (design, theta) pair.
struct ConductionSetup {
    double diffusivity = 0.0;      // m^2/s
    double conductivity = 0.0;     // W/(m K)
    double peak_flux = 0.0;        // W/m^2, 2 alpha P (1 - f_loss) / (pi R^2)
    double beam_radius = 0.0;
    double pulse = 0.0;
    double ambient = 0.0;
    double melt_threshold = 0.0;   // T_m + L / c_l
    double heat_capacity = 0.0;    // rho c_l
    int quadrature_points = 64;

    ConductionSetup(const DesignVars& design, const CalibrationParams& theta, const PhysicalConstants& constants,
                    const ReducedModelConfig& cfg) {
        conductivity = effective_conductivity(design, theta, constants, cfg);
        heat_capacity = constants.density * theta.c_l;
        diffusivity = conductivity / heat_capacity;
        double absorbed = theta.alpha * design.power;
        if (cfg.loss_correction) absorbed *= 1.0 - loss_fraction(design, theta, constants);
        beam_radius = design.beam_radius;
        peak_flux = 2.0 * absorbed / (std::numbers::pi * beam_radius * beam_radius);
        pulse = design.pulse_duration;
        ambient = constants.ambient;
        melt_threshold = constants.liquidus + theta.latent_heat / theta.c_l;
        quadrature_points = cfg.quadrature_points;
    }

    /// Temperature at (r, z, t). The half-space Green's function for a
    /// Gaussian surface flux is integrated over source time; with
    /// u = sqrt(t - tau) the 1/sqrt endpoint singularity disappears and
    /// panels are graded geometrically toward u = 0.
    double temperature(double r, double z, double t) const {
        if (t <= 0.0) return ambient;
        const double a = diffusivity;
        const double r2b = beam_radius * beam_radius;
        const double u_lo = std::sqrt(std::max(t - pulse, 0.0));
        const double u_hi = std::sqrt(t);
        const auto& rule = detail::gauss16();
        const int panels = std::max(1, (quadrature_points + 15) / 16);

        double sum = 0.0;
        double left = u_lo;
        for (int p = 0; p < panels; ++p) {
            double frac = std::pow(4.0, -(panels - 1 - p));
            double right = u_lo + (u_hi - u_lo) * frac;
            double half = 0.5 * (right - left), mid = 0.5 * (right + left);
            for (std::size_t k = 0; k < rule.nodes.size(); ++k) {
                double u = mid + half * rule.nodes[k];
                double spread = r2b + 8.0 * a * u * u;
                double expo = -2.0 * r * r / spread;
                if (z > 0.0) expo -= z * z / (4.0 * a * u * u);
                double h = r2b / spread * std::exp(expo);
                if (!std::isfinite(h))
                    throw NumericError(strprintf("non-finite integrand at quadrature node %d of panel %d (u=%g)",
                                                 static_cast<int>(k), p, u));
                sum += half * rule.weights[k] * h;
            }
            left = right;
        }
        double rise = 2.0 * peak_flux / (heat_capacity * std::sqrt(std::numbers::pi * a)) * sum;
        if (!std::isfinite(rise)) throw NumericError("non-finite temperature rise");
        return ambient + rise;
    }

    /// max over t in (0, 2 pulse] of T(r, z, t). Temperature rises
    /// monotonically while the source is on, so the search starts at the
    /// end of the pulse: coarse scan, then golden-section refinement.
    double peak_temperature(double r, double z) const {
        constexpr int scan = 8;
        std::array<double, scan + 1> temps{};
        int best = 0;
        for (int k = 0; k <= scan; ++k) {
            temps[k] = temperature(r, z, pulse * (1.0 + static_cast<double>(k) / scan));
            if (temps[k] > temps[best]) best = k;
        }
        double lo = pulse * (1.0 + std::max(best - 1, 0) / static_cast<double>(scan));
        double hi = pulse * (1.0 + std::min(best + 1, scan) / static_cast<double>(scan));
        const double g = (std::sqrt(5.0) - 1.0) / 2.0;
        double x1 = hi - g * (hi - lo), x2 = lo + g * (hi - lo);
        double f1 = temperature(r, z, x1), f2 = temperature(r, z, x2);
        for (int it = 0; it < 24; ++it) {
            if (f1 < f2) {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + g * (hi - lo);
                f2 = temperature(r, z, x2);
            } else {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - g * (hi - lo);
                f1 = temperature(r, z, x1);
            }
        }
        return std::max({temps[best], f1, f2});
    }
};

/// Temperature (K) at radius r, depth z and time t: ambient plus the
/// superposed conduction rise of the Gaussian laser pulse.
inline double temperature_rise(const DesignVars& design, const CalibrationParams& theta,
                               const PhysicalConstants& constants, const ReducedModelConfig& cfg, double r, double z,
                               double t) {
    if (r < 0.0 || z < 0.0 || t < 0.0) throw PreconditionError("temperature_rise needs r, z, t >= 0");
    return ConductionSetup(design, theta, constants, cfg).temperature(r, z, t);
}

/// Melt-pool length (surface diameter) and depth from the reduced model.
inline MeltPoolSize evaluate_reduced(const DesignVars& design, const CalibrationParams& theta,
                                     const PhysicalConstants& constants, const ReducedModelConfig& cfg) {
    const ConductionSetup setup(design, theta, constants, cfg);
    const double threshold = setup.melt_threshold;
    if (setup.temperature(0.0, 0.0, setup.pulse) < threshold) return MeltPoolSize::none();

    auto extent = [&](bool radial) {
        auto hot = [&](double x) {
            return (radial ? setup.peak_temperature(x, 0.0) : setup.peak_temperature(0.0, x)) >= threshold;
        };
        double lo = 0.0, hi = design.beam_radius;
        while (hot(hi)) {
            lo = hi;
            hi *= 2.0;
            if (hi > 1.0) throw NumericError("melt isotherm extends beyond 1 m");
        }
        while (hi - lo > cfg.tolerance) {
            double mid = 0.5 * (lo + hi);
            (hot(mid) ? lo : hi) = mid;
        }
        return 0.5 * (lo + hi);
    };

    MeltPoolSize out;
    out.length = 2.0 * extent(true);
    out.depth = extent(false);
    out.melted = true;
    return out;
}

inline ForwardModel make_reduced_model(PhysicalConstants constants = {}, ReducedModelConfig cfg = {}) {
    constants.validate();
    cfg.validate();
    return [constants, cfg](const DesignVars& d, const CalibrationParams& theta) {
        return evaluate_reduced(d, theta, constants, cfg);
    };
}

// ---------------------------------------------------------------------------
// External process adapter

struct ExternalModelSpec {
    std::string command_template; // contains {input} and {output} once each
    std::string working_directory = ".";
    double timeout_seconds = 600.0;

    void validate() const {
        auto count = [&](const std::string& needle) {
            std::size_t n = 0, pos = 0;
            while ((pos = command_template.find(needle, pos)) != std::string::npos) {
                ++n;
                pos += needle.size();
            }
            return n;
        };
        if (count("{input}") != 1 || count("{output}") != 1)
            throw ConfigError("command template must contain {input} and {output} exactly once");
        if (!(timeout_seconds > 0.0)) throw ConfigError("external model timeout must be positive");
    }
};

/// key=value input file handed to an external model.
inline std::string external_input_text(const DesignVars& d, const CalibrationParams& theta) {
    std::ostringstream os;
    os << "power_W=" << format_exact(d.power) << '\n'
       << "beam_radius_mm=" << format_exact(d.beam_radius * 1e3) << '\n'
       << "pulse_ms=" << format_exact(d.pulse_duration * 1e3) << '\n';
    auto v = theta.to_array();
    for (std::size_t i = 0; i < kNumParams; ++i) os << CalibrationParams::names[i] << '=' << format_exact(v[i]) << '\n';
    return os.str();
}

/// Parses `length_mm=<x>` / `depth_mm=<y>`; throws naming the bad key.
inline MeltPoolSize parse_external_output(const std::string& text, const std::string& captured = {}) {
    std::istringstream is(text);
    std::string line;
    std::map<std::string, std::string> kv;
    std::size_t lines = 0;
    while (std::getline(is, line)) {
        if (csv::trim(line).empty()) continue;
        ++lines;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw AdapterError("parse error: malformed output line '" + line + "'", captured);
        kv[csv::trim(line.substr(0, eq))] = csv::trim(line.substr(eq + 1));
    }
    if (lines != 2) throw AdapterError("parse error: output must have exactly two lines", captured);
    MeltPoolSize out;
    for (const char* key : {"length_mm", "depth_mm"}) {
        auto it = kv.find(key);
        if (it == kv.end()) throw AdapterError(std::string("parse error: missing key ") + key, captured);
        double v = 0.0;
        if (!csv::parse_double(it->second, v) || !std::isfinite(v) || v < 0.0)
            throw AdapterError(std::string("parse error: bad value for key ") + key + ": '" + it->second + "'", captured);
        (std::string(key) == "length_mm" ? out.length : out.depth) = v * 1e-3;
    }
    out.melted = out.length > 0.0 && out.depth > 0.0;
    if (!out.melted) out.length = out.depth = 0.0;
    return out;
}

namespace detail {

inline std::string read_text(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct ProcessResult {
    int status = -1;
    bool timed_out = false;
    std::string output;
};

/// Runs `sh -c command` in `dir`, capturing stdout+stderr, killing the
/// process group after `timeout` seconds.
inline ProcessResult run_shell(const std::string& command, const std::filesystem::path& dir, double timeout,
                               const std::filesystem::path& capture) {
    ProcessResult res;
    pid_t pid = fork();
    if (pid < 0) throw AdapterError("fork failed", {});
    if (pid == 0) {
        setpgid(0, 0);
        if (chdir(dir.c_str()) != 0) _exit(126);
        int fd = open(capture.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
        if (fd >= 0) {
            dup2(fd, STDOUT_FILENO);
            dup2(fd, STDERR_FILENO);
            close(fd);
        }
        execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
        _exit(127);
    }
    auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout);
    int wstatus = 0;
    while (true) {
        pid_t w = waitpid(pid, &wstatus, WNOHANG);
        if (w == pid) break;
        if (std::chrono::steady_clock::now() > deadline) {
            kill(-pid, SIGKILL);
            kill(pid, SIGKILL);
            waitpid(pid, &wstatus, 0);
            res.timed_out = true;
            break;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
    if (!res.timed_out) res.status = WIFEXITED(wstatus) ? WEXITSTATUS(wstatus) : 128 + WTERMSIG(wstatus);
    res.output = read_text(capture);
    return res;
}

inline std::string replace_once(std::string s, const std::string& what, const std::string& with) {
    auto pos = s.find(what);
    if (pos != std::string::npos) s.replace(pos, what.size(), with);
    return s;
}

} // namespace detail

/// Runs an external model process: writes the input file, substitutes the
/// file names into the command, parses the two-line output file.
inline MeltPoolSize evaluate_external(const ExternalModelSpec& spec, const DesignVars& design,
                                      const CalibrationParams& theta) {
    namespace fs = std::filesystem;
    spec.validate();
    static std::atomic<unsigned long> counter{0};
    fs::path dir = fs::absolute(spec.working_directory);
    std::string tag = std::to_string(getpid()) + "_" + std::to_string(counter.fetch_add(1));
    fs::path input = dir / ("meltcal_in_" + tag + ".txt");
    fs::path output = dir / ("meltcal_out_" + tag + ".txt");
    fs::path capture = dir / ("meltcal_log_" + tag + ".txt");
    {
        std::ofstream os(input);
        if (!os) throw AdapterError("cannot write input file " + input.string(), {});
        os << external_input_text(design, theta);
    }
    std::string cmd = detail::replace_once(detail::replace_once(spec.command_template, "{input}", input.string()),
                                           "{output}", output.string());
    auto res = detail::run_shell(cmd, dir, spec.timeout_seconds, capture);
    if (res.timed_out)
        throw AdapterError(strprintf("external model timed out after %g s", spec.timeout_seconds), res.output);
    if (res.status != 0)
        throw AdapterError("external model exited with status " + std::to_string(res.status) + "; output: " + res.output,
                           res.output);
    if (!fs::exists(output)) throw AdapterError("external model wrote no output file", res.output);
    MeltPoolSize out = parse_external_output(detail::read_text(output), res.output);
    std::error_code ec;
    fs::remove(input, ec);
    fs::remove(output, ec);
    fs::remove(capture, ec);
    return out;
}

inline ForwardModel make_external_model(ExternalModelSpec spec) {
    spec.validate();
    return [spec](const DesignVars& d, const CalibrationParams& theta) { return evaluate_external(spec, d, theta); };
}

// ---------------------------------------------------------------------------
// Tabulated runs

/// Cache of simulator runs keyed by (design, theta) to 12 significant digits.
class RunTable {
public:
    struct Row {
        DesignVars design;
        CalibrationParams theta;
        MeltPoolSize size;
    };

    RunTable() = default;
    RunTable(const RunTable& other) : rows_(other.rows_), index_(other.index_), path_(other.path_) {}
    RunTable& operator=(const RunTable& other) {
        if (this != &other) {
            std::scoped_lock lock(mutex_);
            rows_ = other.rows_;
            index_ = other.index_;
            path_ = other.path_;
        }
        return *this;
    }

    static std::string key(const DesignVars& d, const CalibrationParams& theta) {
        std::string k;
        for (double v : d.to_array()) k += strprintf("%.11e|", v);
        for (double v : theta.to_array()) k += strprintf("%.11e|", v);
        return k;
    }

    std::optional<MeltPoolSize> find(const DesignVars& d, const CalibrationParams& theta) const {
        std::scoped_lock lock(mutex_);
        auto it = index_.find(key(d, theta));
        if (it == index_.end()) return std::nullopt;
        return rows_[it->second].size;
    }

    /// Appends a row; returns false if the key already exists.
    bool insert(const Row& row) {
        std::scoped_lock lock(mutex_);
        return insert_unlocked(row);
    }

    std::size_t size() const {
        std::scoped_lock lock(mutex_);
        return rows_.size();
    }

    std::vector<Row> rows() const {
        std::scoped_lock lock(mutex_);
        return rows_;
    }

    /// Where the table is persisted after every append (empty = memory only).
    void set_path(std::string path) {
        std::scoped_lock lock(mutex_);
        path_ = std::move(path);
    }
    const std::string& path() const { return path_; }

    static constexpr const char* header =
        "power_W,beam_radius_mm,pulse_ms,alpha,A_h,epsilon,c_l,k_l,L,mu_l,gamma_T,length_mm,depth_mm";

    void write(std::ostream& os) const {
        std::scoped_lock lock(mutex_);
        write_unlocked(os);
    }

    void save(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw IoError("cannot write run table " + path);
        write(os);
    }

    static RunTable load(const std::string& path) {
        auto table = csv::read_file(path);
        auto names = csv::split(header);
        if (table.header != names) throw ParseError(path + ": run table header mismatch");
        RunTable rt;
        for (std::size_t r = 0; r < table.rows.size(); ++r) {
            std::array<double, 13> v{};
            for (std::size_t c = 0; c < 13; ++c)
                if (!csv::parse_double(table.rows[r][c], v[c]))
                    throw ParseError(path + ": row " + std::to_string(r + 1) + " column '" + names[c] + "' is not numeric");
            Row row;
            row.design = {v[0], v[1] * 1e-3, v[2] * 1e-3};
            row.theta = CalibrationParams{v[3], v[4], v[5], v[6], v[7], v[8], v[9], v[10]};
            row.size.length = v[11] * 1e-3;
            row.size.depth = v[12] * 1e-3;
            row.size.melted = row.size.length > 0.0 && row.size.depth > 0.0;
            if (!rt.insert_unlocked(row)) throw ParseError(path + ": duplicate run at row " + std::to_string(r + 1));
        }
        rt.path_ = path;
        return rt;
    }

    /// Inserts and persists under one lock.
    void append_and_persist(const Row& row) {
        std::scoped_lock lock(mutex_);
        if (!insert_unlocked(row)) return;
        if (!path_.empty()) {
            std::ofstream os(path_);
            if (!os) throw IoError("cannot write run table " + path_);
            write_unlocked(os);
        }
    }

private:
    bool insert_unlocked(const Row& row) {
        auto [it, fresh] = index_.emplace(key(row.design, row.theta), rows_.size());
        if (!fresh) return false;
        rows_.push_back(row);
        return true;
    }

    void write_unlocked(std::ostream& os) const {
        os << header << '\n';
        for (const auto& r : rows_) {
            os << format_exact(r.design.power) << ',' << format_exact(r.design.beam_radius * 1e3) << ','
               << format_exact(r.design.pulse_duration * 1e3);
            for (double v : r.theta.to_array()) os << ',' << format_exact(v);
            os << ',' << format_exact(r.size.length * 1e3) << ',' << format_exact(r.size.depth * 1e3) << '\n';
        }
    }

    std::vector<Row> rows_;
    std::map<std::string, std::size_t> index_;
    std::string path_;
    mutable std::mutex mutex_;
};

/// Returns the cached run for (design, theta), evaluating and appending on a miss.
inline MeltPoolSize lookup_or_evaluate(RunTable& table, const ForwardModel& fallback, const DesignVars& design,
                                       const CalibrationParams& theta) {
    if (auto hit = table.find(design, theta)) return *hit;
    if (!fallback) throw PreconditionError("run table miss and no fallback model configured");
    MeltPoolSize size = fallback(design, theta);
    table.append_and_persist({design, theta, size});
    return size;
}

inline ForwardModel make_table_model(std::shared_ptr<RunTable> table, ForwardModel fallback) {
    return [table = std::move(table), fallback = std::move(fallback)](const DesignVars& d, const CalibrationParams& t) {
        return lookup_or_evaluate(*table, fallback, d, t);
    };
}

} // namespace meltcal

#endif // MELTCAL_FORWARD_HPP
