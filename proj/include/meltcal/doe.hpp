#ifndef MELTCAL_DOE_HPP
#define MELTCAL_DOE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "meltcal/csv.hpp"
#include "meltcal/domain.hpp"
#include "meltcal/error.hpp"
#include "meltcal/format.hpp"
#include "meltcal/forward.hpp"
#include "meltcal/parallel.hpp"
#include "meltcal/random.hpp"

namespace meltcal {

/// n x d Latin hypercube on [0, 1)^d.
struct UnitDesign {
    Eigen::MatrixXd values;
    std::uint64_t seed = 0;
    std::uint64_t stream_id = 0;

    Eigen::Index samples() const { return values.rows(); }
    Eigen::Index dims() const { return values.cols(); }
};

/// Each column is an independent random permutation of the n strata with a
/// uniform jitter inside its stratum, so every stratum [i/n, (i+1)/n) of
/// every column holds exactly one point.
inline UnitDesign latin_hypercube(std::size_t n, std::size_t d, RandomStream stream) {
    if (n < 1 || d < 1) throw PreconditionError("latin_hypercube needs n >= 1 and d >= 1");
    UnitDesign u;
    u.seed = stream.seed();
    u.stream_id = stream.stream_id();
    u.values.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    const double below_one = std::nextafter(1.0, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
        auto perm = stream.permutation(n);
        for (std::size_t i = 0; i < n; ++i) {
            double v = (static_cast<double>(perm[i]) + stream.uniform()) / static_cast<double>(n);
            // keep the point inside its stratum despite rounding
            double stratum_hi = static_cast<double>(perm[i] + 1) / static_cast<double>(n);
            if (v >= stratum_hi) v = std::nextafter(stratum_hi, 0.0);
            u.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = std::min(v, below_one);
        }
    }
    return u;
}

inline CalibrationParams scale_unit_point(const Eigen::Ref<const Eigen::VectorXd>& u, const PriorSpec& prior) {
    std::array<double, kNumParams> v{};
    for (std::size_t i = 0; i < kNumParams; ++i) {
        auto iv = prior.interval(i);
        v[i] = std::clamp(iv.lo + u(static_cast<Eigen::Index>(i)) * iv.width(), iv.lo, iv.hi);
    }
    return CalibrationParams::from_array(v);
}

/// Maps a unit design with d = 8 onto the realized prior intervals.
inline std::vector<CalibrationParams> scale_to_prior(const UnitDesign& u, const PriorSpec& prior) {
    if (u.dims() != static_cast<Eigen::Index>(kNumParams))
        throw PreconditionError("scale_to_prior needs an 8-column design, got " + std::to_string(u.dims()));
    std::vector<CalibrationParams> out;
    out.reserve(static_cast<std::size_t>(u.samples()));
    for (Eigen::Index i = 0; i < u.samples(); ++i) out.push_back(scale_unit_point(u.values.row(i).transpose(), prior));
    return out;
}

/// Affine map x -> (x - offset) / scale.
struct AffineMap {
    double offset = 0.0;
    double scale = 1.0;

    double forward(double x) const { return (x - offset) / scale; }
    double inverse(double s) const { return s * scale + offset; }
};

/// Per-dimension affine maps of the 11 GP inputs onto [0, 1].
struct InputStandardization {
    std::vector<AffineMap> maps;

    Eigen::VectorXd forward(const Eigen::Ref<const Eigen::VectorXd>& raw) const {
        Eigen::VectorXd s(raw.size());
        for (Eigen::Index j = 0; j < raw.size(); ++j) s(j) = maps[static_cast<std::size_t>(j)].forward(raw(j));
        return s;
    }
    Eigen::VectorXd inverse(const Eigen::Ref<const Eigen::VectorXd>& std_x) const {
        Eigen::VectorXd r(std_x.size());
        for (Eigen::Index j = 0; j < std_x.size(); ++j) r(j) = maps[static_cast<std::size_t>(j)].inverse(std_x(j));
        return r;
    }
};

/// Design ranges from the dataset, parameter ranges from the prior.
inline InputStandardization input_standardization(const ExperimentalDataset& ds, const PriorSpec& prior) {
    InputStandardization st;
    for (std::size_t k = 0; k < kNumDesign; ++k) {
        double lo = ds.rows.front().design.to_array()[k], hi = lo;
        for (const auto& r : ds.rows) {
            lo = std::min(lo, r.design.to_array()[k]);
            hi = std::max(hi, r.design.to_array()[k]);
        }
        st.maps.push_back({lo, hi > lo ? hi - lo : 1.0});
    }
    for (std::size_t i = 0; i < kNumParams; ++i) st.maps.push_back({prior.interval(i).lo, prior.interval(i).width()});
    return st;
}

/// Joins design variables and parameters into an 11-vector (SI units).
inline Eigen::VectorXd joint_input(const DesignVars& d, const CalibrationParams& theta) {
    Eigen::VectorXd x(static_cast<Eigen::Index>(kNumDesign + kNumParams));
    auto dv = d.to_array();
    auto tv = theta.to_array();
    for (std::size_t k = 0; k < kNumDesign; ++k) x(static_cast<Eigen::Index>(k)) = dv[k];
    for (std::size_t i = 0; i < kNumParams; ++i) x(static_cast<Eigen::Index>(kNumDesign + i)) = tv[i];
    return x;
}

enum class Output { length = 0, depth = 1 };

inline const char* output_name(Output o) { return o == Output::length ? "length" : "depth"; }

struct TrainingSet {
    Eigen::MatrixXd inputs;          // N x 11, SI units (design, then theta)
    Eigen::MatrixXd outputs;         // N x 2, metres (length, depth)
    std::vector<int> condition;      // dataset row index (1-based) per row
    InputStandardization input_map;
    std::array<AffineMap, 2> output_maps{}; // zero mean, unit variance
    std::vector<std::string> rejections;
    std::uint64_t seed = 0;
    std::uint64_t stream_id = 0;
    std::size_t samples_per_condition = 0;

    Eigen::Index size() const { return inputs.rows(); }

    Eigen::MatrixXd standardized_inputs() const {
        Eigen::MatrixXd s(inputs.rows(), inputs.cols());
        for (Eigen::Index i = 0; i < inputs.rows(); ++i) s.row(i) = input_map.forward(inputs.row(i).transpose());
        return s;
    }

    Eigen::VectorXd standardized_outputs(Output o) const {
        auto c = static_cast<int>(o);
        const auto& m = output_maps[static_cast<std::size_t>(c)];
        return (outputs.col(c).array() - m.offset) / m.scale;
    }

    void compute_output_maps() {
        for (int c = 0; c < 2; ++c) {
            double mean = outputs.col(c).mean();
            double var = outputs.rows() > 1
                             ? (outputs.col(c).array() - mean).square().sum() / static_cast<double>(outputs.rows() - 1)
                             : 0.0;
            output_maps[static_cast<std::size_t>(c)] = {mean, var > 0.0 ? std::sqrt(var) : 1.0};
        }
    }
};

/// Runs the forward model over an independent Latin hypercube per
/// experimental condition. Non-melting draws are replaced by fresh prior
/// draws (at most five), each replacement logged in `rejections`. Rows are
/// condition-major, sample-minor regardless of thread count.
inline TrainingSet build_training_set(const ExperimentalDataset& dataset, const PriorSpec& prior,
                                      std::size_t samples_per_condition, const ForwardModel& model,
                                      RandomStream stream, unsigned threads = 1) {
    if (samples_per_condition < 2) throw PreconditionError("samples_per_condition must be >= 2");
    if (dataset.rows.empty()) throw PreconditionError("empty dataset");
    constexpr int kMaxRedraws = 5;
    const std::size_t nc = dataset.size();
    const std::size_t n = nc * samples_per_condition;

    std::vector<CalibrationParams> thetas(n);
    for (std::size_t c = 0; c < nc; ++c) {
        auto u = latin_hypercube(samples_per_condition, kNumParams, stream.split(c).split(0));
        auto scaled = scale_to_prior(u, prior);
        std::copy(scaled.begin(), scaled.end(), thetas.begin() + static_cast<std::ptrdiff_t>(c * samples_per_condition));
    }

    std::vector<MeltPoolSize> sizes(n);
    std::vector<std::vector<std::string>> notes(n);
    parallel_for(n, threads, [&](std::size_t k) {
        std::size_t c = k / samples_per_condition, j = k % samples_per_condition;
        const auto& row = dataset.rows[c];
        RandomStream redraw = stream.split(c).split(1 + j);
        for (int attempt = 0;; ++attempt) {
            MeltPoolSize s;
            try {
                s = model(row.design, thetas[k]);
            } catch (const Error& e) {
                throw Error(e.category(), strprintf("training run failed at condition %d, sample %zu: %s", row.index,
                                                    j, e.what()));
            }
            if (s.melted && std::isfinite(s.length) && std::isfinite(s.depth)) {
                sizes[k] = s;
                return;
            }
            std::string theta_text;
            for (double v : thetas[k].to_array()) theta_text += (theta_text.empty() ? "" : ",") + format_exact(v);
            if (attempt == kMaxRedraws)
                throw PreconditionError(strprintf("condition %d sample %zu did not melt after %d redraws; last theta = (%s)",
                                                  row.index, j, kMaxRedraws, theta_text.c_str()));
            notes[k].push_back(strprintf("condition %d sample %zu attempt %d: no melting at theta = (%s); redrawn",
                                         row.index, j, attempt, theta_text.c_str()));
            Eigen::VectorXd u(static_cast<Eigen::Index>(kNumParams));
            for (Eigen::Index i = 0; i < u.size(); ++i) u(i) = redraw.uniform();
            thetas[k] = scale_unit_point(u, prior);
        }
    });

    TrainingSet ts;
    ts.seed = stream.seed();
    ts.stream_id = stream.stream_id();
    ts.samples_per_condition = samples_per_condition;
    ts.inputs.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(kNumDesign + kNumParams));
    ts.outputs.resize(static_cast<Eigen::Index>(n), 2);
    for (std::size_t k = 0; k < n; ++k) {
        const auto& row = dataset.rows[k / samples_per_condition];
        auto i = static_cast<Eigen::Index>(k);
        ts.inputs.row(i) = joint_input(row.design, thetas[k]).transpose();
        ts.outputs(i, 0) = sizes[k].length;
        ts.outputs(i, 1) = sizes[k].depth;
        ts.condition.push_back(row.index);
        for (auto& note : notes[k]) ts.rejections.push_back(std::move(note));
    }
    ts.input_map = input_standardization(dataset, prior);
    ts.compute_output_maps();
    return ts;
}

// ---------------------------------------------------------------------------
// persistence: CSV rows plus a JSON sidecar

inline const std::vector<std::string>& training_columns() {
    static const std::vector<std::string> cols = {"condition", "power_W", "beam_radius_mm", "pulse_ms", "alpha",
                                                  "A_h",       "epsilon", "c_l",            "k_l",      "L",
                                                  "mu_l",      "gamma_T", "length_mm",      "depth_mm"};
    return cols;
}

inline void write_training_csv(std::ostream& os, const TrainingSet& ts) {
    const auto& cols = training_columns();
    for (std::size_t c = 0; c < cols.size(); ++c) os << (c ? "," : "") << cols[c];
    os << '\n';
    // scaled columns: design at the dataset's 12 digits, sizes at 15 so a load/save cycle is byte-stable
    auto milli = [](double v, int digits) { return strprintf("%.*g", digits, v * 1e3); };
    for (Eigen::Index i = 0; i < ts.size(); ++i) {
        os << ts.condition[static_cast<std::size_t>(i)] << ',' << format_exact(ts.inputs(i, 0)) << ','
           << milli(ts.inputs(i, 1), 12) << ',' << milli(ts.inputs(i, 2), 12);
        for (Eigen::Index j = 3; j < ts.inputs.cols(); ++j) os << ',' << format_exact(ts.inputs(i, j));
        os << ',' << milli(ts.outputs(i, 0), 15) << ',' << milli(ts.outputs(i, 1), 15) << '\n';
    }
}

inline nlohmann::json training_sidecar(const TrainingSet& ts) {
    nlohmann::json j;
    j["format"] = "meltcal-training-1";
    j["seed"] = ts.seed;
    j["stream_id"] = ts.stream_id;
    j["samples_per_condition"] = ts.samples_per_condition;
    j["rows"] = ts.size();
    nlohmann::json maps = nlohmann::json::array();
    for (const auto& m : ts.input_map.maps) maps.push_back({{"offset", m.offset}, {"scale", m.scale}});
    j["input_maps"] = maps;
    j["output_maps"] = nlohmann::json::array();
    for (const auto& m : ts.output_maps) j["output_maps"].push_back({{"offset", m.offset}, {"scale", m.scale}});
    j["rejections"] = ts.rejections;
    return j;
}

inline void save_training_set(const TrainingSet& ts, const std::string& csv_path, const std::string& json_path) {
    std::ofstream os(csv_path);
    if (!os) throw IoError("cannot write " + csv_path);
    write_training_csv(os, ts);
    std::ofstream js(json_path);
    if (!js) throw IoError("cannot write " + json_path);
    js << training_sidecar(ts).dump(2) << '\n';
}

inline TrainingSet load_training_set(const std::string& csv_path, const std::string& json_path) {
    auto table = csv::read_file(csv_path);
    if (table.header != training_columns()) throw ParseError(csv_path + ": unexpected training-set header");
    TrainingSet ts;
    const auto n = static_cast<Eigen::Index>(table.rows.size());
    ts.inputs.resize(n, static_cast<Eigen::Index>(kNumDesign + kNumParams));
    ts.outputs.resize(n, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& cells = table.rows[static_cast<std::size_t>(i)];
        std::vector<double> v(cells.size());
        for (std::size_t c = 0; c < cells.size(); ++c)
            if (!csv::parse_double(cells[c], v[c]))
                throw ParseError(csv_path + ": row " + std::to_string(i + 1) + " column '" + training_columns()[c] +
                                 "' is not numeric");
        ts.condition.push_back(static_cast<int>(v[0]));
        ts.inputs(i, 0) = v[1];
        ts.inputs(i, 1) = v[2] * 1e-3;
        ts.inputs(i, 2) = v[3] * 1e-3;
        for (Eigen::Index j = 3; j < ts.inputs.cols(); ++j) ts.inputs(i, j) = v[static_cast<std::size_t>(j + 1)];
        ts.outputs(i, 0) = v[12] * 1e-3;
        ts.outputs(i, 1) = v[13] * 1e-3;
    }
    std::ifstream js(json_path);
    if (!js) throw IoError("cannot open " + json_path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(js);
        ts.seed = j.at("seed").get<std::uint64_t>();
        ts.stream_id = j.at("stream_id").get<std::uint64_t>();
        ts.samples_per_condition = j.at("samples_per_condition").get<std::size_t>();
        for (const auto& m : j.at("input_maps")) ts.input_map.maps.push_back({m.at("offset"), m.at("scale")});
        for (std::size_t c = 0; c < 2; ++c)
            ts.output_maps[c] = {j.at("output_maps")[c].at("offset"), j.at("output_maps")[c].at("scale")};
        ts.rejections = j.at("rejections").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(json_path + ": " + e.what());
    }
    return ts;
}

} // namespace meltcal

#endif // MELTCAL_DOE_HPP
