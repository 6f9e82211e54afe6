#ifndef MELTCAL_SENSITIVITY_HPP
#define MELTCAL_SENSITIVITY_HPP

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "meltcal/doe.hpp"
#include "meltcal/domain.hpp"
#include "meltcal/error.hpp"
#include "meltcal/format.hpp"
#include "meltcal/parallel.hpp"
#include "meltcal/random.hpp"
#include "meltcal/surrogate.hpp"

namespace meltcal {

/// Pearson correlation with the n-1 convention in numerator and denominator.
inline double pcc(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw PreconditionError("pcc needs vectors of equal length");
    if (x.size() < 3) throw PreconditionError("pcc needs at least 3 samples");
    const double n = static_cast<double>(x.size());
    double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (!(sxx > 0.0) || !(syy > 0.0)) throw PreconditionError("correlation undefined: constant input");
    double r = (sxy / (n - 1.0)) / (std::sqrt(sxx / (n - 1.0)) * std::sqrt(syy / (n - 1.0)));
    return std::clamp(r, -1.0, 1.0);
}

/// 1-based ranks; tied values share the average of their positions.
inline std::vector<double> ranks(const std::vector<double>& x) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
        i = j + 1;
    }
    return r;
}

/// Spearman rank correlation: pcc of the average ranks.
inline double srcc(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw PreconditionError("srcc needs vectors of equal length");
    return pcc(ranks(x), ranks(y));
}

struct SobolResult {
    std::vector<double> first;      // S_i
    std::vector<double> total;      // T_i
    std::vector<double> first_se;   // bootstrap standard errors
    std::vector<double> total_se;
    double variance = 0.0;          // output variance over A and B
    std::size_t n_base = 0;
    std::size_t evaluations = 0;
    Eigen::MatrixXd a_sample;       // base matrix A, raw units
    Eigen::VectorXd a_values;       // f(A)
};

using VectorFunction = std::function<double(const Eigen::Ref<const Eigen::VectorXd>&)>;

namespace detail {

struct SobolEstimate {
    std::vector<double> first, total;
    double variance = 0.0;
};

inline SobolEstimate sobol_estimate(const Eigen::VectorXd& fa, const Eigen::VectorXd& fb, const Eigen::MatrixXd& fab,
                                    const std::vector<std::size_t>& rows) {
    const std::size_t d = static_cast<std::size_t>(fab.cols());
    const double n = static_cast<double>(rows.size());
    double mean = 0.0;
    for (auto r : rows) mean += fa(static_cast<Eigen::Index>(r)) + fb(static_cast<Eigen::Index>(r));
    mean /= 2.0 * n;
    double var = 0.0;
    for (auto r : rows) {
        double a = fa(static_cast<Eigen::Index>(r)) - mean, b = fb(static_cast<Eigen::Index>(r)) - mean;
        var += a * a + b * b;
    }
    var /= 2.0 * n - 1.0;
    SobolEstimate e;
    e.variance = var;
    e.first.assign(d, 0.0);
    e.total.assign(d, 0.0);
    if (!(var > 0.0)) return e;
    for (std::size_t i = 0; i < d; ++i) {
        double s = 0.0, t = 0.0;
        for (auto r : rows) {
            auto k = static_cast<Eigen::Index>(r);
            // centred values keep the first-order estimator's variance independent of the output mean
            double a = fa(k) - mean, b = fb(k) - mean, ab = fab(k, static_cast<Eigen::Index>(i)) - mean;
            s += b * (ab - a);
            t += (a - ab) * (a - ab);
        }
        e.first[i] = s / n / var;
        e.total[i] = t / (2.0 * n) / var;
    }
    return e;
}

} // namespace detail

/// First-order (Saltelli) and total (Jansen) Sobol indices of f over
/// independent uniform inputs on `bounds`, with bootstrap standard errors.
inline SobolResult sobol_indices(const VectorFunction& f, const std::vector<Interval>& bounds, std::size_t n_base,
                                 RandomStream stream, unsigned threads = 1, std::size_t bootstrap = 100) {
    if (n_base < 256 || (n_base & (n_base - 1)) != 0)
        throw PreconditionError("n_base must be a power of two and at least 256");
    if (bounds.empty()) throw PreconditionError("sobol_indices needs at least one input");
    const std::size_t d = bounds.size();
    const auto n = static_cast<Eigen::Index>(n_base);
    const auto dd = static_cast<Eigen::Index>(d);

    Eigen::MatrixXd A(n, dd), B(n, dd);
    RandomStream sa = stream.split(0), sb = stream.split(1);
    for (Eigen::Index r = 0; r < n; ++r)
        for (Eigen::Index j = 0; j < dd; ++j) {
            const auto& iv = bounds[static_cast<std::size_t>(j)];
            A(r, j) = iv.lo + iv.width() * sa.uniform();
            B(r, j) = iv.lo + iv.width() * sb.uniform();
        }

    // rows: A, B, then AB_1 .. AB_d, each n rows
    const std::size_t total = n_base * (d + 2);
    std::vector<double> values(total);
    parallel_for(total, threads, [&](std::size_t k) {
        std::size_t block = k / n_base;
        auto r = static_cast<Eigen::Index>(k % n_base);
        Eigen::VectorXd x;
        std::string matrix;
        if (block == 0) {
            x = A.row(r).transpose();
            matrix = "A";
        } else if (block == 1) {
            x = B.row(r).transpose();
            matrix = "B";
        } else {
            auto i = static_cast<Eigen::Index>(block - 2);
            x = A.row(r).transpose();
            x(i) = B(r, i);
            matrix = "AB_" + std::to_string(block - 1);
        }
        double v;
        try {
            v = f(x);
        } catch (const Error& e) {
            throw Error(e.category(), strprintf("model failed on matrix %s row %ld: %s", matrix.c_str(),
                                                static_cast<long>(r), e.what()));
        }
        if (!std::isfinite(v))
            throw NumericError(strprintf("non-finite model value on matrix %s row %ld", matrix.c_str(),
                                         static_cast<long>(r)));
        values[k] = v;
    });

    Eigen::Map<const Eigen::VectorXd> all(values.data(), static_cast<Eigen::Index>(total));
    Eigen::VectorXd fa = all.segment(0, n), fb = all.segment(n, n);
    Eigen::MatrixXd fab(n, dd);
    for (Eigen::Index i = 0; i < dd; ++i) fab.col(i) = all.segment((i + 2) * n, n);

    std::vector<std::size_t> rows(n_base);
    std::iota(rows.begin(), rows.end(), 0);
    auto est = detail::sobol_estimate(fa, fb, fab, rows);

    SobolResult res;
    res.first = est.first;
    res.total = est.total;
    res.variance = est.variance;
    res.n_base = n_base;
    res.evaluations = total;
    res.a_sample = A;
    res.a_values = fa;
    res.first_se.assign(d, 0.0);
    res.total_se.assign(d, 0.0);
    if (bootstrap >= 2) {
        RandomStream sboot = stream.split(2);
        std::vector<std::vector<double>> bs(d), bt(d);
        for (std::size_t b = 0; b < bootstrap; ++b) {
            for (auto& r : rows) r = static_cast<std::size_t>(sboot.below(n_base));
            auto e = detail::sobol_estimate(fa, fb, fab, rows);
            for (std::size_t i = 0; i < d; ++i) {
                bs[i].push_back(e.first[i]);
                bt[i].push_back(e.total[i]);
            }
        }
        auto sd = [](const std::vector<double>& v) {
            double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
            double s = 0.0;
            for (double x : v) s += (x - m) * (x - m);
            return std::sqrt(s / static_cast<double>(v.size() - 1));
        };
        for (std::size_t i = 0; i < d; ++i) {
            res.first_se[i] = sd(bs[i]);
            res.total_se[i] = sd(bt[i]);
        }
    }
    return res;
}

/// Sobol indices of a function of the calibration parameters over the prior.
inline SobolResult sobol_indices(const std::function<double(const CalibrationParams&)>& f, const PriorSpec& prior,
                                 std::size_t n_base, RandomStream stream, unsigned threads = 1) {
    std::vector<Interval> bounds;
    for (std::size_t i = 0; i < kNumParams; ++i) bounds.push_back(prior.interval(i));
    return sobol_indices([&](const Eigen::Ref<const Eigen::VectorXd>& x) { return f(CalibrationParams::from_vector(x)); },
                         bounds, n_base, stream, threads);
}

struct SensitivityEntry {
    double pcc = 0.0, srcc = 0.0;
    double first = 0.0, total = 0.0;
    double first_se = 0.0, total_se = 0.0;
};

struct SensitivityReport {
    // entries[output][parameter]
    std::array<std::array<SensitivityEntry, kNumParams>, 2> entries{};
    std::array<double, 2> variance{};
    std::size_t n_base = 0;
    std::size_t evaluations_per_output = 0;
    std::string aggregation = "mean of the surrogate prediction over all experimental conditions";

    const SensitivityEntry& at(Output o, std::size_t param) const {
        return entries[static_cast<std::size_t>(o)][param];
    }

    /// Index of the parameter with the largest total index.
    std::size_t dominant(Output o) const {
        const auto& e = entries[static_cast<std::size_t>(o)];
        std::size_t best = 0;
        for (std::size_t i = 1; i < kNumParams; ++i)
            if (e[i].total > e[best].total) best = i;
        return best;
    }
};

/// Condition-averaged surrogate mean as a function of theta.
inline double condition_average(const GpSurrogate& gp, const ExperimentalDataset& ds, const CalibrationParams& theta) {
    double s = 0.0;
    for (const auto& r : ds.rows) s += gp.predict_mean(joint_input(r.design, theta));
    return s / static_cast<double>(ds.size());
}

inline SensitivityReport sa_on_surrogate(const GpSurrogate& gp_length, const GpSurrogate& gp_depth,
                                         const ExperimentalDataset& ds, const PriorSpec& prior, std::size_t n_base,
                                         RandomStream stream, unsigned threads = 1) {
    if (ds.rows.empty()) throw PreconditionError("sa_on_surrogate needs a non-empty dataset");
    SensitivityReport rep;
    rep.n_base = n_base;
    const GpSurrogate* gps[2] = {&gp_length, &gp_depth};
    for (std::size_t o = 0; o < 2; ++o) {
        const GpSurrogate& gp = *gps[o];
        auto sob = sobol_indices([&](const CalibrationParams& th) { return condition_average(gp, ds, th); }, prior,
                                 n_base, stream.split(o), threads);
        rep.variance[o] = sob.variance;
        rep.evaluations_per_output = sob.evaluations;
        std::vector<double> fy(sob.a_values.data(), sob.a_values.data() + sob.a_values.size());
        for (std::size_t i = 0; i < kNumParams; ++i) {
            Eigen::VectorXd col = sob.a_sample.col(static_cast<Eigen::Index>(i));
            std::vector<double> xi(col.data(), col.data() + col.size());
            auto& e = rep.entries[o][i];
            e.pcc = pcc(xi, fy);
            e.srcc = srcc(xi, fy);
            e.first = sob.first[i];
            e.total = sob.total[i];
            e.first_se = sob.first_se[i];
            e.total_se = sob.total_se[i];
        }
    }
    return rep;
}

inline nlohmann::json sensitivity_to_json(const SensitivityReport& rep) {
    nlohmann::json j;
    j["n_base"] = rep.n_base;
    j["evaluations_per_output"] = rep.evaluations_per_output;
    j["aggregation"] = rep.aggregation;
    j["estimators"] = {{"first_order", "Saltelli"}, {"total", "Jansen"}, {"standard_errors", "bootstrap, 100 resamples"}};
    for (std::size_t o = 0; o < 2; ++o) {
        nlohmann::json out = nlohmann::json::array();
        for (std::size_t i = 0; i < kNumParams; ++i) {
            const auto& e = rep.entries[o][i];
            out.push_back({{"parameter", std::string(CalibrationParams::names[i])},
                           {"pcc", e.pcc},
                           {"srcc", e.srcc},
                           {"S", e.first},
                           {"S_se", e.first_se},
                           {"T", e.total},
                           {"T_se", e.total_se}});
        }
        j["outputs"][output_name(static_cast<Output>(o))] = {{"variance", rep.variance[o]}, {"indices", out}};
    }
    return j;
}

inline SensitivityReport sensitivity_from_json(const nlohmann::json& j) {
    try {
        SensitivityReport rep;
        rep.n_base = j.at("n_base");
        rep.evaluations_per_output = j.at("evaluations_per_output");
        rep.aggregation = j.at("aggregation");
        for (std::size_t o = 0; o < 2; ++o) {
            const auto& out = j.at("outputs").at(output_name(static_cast<Output>(o)));
            rep.variance[o] = out.at("variance");
            const auto& idx = out.at("indices");
            if (idx.size() != kNumParams) throw ParseError("sensitivity report needs 8 parameters per output");
            for (std::size_t i = 0; i < kNumParams; ++i) {
                auto& e = rep.entries[o][i];
                e.pcc = idx[i].at("pcc");
                e.srcc = idx[i].at("srcc");
                e.first = idx[i].at("S");
                e.first_se = idx[i].at("S_se");
                e.total = idx[i].at("T");
                e.total_se = idx[i].at("T_se");
            }
        }
        return rep;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("sensitivity document: ") + e.what());
    }
}

/// Wide table: one row per parameter, PCC/SRCC then Sobol columns per output.
inline void write_sensitivity_csv(std::ostream& os, const SensitivityReport& rep) {
    os << "parameter,pcc_length,srcc_length,pcc_depth,srcc_depth,S_length,T_length,S_depth,T_depth,"
          "S_se_length,T_se_length,S_se_depth,T_se_depth\n";
    for (std::size_t i = 0; i < kNumParams; ++i) {
        const auto& l = rep.entries[0][i];
        const auto& d = rep.entries[1][i];
        os << CalibrationParams::names[i];
        for (double v : {l.pcc, l.srcc, d.pcc, d.srcc, l.first, l.total, d.first, d.total, l.first_se, l.total_se,
                         d.first_se, d.total_se})
            os << ',' << format_exact(v);
        os << '\n';
    }
}

} // namespace meltcal

#endif // MELTCAL_SENSITIVITY_HPP
