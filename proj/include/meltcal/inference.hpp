#ifndef MELTCAL_INFERENCE_HPP
#define MELTCAL_INFERENCE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "meltcal/csv.hpp"
#include "meltcal/doe.hpp"
#include "meltcal/domain.hpp"
#include "meltcal/error.hpp"
#include "meltcal/format.hpp"
#include "meltcal/parallel.hpp"
#include "meltcal/random.hpp"
#include "meltcal/surrogate.hpp"

namespace meltcal {

enum class OutputSelection { length, depth, both };

inline const char* selection_name(OutputSelection s) {
    switch (s) {
    case OutputSelection::length: return "length";
    case OutputSelection::depth: return "depth";
    default: return "both";
    }
}

inline OutputSelection parse_selection(const std::string& s) {
    if (s == "length") return OutputSelection::length;
    if (s == "depth") return OutputSelection::depth;
    if (s == "both") return OutputSelection::both;
    throw ConfigError("outputs must be one of length, depth, both; got '" + s + "'");
}

struct LikelihoodConfig {
    double relative_noise = 0.05; // sigma_exp = max(relative_noise * measured, absolute_floor)
    double absolute_floor = 1e-5; // m
    bool use_dataset_sigmas = true; // explicit per-row sigmas override the rule when present
    bool include_code_uncertainty = true;
    OutputSelection outputs = OutputSelection::both;

    void validate() const {
        if (!(relative_noise > 0.0 && relative_noise <= 0.5))
            throw ConfigError("likelihood relative_noise must lie in (0, 0.5]");
        if (!(absolute_floor > 0.0)) throw ConfigError("likelihood absolute_floor must be positive");
    }

    bool uses(Output o) const {
        return outputs == OutputSelection::both || (outputs == OutputSelection::length) == (o == Output::length);
    }
};

/// Measurement standard deviation of one datum.
inline double experimental_sigma(const ExperimentRow& row, Output o, const LikelihoodConfig& cfg) {
    const auto& explicit_sigma = o == Output::length ? row.length_sigma : row.depth_sigma;
    if (cfg.use_dataset_sigmas && explicit_sigma) return *explicit_sigma;
    double y = o == Output::length ? row.length : row.depth;
    return std::max(cfg.relative_noise * y, cfg.absolute_floor);
}

/// Log posterior with uniform prior, diagonal Sigma = Sigma_exp + Sigma_code
/// and zero model discrepancy; additive constants dropped. Precomputes the
/// per-datum inputs so repeated evaluation is cheap; immutable and reentrant.
class LogPosterior {
public:
    LogPosterior(const ExperimentalDataset& ds, const GpSurrogate& gp_length, const GpSurrogate& gp_depth,
                 LikelihoodConfig cfg, PriorSpec prior)
        : gps_{&gp_length, &gp_depth}, cfg_(cfg), prior_(std::move(prior)) {
        cfg_.validate();
        for (const auto& row : ds.rows)
            for (Output o : {Output::length, Output::depth}) {
                if (!cfg_.uses(o)) continue;
                Datum d;
                d.output = o;
                d.design = row.design;
                d.measured = o == Output::length ? row.length : row.depth;
                double s = experimental_sigma(row, o, cfg_);
                d.variance = s * s;
                data_.push_back(d);
            }
    }

    double operator()(const CalibrationParams& theta) const {
        if (!in_support(theta, prior_)) return -std::numeric_limits<double>::infinity();
        double lp = 0.0;
        for (const auto& d : data_) {
            const GpSurrogate& gp = *gps_[static_cast<std::size_t>(d.output)];
            Eigen::VectorXd x = joint_input(d.design, theta);
            double mean, var = d.variance;
            if (cfg_.include_code_uncertainty) {
                auto p = gp.predict(x);
                mean = p.mean;
                var += p.variance;
            } else {
                mean = gp.predict_mean(x);
            }
            double r = d.measured - mean;
            lp += -0.5 * std::log(var) - 0.5 * r * r / var;
        }
        return lp;
    }

    double operator()(const Eigen::Ref<const Eigen::VectorXd>& theta) const {
        return (*this)(CalibrationParams::from_vector(theta));
    }

    std::size_t data_count() const { return data_.size(); }

private:
    struct Datum {
        Output output;
        DesignVars design;
        double measured;
        double variance;
    };
    std::array<const GpSurrogate*, 2> gps_;
    LikelihoodConfig cfg_;
    PriorSpec prior_;
    std::vector<Datum> data_;
};

inline double log_posterior(const CalibrationParams& theta, const ExperimentalDataset& ds, const GpSurrogate& gp_length,
                            const GpSurrogate& gp_depth, const LikelihoodConfig& cfg, const PriorSpec& prior) {
    return LogPosterior(ds, gp_length, gp_depth, cfg, prior)(theta);
}

// ---------------------------------------------------------------------------
// adaptive Metropolis

struct PosteriorChain {
    Eigen::MatrixXd samples;         // rows = stored states, raw units
    std::vector<double> log_post;
    std::vector<unsigned char> accepted; // per stored state: 1 if reached by an accepted move
    std::vector<std::size_t> step;   // original step index of each stored state
    std::vector<std::string> names;
    std::size_t total_steps = 0;
    std::size_t accept_count = 0;
    std::size_t adapt_start = 0;
    std::size_t post_adapt_steps = 0;
    std::size_t post_adapt_accepts = 0;
    double adapt_scale = 0.0;        // 2.38^2 / d
    std::size_t burn = 0;
    std::size_t thin = 1;
    std::uint64_t seed = 0;
    std::uint64_t stream_id = 0;

    std::size_t size() const { return static_cast<std::size_t>(samples.rows()); }
    std::size_t dims() const { return static_cast<std::size_t>(samples.cols()); }
    double acceptance_rate() const {
        return total_steps ? static_cast<double>(accept_count) / static_cast<double>(total_steps) : 0.0;
    }
    double post_adapt_acceptance() const {
        return post_adapt_steps ? static_cast<double>(post_adapt_accepts) / static_cast<double>(post_adapt_steps) : 0.0;
    }
};

struct MetropolisOptions {
    std::size_t steps = 50000;
    std::size_t adapt_start = 1000;
    double regularization = 1e-10; // added to the adapted covariance in scaled coordinates
};

using LogDensity = std::function<double(const Eigen::Ref<const Eigen::VectorXd>&)>;

/// Random-walk Metropolis with recursive empirical-covariance adaptation
/// (2.38^2/d scaling). `ranges` sets the coordinate scaling: the initial
/// proposal variance of coordinate j is ranges_j^2 / 100, and the adapted
/// covariance is regularized in units of those ranges. Every state is
/// stored, including repeats after rejection; row 0 is the initial state.
inline PosteriorChain adaptive_metropolis(const LogDensity& target, const Eigen::VectorXd& init,
                                          const Eigen::VectorXd& ranges, const MetropolisOptions& opt,
                                          RandomStream stream) {
    const Eigen::Index d = init.size();
    if (d < 1) throw PreconditionError("adaptive_metropolis needs at least one dimension");
    if (ranges.size() != d || !(ranges.array() > 0.0).all())
        throw PreconditionError("proposal ranges must be positive, one per dimension");
    if (!(opt.adapt_start >= 100 && opt.steps > opt.adapt_start))
        throw PreconditionError("adaptive_metropolis needs steps > adapt_start >= 100");
    double lp = target(init);
    if (!std::isfinite(lp)) throw PreconditionError("target is not finite at the initial state");

    PosteriorChain ch;
    ch.seed = stream.seed();
    ch.stream_id = stream.stream_id();
    ch.adapt_start = opt.adapt_start;
    ch.adapt_scale = 2.38 * 2.38 / static_cast<double>(d);
    ch.total_steps = opt.steps;
    ch.samples.resize(static_cast<Eigen::Index>(opt.steps), d);
    ch.log_post.resize(opt.steps);
    ch.accepted.resize(opt.steps);
    ch.step.resize(opt.steps);

    // scaled coordinates z = x / ranges
    Eigen::VectorXd z = init.cwiseQuotient(ranges);
    Eigen::VectorXd mean = z;
    Eigen::MatrixXd m2 = Eigen::MatrixXd::Zero(d, d);
    Eigen::MatrixXd chol = Eigen::MatrixXd::Identity(d, d) * 0.1; // sqrt(1/100)
    std::size_t count = 1;

    ch.samples.row(0) = init.transpose();
    ch.log_post[0] = lp;
    ch.accepted[0] = 1;
    ch.step[0] = 0;
    Eigen::VectorXd noise(d), zp(d), xp(d);
    for (std::size_t t = 1; t < opt.steps; ++t) {
        if (t >= opt.adapt_start) {
            Eigen::MatrixXd cov = ch.adapt_scale * m2 / static_cast<double>(count - 1);
            cov.diagonal().array() += opt.regularization;
            Eigen::LLT<Eigen::MatrixXd> llt(cov);
            if (llt.info() == Eigen::Success) chol = llt.matrixL();
        }
        for (Eigen::Index j = 0; j < d; ++j) noise(j) = stream.normal();
        zp = z + chol * noise;
        xp = zp.cwiseProduct(ranges);
        double lpp = target(xp);
        double u = stream.uniform();
        bool accept = std::isfinite(lpp) && std::log(u) < lpp - lp;
        if (accept) {
            z = zp;
            lp = lpp;
            ++ch.accept_count;
        }
        if (t >= opt.adapt_start) {
            ++ch.post_adapt_steps;
            if (accept) ++ch.post_adapt_accepts;
        }
        ++count;
        Eigen::VectorXd delta = z - mean;
        mean += delta / static_cast<double>(count);
        m2 += delta * (z - mean).transpose();
        auto row = static_cast<Eigen::Index>(t);
        ch.samples.row(row) = z.cwiseProduct(ranges).transpose();
        ch.log_post[t] = lp;
        ch.accepted[t] = accept ? 1 : 0;
        ch.step[t] = t;
    }
    return ch;
}

/// Chain over the eight calibration parameters; proposal scaling from the prior ranges.
inline PosteriorChain adaptive_metropolis(const LogPosterior& target, const CalibrationParams& init,
                                          const PriorSpec& prior, const MetropolisOptions& opt, RandomStream stream) {
    Eigen::VectorXd x0(static_cast<Eigen::Index>(kNumParams)), ranges(static_cast<Eigen::Index>(kNumParams));
    for (std::size_t i = 0; i < kNumParams; ++i) {
        x0(static_cast<Eigen::Index>(i)) = init.to_array()[i];
        ranges(static_cast<Eigen::Index>(i)) = prior.interval(i).width();
    }
    auto ch = adaptive_metropolis([&](const Eigen::Ref<const Eigen::VectorXd>& x) { return target(x); }, x0, ranges,
                                  opt, stream);
    ch.names.assign(CalibrationParams::names.begin(), CalibrationParams::names.end());
    return ch;
}

/// Drops the first `burn` states and keeps every `thin`-th state after that.
inline PosteriorChain burn_thin(const PosteriorChain& ch, std::size_t burn, std::size_t thin) {
    if (thin < 1) throw PreconditionError("thin must be at least 1");
    if (burn >= ch.size()) throw PreconditionError("burn must be smaller than the number of stored states");
    std::size_t kept = (ch.size() - burn - 1) / thin + 1;
    PosteriorChain out = ch;
    out.samples.resize(static_cast<Eigen::Index>(kept), ch.samples.cols());
    out.log_post.resize(kept);
    out.accepted.resize(kept);
    out.step.resize(kept);
    for (std::size_t k = 0; k < kept; ++k) {
        std::size_t src = burn + k * thin;
        out.samples.row(static_cast<Eigen::Index>(k)) = ch.samples.row(static_cast<Eigen::Index>(src));
        out.log_post[k] = ch.log_post[src];
        out.accepted[k] = ch.accepted[src];
        out.step[k] = ch.step[src];
    }
    out.burn = ch.burn + burn * ch.thin;
    out.thin = ch.thin * thin;
    return out;
}

// ---------------------------------------------------------------------------
// diagnostics

namespace detail {

struct CenteredSeries {
    std::vector<double> x;
    double c0 = 0.0;

    explicit CenteredSeries(const std::vector<double>& s) : x(s) {
        double m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
        for (double& v : x) v -= m;
        for (double v : x) c0 += v * v;
        c0 /= static_cast<double>(x.size());
    }

    double acf(std::size_t k) const {
        double c = 0.0;
        for (std::size_t i = 0; i + k < x.size(); ++i) c += x[i] * x[i + k];
        return c / static_cast<double>(x.size()) / c0;
    }
};

} // namespace detail

/// acf(k) = c(k)/c(0), biased (divide by n) autocovariance, k = 0..max_lag.
inline std::vector<double> autocorrelation(const std::vector<double>& series, std::size_t max_lag) {
    if (max_lag < 1 || series.size() <= max_lag) throw PreconditionError("autocorrelation needs length > max_lag >= 1");
    detail::CenteredSeries cs(series);
    if (!(cs.c0 > 0.0)) throw PreconditionError("autocorrelation undefined for a constant series");
    std::vector<double> r(max_lag + 1);
    for (std::size_t k = 0; k <= max_lag; ++k) r[k] = cs.acf(k);
    return r;
}

/// Effective sample size with the initial positive sequence estimator.
/// A constant series returns its length.
inline double effective_sample_size(const std::vector<double>& series) {
    const std::size_t n = series.size();
    if (n < 4) throw PreconditionError("effective sample size needs at least 4 samples");
    detail::CenteredSeries cs(series);
    if (!(cs.c0 > 0.0)) return static_cast<double>(n);
    double sum = 0.0;
    for (std::size_t m = 0; 2 * m + 1 < n; ++m) {
        double gamma = cs.acf(2 * m) + cs.acf(2 * m + 1);
        if (!(gamma > 0.0)) break;
        sum += gamma;
    }
    double tau = std::max(-1.0 + 2.0 * sum, 1.0 / static_cast<double>(n));
    return std::min(static_cast<double>(n), static_cast<double>(n) / tau);
}

/// Linear-interpolation empirical quantile of sorted data.
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
    if (sorted.empty()) throw PreconditionError("quantile of an empty sample");
    double h = p * static_cast<double>(sorted.size() - 1);
    auto lo = static_cast<std::size_t>(std::floor(h));
    std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct ParameterSummary {
    std::string name;
    double mean = 0.0;
    double sd = 0.0;
    double ci_lower = 0.0;
    double ci_upper = 0.0;
    double ess = 0.0;
};

struct PosteriorSummary {
    std::vector<ParameterSummary> params;
    Eigen::MatrixXd correlation;
    Eigen::VectorXd mode; // retained state with the highest log posterior
    std::size_t retained = 0;
    double acceptance_rate = 0.0;
    double post_adapt_acceptance = 0.0;
};

inline PosteriorSummary summarize(const PosteriorChain& ch) {
    const std::size_t n = ch.size();
    if (n < 50) throw PreconditionError("summarize needs at least 50 retained samples");
    const auto d = ch.samples.cols();
    PosteriorSummary s;
    s.retained = n;
    s.acceptance_rate = ch.acceptance_rate();
    s.post_adapt_acceptance = ch.post_adapt_acceptance();
    // shift by the first row first: a constant column then gives exactly zero spread
    Eigen::RowVectorXd origin = ch.samples.row(0);
    Eigen::MatrixXd shifted = ch.samples.rowwise() - origin;
    Eigen::RowVectorXd offset = shifted.colwise().mean();
    Eigen::VectorXd mean = (origin + offset).transpose();
    Eigen::MatrixXd centered = shifted.rowwise() - offset;
    Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
    for (Eigen::Index j = 0; j < d; ++j) {
        ParameterSummary p;
        p.name = static_cast<std::size_t>(j) < ch.names.size() ? ch.names[static_cast<std::size_t>(j)]
                                                               : "x" + std::to_string(j);
        Eigen::VectorXd col = ch.samples.col(j);
        std::vector<double> v(col.data(), col.data() + n);
        p.mean = mean(j);
        p.sd = std::sqrt(std::max(0.0, cov(j, j)));
        p.ess = effective_sample_size(v);
        std::sort(v.begin(), v.end());
        p.ci_lower = quantile_sorted(v, 0.025);
        p.ci_upper = quantile_sorted(v, 0.975);
        s.params.push_back(p);
    }
    s.correlation = Eigen::MatrixXd::Identity(d, d);
    for (Eigen::Index a = 0; a < d; ++a)
        for (Eigen::Index b = 0; b < d; ++b)
            if (a != b && cov(a, a) > 0.0 && cov(b, b) > 0.0)
                s.correlation(a, b) = std::clamp(cov(a, b) / std::sqrt(cov(a, a) * cov(b, b)), -1.0, 1.0);
            else if (a != b)
                s.correlation(a, b) = 0.0;
    auto best = std::max_element(ch.log_post.begin(), ch.log_post.end()) - ch.log_post.begin();
    s.mode = ch.samples.row(best).transpose();
    return s;
}

/// Potential scale reduction factor per coordinate over equal-length chains.
inline std::vector<double> potential_scale_reduction(const std::vector<PosteriorChain>& chains) {
    if (chains.size() < 2) throw PreconditionError("potential scale reduction needs at least 2 chains");
    const std::size_t n = chains.front().size();
    const auto d = chains.front().samples.cols();
    for (const auto& c : chains)
        if (c.size() != n || c.samples.cols() != d) throw PreconditionError("chains must have equal shape");
    if (n < 2) throw PreconditionError("chains need at least 2 samples");
    const double m = static_cast<double>(chains.size()), nn = static_cast<double>(n);
    std::vector<double> r(static_cast<std::size_t>(d));
    for (Eigen::Index j = 0; j < d; ++j) {
        std::vector<double> means, vars;
        for (const auto& c : chains) {
            Eigen::VectorXd col = c.samples.col(j);
            double mu = col.mean();
            means.push_back(mu);
            vars.push_back((col.array() - mu).square().sum() / (nn - 1.0));
        }
        double grand = std::accumulate(means.begin(), means.end(), 0.0) / m;
        double b = 0.0;
        for (double mu : means) b += (mu - grand) * (mu - grand);
        b *= nn / (m - 1.0);
        double w = std::accumulate(vars.begin(), vars.end(), 0.0) / m;
        double var_plus = (nn - 1.0) / nn * w + b / nn;
        r[static_cast<std::size_t>(j)] = w > 0.0 ? std::sqrt(var_plus / w) : 1.0;
    }
    return r;
}

/// Runs independent chains concurrently, chain c on stream.split(c).
inline std::vector<PosteriorChain> run_chains(const LogPosterior& target, const std::vector<CalibrationParams>& inits,
                                              const PriorSpec& prior, const MetropolisOptions& opt,
                                              RandomStream stream, unsigned threads = 1) {
    std::vector<PosteriorChain> chains(inits.size());
    parallel_for(inits.size(), threads,
                 [&](std::size_t c) { chains[c] = adaptive_metropolis(target, inits[c], prior, opt, stream.split(c)); });
    return chains;
}

// ---------------------------------------------------------------------------
// persistence

inline void write_chain_csv(std::ostream& os, const PosteriorChain& ch) {
    os << "step";
    for (std::size_t j = 0; j < ch.dims(); ++j) os << ',' << (j < ch.names.size() ? ch.names[j] : "x" + std::to_string(j));
    os << ",log_post,accepted\n";
    for (std::size_t i = 0; i < ch.size(); ++i) {
        os << ch.step[i];
        for (Eigen::Index j = 0; j < ch.samples.cols(); ++j)
            os << ',' << format_exact(ch.samples(static_cast<Eigen::Index>(i), j));
        os << ',' << format_exact(ch.log_post[i]) << ',' << static_cast<int>(ch.accepted[i]) << '\n';
    }
}

inline nlohmann::json chain_metadata(const PosteriorChain& ch) {
    return {{"total_steps", ch.total_steps},
            {"accept_count", ch.accept_count},
            {"adapt_start", ch.adapt_start},
            {"adapt_scale", ch.adapt_scale},
            {"post_adapt_steps", ch.post_adapt_steps},
            {"post_adapt_accepts", ch.post_adapt_accepts},
            {"burn", ch.burn},
            {"thin", ch.thin},
            {"seed", ch.seed},
            {"stream_id", ch.stream_id}};
}

inline void save_chain(const PosteriorChain& ch, const std::string& csv_path, const std::string& meta_path) {
    std::ofstream os(csv_path);
    if (!os) throw IoError("cannot write " + csv_path);
    write_chain_csv(os, ch);
    std::ofstream ms(meta_path);
    if (!ms) throw IoError("cannot write " + meta_path);
    ms << chain_metadata(ch).dump(1) << '\n';
}

inline PosteriorChain load_chain(const std::string& csv_path, const std::string& meta_path) {
    auto table = csv::read_file(csv_path);
    if (table.header.size() < 4 || table.header.front() != "step" || table.header[table.header.size() - 2] != "log_post" ||
        table.header.back() != "accepted")
        throw ParseError(csv_path + ": chain header must be step,<parameters>,log_post,accepted");
    PosteriorChain ch;
    const std::size_t d = table.header.size() - 3;
    ch.names.assign(table.header.begin() + 1, table.header.end() - 2);
    ch.samples.resize(static_cast<Eigen::Index>(table.rows.size()), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        const auto& r = table.rows[i];
        double v;
        auto num = [&](std::size_t c) {
            if (!csv::parse_double(r[c], v))
                throw ParseError(strprintf("%s: row %zu column '%s': non-numeric value", csv_path.c_str(), i + 1,
                                           table.header[c].c_str()));
            return v;
        };
        ch.step.push_back(static_cast<std::size_t>(num(0)));
        for (std::size_t j = 0; j < d; ++j) ch.samples(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = num(j + 1);
        ch.log_post.push_back(num(d + 1));
        ch.accepted.push_back(num(d + 2) != 0.0 ? 1 : 0);
    }
    std::ifstream ms(meta_path);
    if (!ms) throw IoError("cannot open " + meta_path);
    try {
        auto j = nlohmann::json::parse(ms);
        ch.total_steps = j.at("total_steps");
        ch.accept_count = j.at("accept_count");
        ch.adapt_start = j.at("adapt_start");
        ch.adapt_scale = j.at("adapt_scale");
        ch.post_adapt_steps = j.at("post_adapt_steps");
        ch.post_adapt_accepts = j.at("post_adapt_accepts");
        ch.burn = j.at("burn");
        ch.thin = j.at("thin");
        ch.seed = j.at("seed");
        ch.stream_id = j.at("stream_id");
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(meta_path + ": " + e.what());
    }
    return ch;
}

inline nlohmann::json summary_to_json(const PosteriorSummary& s) {
    nlohmann::json j;
    nlohmann::json params = nlohmann::json::array();
    for (const auto& p : s.params)
        params.push_back({{"parameter", p.name},
                          {"mean", p.mean},
                          {"std", p.sd},
                          {"ci95", {p.ci_lower, p.ci_upper}},
                          {"ess", p.ess}});
    j["parameters"] = params;
    nlohmann::json corr = nlohmann::json::array();
    for (Eigen::Index a = 0; a < s.correlation.rows(); ++a) {
        std::vector<double> row(static_cast<std::size_t>(s.correlation.cols()));
        for (Eigen::Index b = 0; b < s.correlation.cols(); ++b) row[static_cast<std::size_t>(b)] = s.correlation(a, b);
        corr.push_back(row);
    }
    j["correlation"] = corr;
    j["mode"] = std::vector<double>(s.mode.data(), s.mode.data() + s.mode.size());
    j["retained"] = s.retained;
    j["acceptance_rate"] = s.acceptance_rate;
    j["post_adapt_acceptance"] = s.post_adapt_acceptance;
    return j;
}

inline PosteriorSummary summary_from_json(const nlohmann::json& j) {
    try {
        PosteriorSummary s;
        for (const auto& p : j.at("parameters")) {
            ParameterSummary ps;
            ps.name = p.at("parameter");
            ps.mean = p.at("mean");
            ps.sd = p.at("std");
            ps.ci_lower = p.at("ci95").at(0);
            ps.ci_upper = p.at("ci95").at(1);
            ps.ess = p.at("ess");
            s.params.push_back(ps);
        }
        auto corr = j.at("correlation").get<std::vector<std::vector<double>>>();
        auto d = static_cast<Eigen::Index>(corr.size());
        s.correlation.resize(d, d);
        for (Eigen::Index a = 0; a < d; ++a)
            for (Eigen::Index b = 0; b < d; ++b)
                s.correlation(a, b) = corr[static_cast<std::size_t>(a)].at(static_cast<std::size_t>(b));
        auto mode = j.at("mode").get<std::vector<double>>();
        s.mode = Eigen::Map<Eigen::VectorXd>(mode.data(), static_cast<Eigen::Index>(mode.size()));
        s.retained = j.at("retained");
        s.acceptance_rate = j.at("acceptance_rate");
        s.post_adapt_acceptance = j.at("post_adapt_acceptance");
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("posterior summary: ") + e.what());
    }
}

} // namespace meltcal

#endif // MELTCAL_INFERENCE_HPP
