#ifndef MELTCAL_SURROGATE_HPP
#define MELTCAL_SURROGATE_HPP

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "meltcal/doe.hpp"
#include "meltcal/error.hpp"
#include "meltcal/parallel.hpp"
#include "meltcal/random.hpp"

namespace meltcal {

/// Kernel hyperparameters in log space: signal variance, one length scale
/// per input dimension, noise variance.
struct GpHyperparameters {
    double log_signal_variance = 0.0;
    Eigen::VectorXd log_length_scales;
    double log_noise_variance = std::log(1e-6);

    Eigen::Index dims() const { return log_length_scales.size(); }

    Eigen::VectorXd pack() const {
        Eigen::VectorXd p(dims() + 2);
        p(0) = log_signal_variance;
        p.segment(1, dims()) = log_length_scales;
        p(dims() + 1) = log_noise_variance;
        return p;
    }

    static GpHyperparameters unpack(const Eigen::VectorXd& p) {
        GpHyperparameters h;
        h.log_signal_variance = p(0);
        h.log_length_scales = p.segment(1, p.size() - 2);
        h.log_noise_variance = p(p.size() - 1);
        return h;
    }

    double signal_variance() const { return std::exp(log_signal_variance); }
    double noise_variance() const { return std::exp(log_noise_variance); }
};

/// Box constraints of the hyperparameter search (log space).
struct GpBounds {
    double log_signal_lo = std::log(1e-10), log_signal_hi = std::log(1e4);
    double log_length_lo = std::log(1e-3), log_length_hi = std::log(1e3);
    double log_noise_lo = std::log(1e-10), log_noise_hi = std::log(10.0);

    Eigen::VectorXd lower(Eigen::Index d) const {
        Eigen::VectorXd v(d + 2);
        v(0) = log_signal_lo;
        v.segment(1, d).setConstant(log_length_lo);
        v(d + 1) = log_noise_lo;
        return v;
    }
    Eigen::VectorXd upper(Eigen::Index d) const {
        Eigen::VectorXd v(d + 2);
        v(0) = log_signal_hi;
        v.segment(1, d).setConstant(log_length_hi);
        v(d + 1) = log_noise_hi;
        return v;
    }
};

struct GpOptions {
    int starts = 8;
    int max_iterations = 250;
    double gradient_tolerance = 1e-5;
    double function_tolerance = 1e-9; // relative decrease counted as a stall
    double start_box = 3.0; // starts placed in [-start_box, start_box] per log-hyperparameter
    unsigned threads = 1;
    GpBounds bounds;
};

namespace detail {

/// Signal part of the squared-exponential kernel between rows of A and B
/// (inputs already divided by the length scales).
inline Eigen::MatrixXd se_kernel(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, double signal_variance) {
    Eigen::VectorXd na = A.rowwise().squaredNorm();
    Eigen::VectorXd nb = B.rowwise().squaredNorm();
    Eigen::MatrixXd d2 = (-2.0 * A * B.transpose()).colwise() + na;
    d2.rowwise() += nb.transpose();
    // entries below exp(-700) are set to zero to keep subnormals out of the linear algebra
    return signal_variance *
           (-0.5 * d2.array().max(0.0)).unaryExpr([](double e) { return e < -700.0 ? 0.0 : std::exp(e); }).matrix();
}

inline Eigen::MatrixXd scale_columns(const Eigen::MatrixXd& X, const Eigen::VectorXd& log_ell) {
    return X * (-log_ell.array()).exp().matrix().asDiagonal();
}

/// Cholesky of K with jitter escalation from 1e-10 to 1e-4; returns the jitter used.
inline double robust_cholesky(Eigen::MatrixXd K, Eigen::LLT<Eigen::MatrixXd>& llt) {
    llt.compute(K);
    if (llt.info() == Eigen::Success) return 0.0;
    for (double jitter = 1e-10; jitter <= 1e-4 * 1.0000001; jitter *= 10.0) {
        K.diagonal().array() += jitter - (jitter > 1e-10 ? jitter / 10.0 : 0.0);
        llt.compute(K);
        if (llt.info() == Eigen::Success) return jitter;
    }
    throw NumericError("kernel matrix ill-conditioned: Cholesky failed after jitter escalation to 1e-4");
}

} // namespace detail

struct LmlResult {
    double value = 0.0;
    Eigen::VectorXd gradient; // d value / d packed log-hyperparameters
};

/// Log marginal likelihood of a zero-mean GP with anisotropic SE kernel
/// plus noise, and its gradient with respect to the log-hyperparameters.
inline LmlResult log_marginal_likelihood(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                         const Eigen::VectorXd& packed, bool with_gradient = true,
                                         bool escalate_jitter = true) {
    const Eigen::Index n = X.rows(), d = X.cols();
    auto h = GpHyperparameters::unpack(packed);
    Eigen::MatrixXd Xs = detail::scale_columns(X, h.log_length_scales);
    Eigen::MatrixXd Kf = detail::se_kernel(Xs, Xs, h.signal_variance());
    Eigen::MatrixXd K = Kf;
    K.diagonal().array() += h.noise_variance();
    Eigen::LLT<Eigen::MatrixXd> llt;
    if (escalate_jitter) {
        detail::robust_cholesky(K, llt);
    } else {
        llt.compute(K);
        if (llt.info() != Eigen::Success) throw NumericError("kernel matrix not positive definite");
    }
    Eigen::VectorXd alpha = llt.solve(y);
    double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    LmlResult out;
    out.value = -0.5 * y.dot(alpha) - 0.5 * logdet - 0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
    if (!with_gradient) return out;

    Eigen::MatrixXd Kinv = llt.solve(Eigen::MatrixXd::Identity(n, n));
    Eigen::MatrixXd W = alpha * alpha.transpose() - Kinv; // dL/dK = W / 2
    Eigen::MatrixXd WK = W.cwiseProduct(Kf);
    out.gradient.resize(d + 2);
    out.gradient(0) = 0.5 * WK.sum();
    // dK/dlog(ell_j) = Kf .* (x_j - x'_j)^2 / ell_j^2; with WK symmetric the
    // contraction is 2 sum_a c_a^2 rowsum_a - 2 c' WK c.
    Eigen::VectorXd rowsum = WK.rowwise().sum();
    Eigen::MatrixXd WKX = WK * Xs;
    for (Eigen::Index j = 0; j < d; ++j) {
        auto c = Xs.col(j);
        out.gradient(j + 1) = c.array().square().matrix().dot(rowsum) - c.dot(WKX.col(j));
    }
    out.gradient(d + 1) = 0.5 * h.noise_variance() * W.trace();
    return out;
}

struct GpPrediction {
    double mean = 0.0;
    double variance = 0.0;
};

/// Trained Gaussian-process surrogate for one scalar output.
class GpSurrogate {
public:
    GpSurrogate() = default;

    /// Builds the posterior for fixed hyperparameters (inputs and targets
    /// already standardized).
    GpSurrogate(Eigen::MatrixXd X, Eigen::VectorXd y, GpHyperparameters hyper, InputStandardization input_map,
                AffineMap output_map, std::string name = "output")
        : X_(std::move(X)), y_(std::move(y)), hyper_(std::move(hyper)), input_map_(std::move(input_map)),
          output_map_(output_map), name_(std::move(name)) {
        if (X_.rows() != y_.size()) throw PreconditionError("GP inputs and targets differ in length");
        if (hyper_.dims() != X_.cols()) throw PreconditionError("GP length-scale count differs from input dimension");
        if (input_map_.maps.empty())
            input_map_.maps.assign(static_cast<std::size_t>(X_.cols()), AffineMap{});
        factorize();
    }

    const Eigen::MatrixXd& inputs() const { return X_; }
    const Eigen::VectorXd& targets() const { return y_; }
    const GpHyperparameters& hyperparameters() const { return hyper_; }
    const InputStandardization& input_map() const { return input_map_; }
    const AffineMap& output_map() const { return output_map_; }
    const std::string& name() const { return name_; }
    double jitter() const { return jitter_; }
    /// Noise variance plus any escalation jitter on the kernel diagonal.
    double regularization() const { return hyper_.noise_variance() + jitter_; }
    double log_marginal_likelihood() const { return lml_; }
    const Eigen::VectorXd& weights() const { return weights_; }
    const Eigen::MatrixXd& inverse_kernel() const { return Kinv_; }
    /// Lower Cholesky factor of the regularized kernel matrix.
    const Eigen::MatrixXd& factor() const { return L_; }
    Eigen::Index size() const { return X_.rows(); }
    Eigen::Index dims() const { return X_.cols(); }

    /// Prediction in standardized input/output units.
    GpPrediction predict_standardized(const Eigen::Ref<const Eigen::VectorXd>& s) const {
        Eigen::VectorXd k = kernel_column(s);
        GpPrediction p;
        p.mean = k.dot(weights_);
        Eigen::VectorXd v = L_.triangularView<Eigen::Lower>().solve(k);
        p.variance = std::max(0.0, hyper_.signal_variance() - v.squaredNorm());
        return p;
    }

    double predict_mean_standardized(const Eigen::Ref<const Eigen::VectorXd>& s) const {
        return kernel_column(s).dot(weights_);
    }

    /// Mean and latent variance at a raw-unit input, destandardized.
    GpPrediction predict(const Eigen::Ref<const Eigen::VectorXd>& raw) const {
        if (raw.size() != dims()) throw PreconditionError("GP input has wrong dimension");
        if (!raw.allFinite()) throw PreconditionError("GP input must be finite");
        auto p = predict_standardized(input_map_.forward(raw));
        return {output_map_.inverse(p.mean), p.variance * output_map_.scale * output_map_.scale};
    }

    double predict_mean(const Eigen::Ref<const Eigen::VectorXd>& raw) const {
        return output_map_.inverse(predict_mean_standardized(input_map_.forward(raw)));
    }

private:
    Eigen::VectorXd kernel_column(const Eigen::Ref<const Eigen::VectorXd>& s) const {
        Eigen::RowVectorXd xs = (s.array() * inv_ell_.array()).matrix().transpose();
        Eigen::VectorXd d2 = (Xs_.rowwise() - xs).rowwise().squaredNorm();
        return hyper_.signal_variance() *
               (-0.5 * d2.array()).unaryExpr([](double e) { return e < -700.0 ? 0.0 : std::exp(e); }).matrix();
    }

    void factorize() {
        inv_ell_ = (-hyper_.log_length_scales.array()).exp();
        Xs_ = X_ * inv_ell_.asDiagonal();
        Eigen::MatrixXd K = detail::se_kernel(Xs_, Xs_, hyper_.signal_variance());
        K.diagonal().array() += hyper_.noise_variance();
        Eigen::LLT<Eigen::MatrixXd> llt;
        jitter_ = detail::robust_cholesky(K, llt);
        weights_ = llt.solve(y_);
        L_ = llt.matrixL();
        Kinv_ = llt.solve(Eigen::MatrixXd::Identity(X_.rows(), X_.rows()));
        double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
        lml_ = -0.5 * y_.dot(weights_) - 0.5 * logdet -
               0.5 * static_cast<double>(X_.rows()) * std::log(2.0 * std::numbers::pi);
    }

    Eigen::MatrixXd X_;
    Eigen::VectorXd y_;
    GpHyperparameters hyper_;
    InputStandardization input_map_;
    AffineMap output_map_;
    std::string name_;

    Eigen::VectorXd inv_ell_;
    Eigen::MatrixXd Xs_;
    Eigen::VectorXd weights_;
    Eigen::MatrixXd L_;
    Eigen::MatrixXd Kinv_;
    double jitter_ = 0.0;
    double lml_ = 0.0;
};

namespace detail {

struct AscentResult {
    Eigen::VectorXd params;
    double value = -std::numeric_limits<double>::infinity();
};

/// Bound-constrained ascent: limited-memory BFGS directions on the free
/// variables, projection onto the box, Armijo backtracking.
inline AscentResult maximize_lml(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, Eigen::VectorXd p,
                                 const Eigen::VectorXd& lo, const Eigen::VectorXd& hi, const GpOptions& opt) {
    constexpr std::size_t kMemory = 10;
    const Eigen::Index n = p.size();
    auto project = [&](const Eigen::VectorXd& v) { return v.cwiseMax(lo).cwiseMin(hi).eval(); };
    // minimise -LML
    auto eval = [&](const Eigen::VectorXd& q, bool grad) {
        try {
            auto r = log_marginal_likelihood(X, y, q, grad, false);
            r.value = -r.value;
            if (grad) r.gradient = -r.gradient;
            return r;
        } catch (const NumericError&) {
            LmlResult bad;
            bad.value = std::numeric_limits<double>::infinity();
            return bad;
        }
    };
    p = project(p);
    LmlResult cur = eval(p, true);
    if (!std::isfinite(cur.value)) return {p, -cur.value};
    std::vector<Eigen::VectorXd> S, Y;
    int stalled = 0;
    for (int it = 0; it < opt.max_iterations; ++it) {
        const Eigen::VectorXd& g = cur.gradient;
        if ((project(p - g) - p).cwiseAbs().maxCoeff() < opt.gradient_tolerance) break;
        Eigen::VectorXd free = Eigen::VectorXd::Ones(n);
        for (Eigen::Index i = 0; i < n; ++i)
            if ((p(i) <= lo(i) && g(i) > 0.0) || (p(i) >= hi(i) && g(i) < 0.0)) free(i) = 0.0;

        // two-loop recursion restricted to the free coordinates
        Eigen::VectorXd q = g.cwiseProduct(free);
        std::vector<double> a(S.size());
        for (std::size_t k = S.size(); k-- > 0;) {
            a[k] = S[k].cwiseProduct(free).dot(q) / S[k].dot(Y[k]);
            q -= a[k] * Y[k].cwiseProduct(free);
        }
        double gamma = S.empty() ? 1.0 / std::max(1.0, g.cwiseAbs().maxCoeff())
                                 : S.back().dot(Y.back()) / Y.back().squaredNorm();
        Eigen::VectorXd dir = gamma * q;
        for (std::size_t k = 0; k < S.size(); ++k) {
            double b = Y[k].cwiseProduct(free).dot(dir) / S[k].dot(Y[k]);
            dir += (a[k] - b) * S[k].cwiseProduct(free);
        }
        dir = -dir.cwiseProduct(free);
        if (!(dir.dot(g) < 0.0)) {
            S.clear();
            Y.clear();
            dir = -g.cwiseProduct(free) / std::max(1.0, g.cwiseAbs().maxCoeff());
        }

        // at most two e-folds per coordinate per step
        if (double m = dir.cwiseAbs().maxCoeff(); m > 2.0) dir *= 2.0 / m;
        auto line_search = [&](const Eigen::VectorXd& direction, Eigen::VectorXd& next, LmlResult& trial) {
            double t = 1.0;
            for (int bt = 0; bt < 20; ++bt, t *= 0.5) {
                next = project(p + t * direction);
                trial = eval(next, false);
                if (std::isfinite(trial.value) && trial.value <= cur.value + 1e-4 * g.dot(next - p)) return true;
            }
            return false;
        };
        Eigen::VectorXd next;
        LmlResult trial;
        if (!line_search(dir, next, trial)) {
            if (S.empty()) break;
            // quasi-Newton direction bent by the bounds: restart from steepest descent
            S.clear();
            Y.clear();
            dir = -g.cwiseProduct(free) / std::max(1.0, g.cwiseAbs().maxCoeff());
            if (!line_search(dir, next, trial)) break;
        }
        trial = eval(next, true);
        if (!std::isfinite(trial.value)) break;
        Eigen::VectorXd s = next - p, yv = trial.gradient - g;
        double decrease = cur.value - trial.value;
        p = next;
        cur = trial;
        if (s.dot(yv) > 1e-10 * s.norm() * yv.norm()) {
            S.push_back(s);
            Y.push_back(yv);
            if (S.size() > kMemory) {
                S.erase(S.begin());
                Y.erase(Y.begin());
            }
        }
        stalled = decrease < opt.function_tolerance * (1.0 + std::abs(cur.value)) ? stalled + 1 : 0;
        if (stalled >= 3) break;
    }
    return {p, -cur.value};
}

inline void check_distinct_rows(const Eigen::MatrixXd& X) {
    for (Eigen::Index i = 0; i < X.rows(); ++i)
        for (Eigen::Index j = 0; j < i; ++j)
            if (X.row(i) == X.row(j))
                throw PreconditionError("duplicate training input rows " + std::to_string(j) + " and " +
                                        std::to_string(i));
}

} // namespace detail

/// Fits hyperparameters by multi-start maximisation of the log marginal
/// likelihood. Inputs and targets must already be standardized.
inline GpSurrogate fit_gp(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const InputStandardization& input_map,
                          const AffineMap& output_map, RandomStream stream, const GpOptions& opt = {},
                          std::string name = "output") {
    if (X.rows() < 3) throw PreconditionError("fit_gp needs at least 3 training points");
    if (X.rows() != y.size()) throw PreconditionError("fit_gp inputs and targets differ in length");
    if (!X.allFinite() || !y.allFinite()) throw PreconditionError("fit_gp needs finite data");
    detail::check_distinct_rows(X);
    const Eigen::Index d = X.cols();
    Eigen::VectorXd lo = opt.bounds.lower(d), hi = opt.bounds.upper(d);

    auto starts = latin_hypercube(static_cast<std::size_t>(opt.starts), static_cast<std::size_t>(d + 2), stream);
    std::vector<detail::AscentResult> results(static_cast<std::size_t>(opt.starts));
    parallel_for(results.size(), opt.threads, [&](std::size_t s) {
        Eigen::VectorXd p0 = (2.0 * starts.values.row(static_cast<Eigen::Index>(s)).transpose().array() - 1.0) *
                             opt.start_box;
        results[s] = detail::maximize_lml(X, y, p0, lo, hi, opt);
    });

    std::size_t best = results.size();
    for (std::size_t s = 0; s < results.size(); ++s) {
        if (!std::isfinite(results[s].value)) continue;
        if (best == results.size()) {
            best = s;
            continue;
        }
        double a = results[s].value, b = results[best].value;
        double tol = 1e-9 * (1.0 + std::abs(b));
        const auto& ps = results[s].params;
        const auto& pb = results[best].params;
        if (a > b + tol || (std::abs(a - b) <= tol && ps(ps.size() - 1) < pb(pb.size() - 1))) best = s;
    }
    if (best == results.size()) throw NumericError("all GP hyperparameter starts failed");
    return GpSurrogate(X, y, GpHyperparameters::unpack(results[best].params), input_map, output_map, std::move(name));
}

/// Fits the surrogate of one output of a training set.
inline GpSurrogate fit_gp(const TrainingSet& ts, Output which, RandomStream stream, GpOptions opt = {}) {
    if (ts.size() < 10) throw PreconditionError("fit_gp needs at least 10 training rows");
    return fit_gp(ts.standardized_inputs(), ts.standardized_outputs(which), ts.input_map,
                  ts.output_maps[static_cast<std::size_t>(which)], stream, opt, output_name(which));
}

/// Predictivity coefficient 1 - SS(residual) / SS(total).
inline double q2_score(const Eigen::Ref<const Eigen::VectorXd>& targets,
                       const Eigen::Ref<const Eigen::VectorXd>& predictions) {
    double mean = targets.mean();
    double total = (targets.array() - mean).square().sum();
    if (!(total > 0.0)) throw PreconditionError("Q2 undefined: targets have zero variance");
    return 1.0 - (targets - predictions).squaredNorm() / total;
}

struct LooResult {
    double q2 = 0.0;
    Eigen::VectorXd predictions; // output units
    Eigen::VectorXd targets;     // output units
    Eigen::VectorXd residuals;   // targets - predictions
};

/// Leave-one-out cross validation with frozen hyperparameters, using the
/// closed form mu_{-i} = y_i - [K^-1 y]_i / [K^-1]_ii.
inline LooResult loocv_q2(const GpSurrogate& gp) {
    if (gp.size() < 3) throw PreconditionError("LOOCV needs at least 3 points");
    const auto& y = gp.targets();
    Eigen::VectorXd resid_std = gp.weights().array() / gp.inverse_kernel().diagonal().array();
    LooResult r;
    const auto& m = gp.output_map();
    r.targets = y.unaryExpr([&](double v) { return m.inverse(v); });
    r.predictions = (y - resid_std).unaryExpr([&](double v) { return m.inverse(v); });
    r.residuals = r.targets - r.predictions;
    r.q2 = q2_score(y, y - resid_std);
    return r;
}

// ---------------------------------------------------------------------------
// JSON persistence, gp_format = 1

inline nlohmann::json gp_to_json(const GpSurrogate& gp) {
    nlohmann::json j;
    j["gp_format"] = 1;
    j["output"] = gp.name();
    const auto& h = gp.hyperparameters();
    j["hyperparameters"] = {{"log_signal_variance", h.log_signal_variance},
                            {"log_length_scales", std::vector<double>(h.log_length_scales.data(),
                                                                      h.log_length_scales.data() + h.dims())},
                            {"log_noise_variance", h.log_noise_variance}};
    j["jitter"] = gp.jitter();
    j["log_marginal_likelihood"] = gp.log_marginal_likelihood();
    nlohmann::json maps = nlohmann::json::array();
    for (const auto& m : gp.input_map().maps) maps.push_back({{"offset", m.offset}, {"scale", m.scale}});
    j["input_maps"] = maps;
    j["output_map"] = {{"offset", gp.output_map().offset}, {"scale", gp.output_map().scale}};
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < gp.size(); ++i) {
        Eigen::VectorXd r = gp.inputs().row(i).transpose();
        rows.push_back(std::vector<double>(r.data(), r.data() + r.size()));
    }
    j["inputs"] = rows;
    j["targets"] = std::vector<double>(gp.targets().data(), gp.targets().data() + gp.size());
    return j;
}

inline GpSurrogate gp_from_json(const nlohmann::json& j) {
    try {
        if (j.at("gp_format").get<int>() != 1) throw ParseError("unsupported gp_format");
        GpHyperparameters h;
        const auto& hj = j.at("hyperparameters");
        h.log_signal_variance = hj.at("log_signal_variance");
        auto ell = hj.at("log_length_scales").get<std::vector<double>>();
        h.log_length_scales = Eigen::Map<Eigen::VectorXd>(ell.data(), static_cast<Eigen::Index>(ell.size()));
        h.log_noise_variance = hj.at("log_noise_variance");
        InputStandardization im;
        for (const auto& m : j.at("input_maps")) im.maps.push_back({m.at("offset"), m.at("scale")});
        AffineMap om{j.at("output_map").at("offset"), j.at("output_map").at("scale")};
        auto rows = j.at("inputs").get<std::vector<std::vector<double>>>();
        auto targets = j.at("targets").get<std::vector<double>>();
        Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(ell.size()));
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t k = 0; k < ell.size(); ++k)
                X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i].at(k);
        Eigen::VectorXd y = Eigen::Map<Eigen::VectorXd>(targets.data(), static_cast<Eigen::Index>(targets.size()));
        return GpSurrogate(X, y, h, im, om, j.at("output").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("GP document: ") + e.what());
    }
}

inline void save_gp(const GpSurrogate& gp, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path);
    os << gp_to_json(gp).dump(1) << '\n';
}

inline GpSurrogate load_gp(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    try {
        return gp_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path + ": " + e.what());
    }
}

} // namespace meltcal

#endif // MELTCAL_SURROGATE_HPP
