#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "meltcal/doe.hpp"
#include "meltcal/forward.hpp"
#include "meltcal/inference.hpp"
#include "test_support.hpp"

using namespace meltcal;

namespace {

struct Surrogates {
    GpSurrogate length, depth;
};

const Surrogates& surrogates() {
    static const Surrogates s = [] {
        auto ts = build_training_set(bundled_dataset(), default_prior(), 5, make_reduced_model(),
                                     RandomStream(20240101, 1));
        GpOptions opt;
        opt.starts = 2;
        return Surrogates{fit_gp(ts, Output::length, RandomStream(20240101, 2), opt),
                          fit_gp(ts, Output::depth, RandomStream(20240101, 3), opt)};
    }();
    return s;
}

ExperimentalDataset with_sigmas(ExperimentalDataset ds, double rel) {
    for (auto& r : ds.rows) {
        r.length_sigma = rel * r.length;
        r.depth_sigma = rel * r.depth;
    }
    return ds;
}

CalibrationParams random_theta(RandomStream& rs, const PriorSpec& prior) {
    Eigen::VectorXd u = Eigen::VectorXd::NullaryExpr(8, [&]() { return rs.uniform(); });
    return scale_unit_point(u, prior);
}

Eigen::VectorXd column(const PosteriorChain& ch, Eigen::Index j) { return ch.samples.col(j); }

std::vector<double> as_vector(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

PosteriorChain chain_from(const Eigen::MatrixXd& samples) {
    PosteriorChain ch;
    ch.samples = samples;
    ch.log_post.assign(static_cast<std::size_t>(samples.rows()), 0.0);
    ch.accepted.assign(static_cast<std::size_t>(samples.rows()), 1);
    ch.step.resize(static_cast<std::size_t>(samples.rows()));
    for (std::size_t i = 0; i < ch.step.size(); ++i) ch.step[i] = i;
    ch.total_steps = ch.step.size();
    return ch;
}

} // namespace

TEST(LogPosterior, OutsideSupportIsMinusInfinity) {
    const auto& g = surrogates();
    auto prior = default_prior();
    LogPosterior lp(bundled_dataset(), g.length, g.depth, {}, prior);
    auto th = prior.nominal();
    EXPECT_TRUE(std::isfinite(lp(th)));
    th.alpha = 0.406;
    EXPECT_EQ(lp(th), -std::numeric_limits<double>::infinity());
    th = prior.nominal();
    th.mu_l = 0.049;
    EXPECT_EQ(lp(th), -std::numeric_limits<double>::infinity());
}

TEST(LogPosterior, SingleDatumAtItsMode) {
    const auto& g = surrogates();
    auto prior = default_prior();
    auto theta0 = prior.nominal();
    auto ds = bundled_dataset();
    ExperimentalDataset one;
    one.rows = {ds.rows[3]};
    one.rows[0].length = g.length.predict_mean(joint_input(one.rows[0].design, theta0));
    const double sigma = 2.5e-5;
    one.rows[0].length_sigma = sigma;
    one.rows[0].depth_sigma = sigma;
    LikelihoodConfig cfg;
    cfg.include_code_uncertainty = false;
    cfg.outputs = OutputSelection::length;
    LogPosterior lp(one, g.length, g.depth, cfg, prior);
    EXPECT_NEAR(lp(theta0), -0.5 * std::log(sigma * sigma), 1e-9);
    RandomStream rs(41, 0);
    for (int k = 0; k < 100; ++k) {
        auto th = random_theta(rs, prior);
        double r = one.rows[0].length - g.length.predict_mean(joint_input(one.rows[0].design, th));
        if (std::abs(r) > 1e-12) {
            EXPECT_LT(lp(th), lp(theta0));
        }
    }
}

TEST(LogPosterior, QuadraticFormMatchesDenseGaussianOracle) {
    const auto& g = surrogates();
    auto prior = default_prior();
    auto ds = with_sigmas(bundled_dataset(), 0.04);
    LikelihoodConfig cfg;
    cfg.include_code_uncertainty = false;
    LogPosterior lp(ds, g.length, g.depth, cfg, prior);
    auto residuals = [&](const CalibrationParams& th) {
        Eigen::VectorXd r(26);
        Eigen::Index k = 0;
        for (const auto& row : ds.rows) {
            auto x = joint_input(row.design, th);
            r(k++) = row.length - g.length.predict_mean(x);
            r(k++) = row.depth - g.depth.predict_mean(x);
        }
        return r;
    };
    Eigen::VectorXd sig(26);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        sig(static_cast<Eigen::Index>(2 * i)) = *ds.rows[i].length_sigma;
        sig(static_cast<Eigen::Index>(2 * i + 1)) = *ds.rows[i].depth_sigma;
    }
    Eigen::MatrixXd Sigma = sig.array().square().matrix().asDiagonal();
    Eigen::LLT<Eigen::MatrixXd> llt(Sigma);
    auto dense = [&](const Eigen::VectorXd& r) {
        Eigen::VectorXd w = llt.matrixL().solve(r);
        return -0.5 * w.squaredNorm();
    };
    RandomStream rs(42, 0);
    for (int k = 0; k < 50; ++k) {
        auto t1 = random_theta(rs, prior), t2 = random_theta(rs, prior);
        double expected = dense(residuals(t1)) - dense(residuals(t2));
        EXPECT_NEAR(lp(t1) - lp(t2), expected, 1e-8 * std::max(1.0, std::abs(expected)));
    }
}

TEST(InferenceProperty, ReorderingRowsLeavesPosteriorUnchanged) {
    const auto& g = surrogates();
    auto prior = default_prior();
    auto ds = bundled_dataset();
    auto shuffled = ds;
    RandomStream rs(43, 0);
    auto perm = rs.permutation(ds.size());
    for (std::size_t i = 0; i < perm.size(); ++i) shuffled.rows[i] = ds.rows[perm[i]];
    LogPosterior a(ds, g.length, g.depth, {}, prior), b(shuffled, g.length, g.depth, {}, prior);
    for (int k = 0; k < 50; ++k) {
        auto th = random_theta(rs, prior);
        EXPECT_NEAR(a(th), b(th), 1e-10 * std::abs(a(th)));
    }
}

TEST(InferenceProperty, CodeUncertaintyOnlyWidens) {
    const auto& g = surrogates();
    auto prior = default_prior();
    auto ds = bundled_dataset();
    RandomStream rs(44, 0);
    LikelihoodConfig on, off;
    off.include_code_uncertainty = false;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        ExperimentalDataset one;
        one.rows = {ds.rows[i]};
        for (auto sel : {OutputSelection::length, OutputSelection::depth}) {
            on.outputs = off.outputs = sel;
            const auto& gp = sel == OutputSelection::length ? g.length : g.depth;
            LogPosterior with(one, g.length, g.depth, on, prior), without(one, g.length, g.depth, off, prior);
            for (int k = 0; k < 20; ++k) {
                auto th = random_theta(rs, prior);
                auto p = gp.predict(joint_input(one.rows[0].design, th));
                double y = sel == OutputSelection::length ? one.rows[0].length : one.rows[0].depth;
                double s2 = std::pow(experimental_sigma(one.rows[0], sel == OutputSelection::length ? Output::length
                                                                                                      : Output::depth,
                                                        on),
                                     2);
                // strip the log-determinant part to isolate -r^2 / (2 var)
                double quad_on = with(th) + 0.5 * std::log(s2 + p.variance);
                double quad_off = without(th) + 0.5 * std::log(s2);
                EXPECT_LE(std::abs(quad_on), std::abs(quad_off) * (1 + 1e-12));
                EXPECT_NEAR(quad_off, -0.5 * (y - p.mean) * (y - p.mean) / s2, 1e-9 * std::max(1.0, std::abs(quad_off)));
            }
        }
    }
}

TEST(Likelihood, NoiseRuleAndValidation) {
    ExperimentRow row;
    row.length = 6e-4;
    row.depth = 1e-4;
    LikelihoodConfig cfg;
    EXPECT_DOUBLE_EQ(experimental_sigma(row, Output::length, cfg), 0.05 * 6e-4);
    cfg.absolute_floor = 1e-4;
    EXPECT_DOUBLE_EQ(experimental_sigma(row, Output::depth, cfg), 1e-4);
    row.depth_sigma = 3e-6;
    EXPECT_DOUBLE_EQ(experimental_sigma(row, Output::depth, cfg), 3e-6);
    cfg.use_dataset_sigmas = false;
    EXPECT_DOUBLE_EQ(experimental_sigma(row, Output::depth, cfg), 1e-4);
    LikelihoodConfig bad;
    bad.relative_noise = 0.0;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = {};
    bad.relative_noise = 0.6;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = {};
    bad.absolute_floor = 0.0;
    EXPECT_THROW(bad.validate(), ConfigError);
    EXPECT_EQ(parse_selection("depth"), OutputSelection::depth);
    EXPECT_THROW(parse_selection("width"), ConfigError);
}

// ---------------------------------------------------------------------------
// sampler

TEST(Metropolis, StandardNormal) {
    LogDensity target = [](const Eigen::Ref<const Eigen::VectorXd>& x) { return -0.5 * x(0) * x(0); };
    auto ch = adaptive_metropolis(target, Eigen::VectorXd::Zero(1), Eigen::VectorXd::Constant(1, 6.0), {},
                                  RandomStream(51, 5));
    ASSERT_EQ(ch.size(), 50000u);
    auto kept = burn_thin(ch, 1000, 1);
    auto v = as_vector(column(kept, 0));
    double n = static_cast<double>(v.size());
    double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= n - 1.0;
    double ess = effective_sample_size(v);
    EXPECT_LT(std::abs(mean), 3.0 * std::sqrt(var / ess));
    EXPECT_NEAR(var, 1.0, 0.1);
}

TEST(Metropolis, UniformBoxKolmogorovSmirnov) {
    const Eigen::Index d = 3;
    Eigen::VectorXd lo(d), hi(d);
    lo << 0.0, -5.0, 100.0;
    hi << 1.0, 5.0, 101.0;
    LogDensity target = [&](const Eigen::Ref<const Eigen::VectorXd>& x) {
        for (Eigen::Index j = 0; j < d; ++j)
            if (x(j) < lo(j) || x(j) > hi(j)) return -std::numeric_limits<double>::infinity();
        return 0.0;
    };
    auto ch = adaptive_metropolis(target, 0.5 * (lo + hi), hi - lo, {}, RandomStream(52, 5));
    auto kept = burn_thin(ch, 10000, 40);
    const double n = static_cast<double>(kept.size());
    const double critical = 1.628 / std::sqrt(n); // 1% level
    for (Eigen::Index j = 0; j < d; ++j) {
        auto v = as_vector(column(kept, j));
        std::sort(v.begin(), v.end());
        double ks = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) {
            double f = (v[i] - lo(j)) / (hi(j) - lo(j));
            ks = std::max({ks, std::abs(f - i / n), std::abs(f - (i + 1) / n)});
        }
        EXPECT_LT(ks, critical) << "dimension " << j;
    }
    for (Eigen::Index i = 0; i < ch.samples.rows(); ++i)
        for (Eigen::Index j = 0; j < d; ++j) ASSERT_TRUE(ch.samples(i, j) >= lo(j) && ch.samples(i, j) <= hi(j));
}

TEST(Metropolis, CorrelatedGaussianAcceptance) {
    const double rho = 0.8;
    LogDensity target = [&](const Eigen::Ref<const Eigen::VectorXd>& x) {
        return -0.5 * (x(0) * x(0) - 2 * rho * x(0) * x(1) + x(1) * x(1)) / (1 - rho * rho);
    };
    auto ch = adaptive_metropolis(target, Eigen::VectorXd::Zero(2), Eigen::VectorXd::Constant(2, 8.0), {},
                                  RandomStream(53, 5));
    EXPECT_GE(ch.post_adapt_acceptance(), 0.1);
    EXPECT_LE(ch.post_adapt_acceptance(), 0.5);
    EXPECT_LE(ch.accept_count, ch.total_steps);
    EXPECT_EQ(ch.size(), ch.total_steps);
}

TEST(InferenceProperty, DetailedBalanceOnThreeStates) {
    const double w[3] = {0.2, 0.3, 0.5};
    LogDensity target = [&](const Eigen::Ref<const Eigen::VectorXd>& x) {
        if (x(0) < 0.0 || x(0) >= 3.0) return -std::numeric_limits<double>::infinity();
        return std::log(w[static_cast<int>(x(0))]);
    };
    MetropolisOptions opt;
    opt.steps = 200000;
    auto ch = adaptive_metropolis(target, Eigen::VectorXd::Constant(1, 1.5), Eigen::VectorXd::Constant(1, 3.0), opt,
                                  RandomStream(54, 5));
    double counts[3][3] = {};
    double visits[3] = {};
    for (std::size_t t = opt.adapt_start + 1; t < ch.size(); ++t) {
        int a = static_cast<int>(ch.samples(static_cast<Eigen::Index>(t - 1), 0));
        int b = static_cast<int>(ch.samples(static_cast<Eigen::Index>(t), 0));
        counts[a][b] += 1.0;
        visits[b] += 1.0;
    }
    double total = visits[0] + visits[1] + visits[2];
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(visits[i] / total, w[i], 0.03);
    for (int i = 0; i < 3; ++i)
        for (int j = i + 1; j < 3; ++j) {
            double a = counts[i][j], b = counts[j][i];
            EXPECT_GT(a + b, 1000.0);
            EXPECT_LT(std::abs(a - b), 5.0 * std::sqrt(a + b)) << i << "<->" << j;
        }
}

TEST(Metropolis, Preconditions) {
    LogDensity flat = [](const Eigen::Ref<const Eigen::VectorXd>&) { return 0.0; };
    LogDensity nowhere = [](const Eigen::Ref<const Eigen::VectorXd>&) { return -std::numeric_limits<double>::infinity(); };
    Eigen::VectorXd x0 = Eigen::VectorXd::Zero(2), r = Eigen::VectorXd::Ones(2);
    EXPECT_THROW(adaptive_metropolis(nowhere, x0, r, {}, RandomStream(1, 5)), PreconditionError);
    MetropolisOptions o;
    o.adapt_start = 50;
    EXPECT_THROW(adaptive_metropolis(flat, x0, r, o, RandomStream(1, 5)), PreconditionError);
    o = {};
    o.steps = 1000;
    EXPECT_THROW(adaptive_metropolis(flat, x0, r, o, RandomStream(1, 5)), PreconditionError);
}

TEST(Metropolis, PosteriorChainInvariants) {
    const auto& g = surrogates();
    auto prior = default_prior();
    LogPosterior lp(bundled_dataset(), g.length, g.depth, {}, prior);
    MetropolisOptions opt;
    opt.steps = 5000;
    auto ch = adaptive_metropolis(lp, prior.nominal(), prior, opt, RandomStream(55, 5));
    EXPECT_EQ(ch.size(), opt.steps);
    EXPECT_EQ(ch.log_post.size(), opt.steps);
    EXPECT_LE(ch.accept_count, opt.steps);
    EXPECT_EQ(ch.names.size(), 8u);
    for (Eigen::Index i = 0; i < ch.samples.rows(); ++i)
        ASSERT_TRUE(in_support(CalibrationParams::from_vector(ch.samples.row(i).transpose()), prior));
    for (std::size_t i = 0; i < ch.size(); i += 97)
        EXPECT_DOUBLE_EQ(ch.log_post[i], lp(CalibrationParams::from_vector(ch.samples.row(static_cast<Eigen::Index>(i)).transpose())));
}

TEST(InferenceProperty, ChainsIndependentOfThreadCount) {
    test::TempDir dir("chains");
    const auto& g = surrogates();
    auto prior = default_prior();
    LogPosterior lp(bundled_dataset(), g.length, g.depth, {}, prior);
    MetropolisOptions opt;
    opt.steps = 3000;
    std::vector<CalibrationParams> inits(3, prior.nominal());
    auto a = run_chains(lp, inits, prior, opt, RandomStream(56, 5), 1);
    auto b = run_chains(lp, inits, prior, opt, RandomStream(56, 5), 3);
    for (std::size_t c = 0; c < 3; ++c) {
        save_chain(a[c], dir / "a.csv", dir / "a.json");
        save_chain(b[c], dir / "b.csv", dir / "b.json");
        EXPECT_EQ(test::slurp(dir / "a.csv"), test::slurp(dir / "b.csv"));
        EXPECT_EQ(test::slurp(dir / "a.json"), test::slurp(dir / "b.json"));
    }
    EXPECT_NE(a[0].samples, a[1].samples);
    auto r = potential_scale_reduction({burn_thin(a[0], 1000, 1), burn_thin(a[1], 1000, 1), burn_thin(a[2], 1000, 1)});
    EXPECT_EQ(r.size(), 8u);
    for (double v : r) EXPECT_TRUE(std::isfinite(v) && v > 0.9);
}

TEST(Chain, PersistenceRoundTrip) {
    test::TempDir dir("chain");
    LogDensity target = [](const Eigen::Ref<const Eigen::VectorXd>& x) { return -0.5 * x.squaredNorm(); };
    MetropolisOptions opt;
    opt.steps = 2000;
    auto ch = adaptive_metropolis(target, Eigen::VectorXd::Zero(8), Eigen::VectorXd::Constant(8, 4.0), opt,
                                  RandomStream(57, 5));
    ch.names.assign(CalibrationParams::names.begin(), CalibrationParams::names.end());
    save_chain(ch, dir / "c.csv", dir / "c.json");
    auto header = test::slurp(dir / "c.csv").substr(0, 70);
    EXPECT_EQ(header.rfind("step,alpha,A_h,epsilon,c_l,k_l,L,mu_l,gamma_T,log_post,accepted\n", 0), 0u);
    auto back = load_chain(dir / "c.csv", dir / "c.json");
    EXPECT_EQ(back.samples, ch.samples);
    EXPECT_EQ(back.log_post, ch.log_post);
    EXPECT_EQ(back.accepted, ch.accepted);
    EXPECT_EQ(back.accept_count, ch.accept_count);
    EXPECT_EQ(back.adapt_start, ch.adapt_start);
    EXPECT_EQ(back.seed, 57u);

    auto s = summarize(burn_thin(ch, 500, 5));
    auto js = summary_to_json(s);
    auto s2 = summary_from_json(js);
    EXPECT_EQ(summary_to_json(s2).dump(), js.dump());
    for (const char* key : {"mean", "std", "ci95", "ess"}) EXPECT_TRUE(js["parameters"][0].contains(key)) << key;
}

// ---------------------------------------------------------------------------
// post-processing

TEST(BurnThin, Examples) {
    auto ch = chain_from(Eigen::MatrixXd::NullaryExpr(50000, 1, [](Eigen::Index i) { return double(i); }));
    auto kept = burn_thin(ch, 10000, 20);
    EXPECT_EQ(kept.size(), 2000u);
    EXPECT_EQ(kept.samples(0, 0), 10000.0);
    EXPECT_EQ(kept.samples(1, 0), 10020.0);
    EXPECT_EQ(kept.burn, 10000u);
    EXPECT_EQ(kept.thin, 20u);
    auto same = burn_thin(ch, 0, 1);
    EXPECT_EQ(same.samples, ch.samples);
    auto small = chain_from(Eigen::MatrixXd::Zero(100, 2));
    EXPECT_THROW(burn_thin(small, 100, 1), PreconditionError);
    EXPECT_THROW(burn_thin(small, 0, 0), PreconditionError);
}

TEST(InferenceProperty, BurnThinLengthFormula) {
    RandomStream rs(61, 0);
    for (int k = 0; k < 500; ++k) {
        std::size_t steps = 1 + rs.below(3000), burn = rs.below(steps), thin = 1 + rs.below(60);
        auto ch = chain_from(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(steps), 1));
        EXPECT_EQ(burn_thin(ch, burn, thin).size(), (steps - burn - 1) / thin + 1);
    }
}

TEST(Acf, NormalizationAndErrors) {
    RandomStream rs(62, 0);
    std::vector<double> v(200);
    for (auto& x : v) x = rs.uniform();
    EXPECT_DOUBLE_EQ(autocorrelation(v, 10)[0], 1.0);
    EXPECT_THROW(autocorrelation(std::vector<double>(50, 2.0), 5), PreconditionError);
    EXPECT_THROW(autocorrelation(v, 0), PreconditionError);
    EXPECT_THROW(autocorrelation(v, 200), PreconditionError);
}

TEST(InferenceProperty, AcfWhiteNoiseBand) {
    RandomStream rs(63, 0);
    const std::size_t n = 10000;
    std::vector<double> v(n);
    for (auto& x : v) x = rs.normal();
    auto acf = autocorrelation(v, 50);
    int inside = 0;
    for (std::size_t k = 1; k <= 50; ++k) inside += std::abs(acf[k]) < 3.0 / std::sqrt(double(n));
    EXPECT_GE(inside, 48); // 95% of 50 lags
}

TEST(Acf, ArOneMatchesAnalytic) {
    RandomStream rs(64, 0);
    std::vector<double> v(100000);
    double x = 0.0;
    for (auto& s : v) s = x = 0.9 * x + rs.normal();
    auto acf = autocorrelation(v, 10);
    for (int k = 0; k <= 10; ++k) EXPECT_NEAR(acf[static_cast<std::size_t>(k)], std::pow(0.9, k), 0.05);
    double ess = effective_sample_size(v);
    // integrated autocorrelation time of AR(1) is (1 + phi) / (1 - phi) = 19
    EXPECT_NEAR(100000.0 / ess, 19.0, 4.0);
}

TEST(Summary, ConstantChain) {
    auto ch = chain_from(Eigen::MatrixXd::Constant(100, 2, 0.3));
    auto s = summarize(ch);
    for (const auto& p : s.params) {
        EXPECT_EQ(p.sd, 0.0);
        EXPECT_EQ(p.ci_lower, 0.3);
        EXPECT_EQ(p.ci_upper, 0.3);
        EXPECT_GT(p.ess, 0.0);
        EXPECT_LE(p.ess, 100.0);
    }
    EXPECT_THROW(summarize(chain_from(Eigen::MatrixXd::Zero(49, 2))), PreconditionError);
}

TEST(Summary, IidUniformQuantiles) {
    RandomStream rs(65, 0);
    auto ch = chain_from(Eigen::MatrixXd::NullaryExpr(2000, 2, [&]() { return rs.uniform(); }));
    auto s = summarize(ch);
    for (const auto& p : s.params) {
        EXPECT_NEAR(p.mean, 0.5, 0.02);
        EXPECT_NEAR(p.ci_lower, 0.025, 0.03);
        EXPECT_NEAR(p.ci_upper, 0.975, 0.03);
        EXPECT_LT(p.ci_lower, p.ci_upper);
        EXPECT_GT(p.ess, 0.0);
        EXPECT_LE(p.ess, 2000.0);
    }
    EXPECT_NEAR(s.correlation(0, 1), 0.0, 0.1);
    EXPECT_EQ(s.correlation(0, 0), 1.0);
}

TEST(Summary, QuantileInterpolation) {
    std::vector<double> v = {1, 2, 3, 4, 5};
    EXPECT_DOUBLE_EQ(quantile_sorted(v, 0.0), 1.0);
    EXPECT_DOUBLE_EQ(quantile_sorted(v, 1.0), 5.0);
    EXPECT_DOUBLE_EQ(quantile_sorted(v, 0.5), 3.0);
    EXPECT_DOUBLE_EQ(quantile_sorted(v, 0.1), 1.4);
}
