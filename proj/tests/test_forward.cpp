#include <gtest/gtest.h>

#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>

#include "meltcal/doe.hpp"
#include "meltcal/forward.hpp"
#include "oracles/fd_conduction.hpp"
#include "test_support.hpp"

using namespace meltcal;

namespace {

const PhysicalConstants kConst;
const ReducedModelConfig kCfg;

CalibrationParams nominal() { return default_prior().nominal(); }

DesignVars condition(int i) { return bundled_dataset().rows[static_cast<std::size_t>(i - 1)].design; }

oracle::FdResult fd_at(const DesignVars& d, const CalibrationParams& th) {
    oracle::FdInputs in{d.power, d.beam_radius, d.pulse_duration, th.alpha, th.a_h, th.emissivity,
                        th.c_l,   th.k_l,        th.latent_heat,   th.mu_l,  th.gamma_t};
    return oracle::solve_fd(in);
}

double rise(const DesignVars& d, const CalibrationParams& th, const ReducedModelConfig& cfg, double r, double z,
            double t) {
    return temperature_rise(d, th, kConst, cfg, r, z, t) - kConst.ambient;
}

} // namespace

TEST(Temperature, AmbientAtTimeZero) {
    EXPECT_EQ(temperature_rise(condition(1), nominal(), kConst, kCfg, 0.0, 0.0, 0.0), kConst.ambient);
    EXPECT_EQ(temperature_rise(condition(9), nominal(), kConst, kCfg, 1e-4, 2e-5, 0.0), kConst.ambient);
}

TEST(Temperature, FarFieldDecays) {
    for (int c : {1, 5, 9, 13}) {
        auto d = condition(c);
        for (double f : {0.1, 0.5, 1.0, 2.0, 5.0, 10.0})
            EXPECT_NEAR(temperature_rise(d, nominal(), kConst, kCfg, 0.0, 1.0, f * d.pulse_duration), kConst.ambient, 1e-9);
    }
}

TEST(Temperature, NegativeCoordinatesRejected) {
    EXPECT_THROW(temperature_rise(condition(1), nominal(), kConst, kCfg, -1e-6, 0.0, 1e-3), PreconditionError);
}

TEST(Temperature, NonFiniteNamesQuadratureNode) {
    auto th = nominal();
    th.k_l = std::numeric_limits<double>::quiet_NaN();
    try {
        temperature_rise(condition(1), th, kConst, kCfg, 0.0, 0.0, 1e-3);
        FAIL() << "expected a numeric error";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("node"), std::string::npos) << e.what();
    }
}

TEST(Temperature, CenterMatchesFiniteDifferenceOracle) {
    auto d = condition(1);
    auto fd = fd_at(d, nominal());
    double model = rise(d, nominal(), kCfg, 0.0, 0.0, d.pulse_duration);
    double oracle_rise = fd.surface_center_at_pulse_end - kConst.ambient;
    EXPECT_NEAR(model / oracle_rise, 1.0, 0.02);
}

TEST(ReducedModel, MatchesFiniteDifferenceOracle) {
    for (int c : {1, 5}) {
        auto d = condition(c);
        auto m = evaluate_reduced(d, nominal(), kConst, kCfg);
        auto fd = fd_at(d, nominal());
        ASSERT_TRUE(m.melted);
        EXPECT_NEAR(m.length / fd.length, 1.0, 0.05) << "condition " << c;
        EXPECT_NEAR(m.depth / fd.depth, 1.0, 0.05) << "condition " << c;
    }
}

TEST(ReducedModel, VanishingPowerDoesNotMelt) {
    auto d = condition(1);
    d.power = 1e-6;
    auto m = evaluate_reduced(d, nominal(), kConst, kCfg);
    EXPECT_FALSE(m.melted);
    EXPECT_EQ(m.length, 0.0);
    EXPECT_EQ(m.depth, 0.0);
}

TEST(ReducedModel, AlphaMonotonicityProbe) {
    for (int c = 1; c <= 13; ++c) {
        auto lo = nominal(), hi = nominal();
        lo.alpha = 0.135;
        hi.alpha = 0.405;
        auto a = evaluate_reduced(condition(c), lo, kConst, kCfg);
        auto b = evaluate_reduced(condition(c), hi, kConst, kCfg);
        ASSERT_TRUE(b.melted);
        EXPECT_GT(b.length, a.length) << "condition " << c;
        EXPECT_GT(b.depth, a.depth) << "condition " << c;
    }
}

TEST(ReducedModel, MeltedSizesPositiveAndFast) {
    auto t0 = std::chrono::steady_clock::now();
    for (int c = 1; c <= 13; ++c) {
        auto m = evaluate_reduced(condition(c), nominal(), kConst, kCfg);
        ASSERT_TRUE(m.melted);
        EXPECT_GT(m.length, 0.0);
        EXPECT_GT(m.depth, 0.0);
        EXPECT_TRUE(std::isfinite(m.length) && std::isfinite(m.depth));
    }
    double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() / 13.0;
    EXPECT_LT(ms, 50.0);
}

TEST(ReducedModel, ConfigValidation) {
    ReducedModelConfig c;
    c.quadrature_points = 8;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.tolerance = 1e-3;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.marangoni_ref = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.marangoni_chi = -0.1;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ForwardProperty, ConductionCoreIsLinearInAbsorbedPower) {
    ReducedModelConfig cfg;
    cfg.loss_correction = false;
    RandomStream rs(9, 0);
    for (int k = 0; k < 40; ++k) {
        auto d = condition(1 + static_cast<int>(rs.below(13)));
        auto th = nominal();
        th.alpha = rs.uniform(0.135, 0.405);
        double r = rs.uniform(0.0, 3.0 * d.beam_radius), z = rs.uniform(0.0, 2.0 * d.beam_radius);
        double t = rs.uniform(0.01, 2.0) * d.pulse_duration;
        double base = rise(d, th, cfg, r, z, t);
        auto th2 = th;
        th2.alpha *= 2.0;
        EXPECT_NEAR(rise(d, th2, cfg, r, z, t), 2.0 * base, 1e-11 * std::abs(base) + 1e-12);
        auto d2 = d;
        d2.power *= 2.0;
        EXPECT_NEAR(rise(d2, th, cfg, r, z, t), 2.0 * base, 1e-11 * std::abs(base) + 1e-12);
    }
}

TEST(ForwardProperty, TemperatureNonIncreasingInRadiusAndDepth) {
    for (int c : {1, 5, 9, 13}) {
        auto d = condition(c);
        for (double tf : {0.25, 1.0, 1.7}) {
            double t = tf * d.pulse_duration;
            double prev_r = std::numeric_limits<double>::infinity(), prev_z = prev_r;
            for (int i = 0; i <= 60; ++i) {
                double x = i * d.beam_radius / 15.0;
                double tr = temperature_rise(d, nominal(), kConst, kCfg, x, 0.0, t);
                double tz = temperature_rise(d, nominal(), kConst, kCfg, 0.0, x, t);
                EXPECT_LE(tr, prev_r * (1.0 + 1e-12));
                EXPECT_LE(tz, prev_z * (1.0 + 1e-12));
                prev_r = tr;
                prev_z = tz;
            }
        }
    }
}

TEST(ForwardProperty, DimsNonDecreasingInPowerAndAlpha) {
    for (int c : {1, 5, 8, 12}) {
        auto d0 = condition(c);
        MeltPoolSize prev;
        for (int i = 0; i <= 12; ++i) {
            auto d = d0;
            d.power = d0.power * (0.6 + 0.1 * i);
            auto m = evaluate_reduced(d, nominal(), kConst, kCfg);
            EXPECT_GE(m.length, prev.length - 1e-12);
            EXPECT_GE(m.depth, prev.depth - 1e-12);
            prev = m;
        }
        prev = {};
        for (int i = 0; i <= 12; ++i) {
            auto th = nominal();
            th.alpha = 0.135 + i * (0.405 - 0.135) / 12.0;
            auto m = evaluate_reduced(d0, th, kConst, kCfg);
            EXPECT_GE(m.length, prev.length - 1e-12);
            EXPECT_GE(m.depth, prev.depth - 1e-12);
            prev = m;
        }
    }
}

TEST(ForwardProperty, EnhancementMonotoneInGammaAndViscosity) {
    auto d = condition(1);
    double prev = 0.0;
    for (int i = 0; i <= 10; ++i) {
        auto th = nominal();
        th.gamma_t = -(3.87e-4 + i * 0.86e-5);
        double k = effective_conductivity(d, th, kConst, kCfg);
        EXPECT_GT(k, prev);
        prev = k;
    }
    prev = std::numeric_limits<double>::infinity();
    for (int i = 0; i <= 10; ++i) {
        auto th = nominal();
        th.mu_l = 0.05 + i * 0.015;
        double k = effective_conductivity(d, th, kConst, kCfg);
        EXPECT_LT(k, prev);
        prev = k;
    }
}

TEST(ForwardProperty, QuadratureConverged) {
    ReducedModelConfig fine = kCfg;
    fine.quadrature_points = 2 * kCfg.quadrature_points;
    for (int c = 1; c <= 13; ++c) {
        auto a = evaluate_reduced(condition(c), nominal(), kConst, kCfg);
        auto b = evaluate_reduced(condition(c), nominal(), kConst, fine);
        EXPECT_NEAR(a.length / b.length, 1.0, 0.005) << "condition " << c;
        EXPECT_NEAR(a.depth / b.depth, 1.0, 0.005) << "condition " << c;
    }
}

// ---------------------------------------------------------------------------
// external adapter

namespace {

ExternalModelSpec stub(const test::TempDir& dir, const std::string& body, double timeout = 30.0) {
    std::string script = dir / "stub.sh";
    test::spit(script, "#!/bin/sh\n" + body);
    std::filesystem::permissions(script, std::filesystem::perms::owner_all);
    return {script + " {input} {output}", dir.path().string(), timeout};
}

} // namespace

TEST(External, PassThrough) {
    test::TempDir dir("ext");
    auto spec = stub(dir, "printf 'length_mm=0.5\\ndepth_mm=0.2\\n' > \"$2\"\n");
    auto m = evaluate_external(spec, condition(1), nominal());
    EXPECT_TRUE(m.melted);
    EXPECT_DOUBLE_EQ(m.length, 5e-4);
    EXPECT_DOUBLE_EQ(m.depth, 2e-4);
    // temporaries removed on success
    EXPECT_EQ(std::distance(std::filesystem::directory_iterator(dir.path()), {}), 1);
}

TEST(External, InputFileCarriesAllKeys) {
    test::TempDir dir("ext");
    auto spec = stub(dir, "cp \"$1\" " + (dir / "seen.txt") + "\nprintf 'length_mm=0.5\\ndepth_mm=0.2\\n' > \"$2\"\n");
    evaluate_external(spec, condition(1), nominal());
    auto text = test::slurp(dir / "seen.txt");
    for (const char* key : {"power_W=530", "beam_radius_mm=0.159", "pulse_ms=4", "alpha=0.27", "A_h=100", "epsilon=0.59",
                            "c_l=837.4", "k_l=209.3", "L=250000", "mu_l=0.1", "gamma_T=-0.00043"})
        EXPECT_NE(text.find(key), std::string::npos) << key << " in\n" << text;
}

TEST(External, NonzeroExitCarriesStatusAndOutput) {
    test::TempDir dir("ext");
    auto spec = stub(dir, "echo solver diverged\nexit 3\n");
    try {
        evaluate_external(spec, condition(1), nominal());
        FAIL() << "expected an adapter error";
    } catch (const AdapterError& e) {
        EXPECT_NE(std::string(e.what()).find("status 3"), std::string::npos) << e.what();
        EXPECT_NE(e.captured_output.find("solver diverged"), std::string::npos);
    }
}

TEST(External, MalformedValueNamesKey) {
    test::TempDir dir("ext");
    auto spec = stub(dir, "printf 'length_mm=abc\\ndepth_mm=0.2\\n' > \"$2\"\n");
    try {
        evaluate_external(spec, condition(1), nominal());
        FAIL() << "expected an adapter error";
    } catch (const AdapterError& e) {
        EXPECT_NE(std::string(e.what()).find("length_mm"), std::string::npos) << e.what();
        EXPECT_NE(std::string(e.what()).find("parse"), std::string::npos) << e.what();
    }
}

TEST(External, TimeoutAndMissingOutput) {
    test::TempDir dir("ext");
    auto slow = stub(dir, "sleep 5\n", 0.3);
    auto t0 = std::chrono::steady_clock::now();
    EXPECT_THROW(evaluate_external(slow, condition(1), nominal()), AdapterError);
    EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 4.0);
    auto silent = stub(dir, "exit 0\n");
    EXPECT_THROW(evaluate_external(silent, condition(1), nominal()), AdapterError);
}

TEST(External, TemplateNeedsBothPlaceholdersOnce) {
    ExternalModelSpec s{"run {input}", ".", 10.0};
    EXPECT_THROW(s.validate(), ConfigError);
    s.command_template = "run {input} {output} {output}";
    EXPECT_THROW(s.validate(), ConfigError);
    s.command_template = "run {input} {output}";
    EXPECT_NO_THROW(s.validate());
    s.timeout_seconds = 0.0;
    EXPECT_THROW(s.validate(), ConfigError);
}

// ---------------------------------------------------------------------------
// run table

namespace {

struct CountingModel {
    std::shared_ptr<std::atomic<int>> calls = std::make_shared<std::atomic<int>>(0);
    ForwardModel model() const {
        auto c = calls;
        return [c](const DesignVars& d, const CalibrationParams& th) {
            ++*c;
            return evaluate_reduced(d, th, kConst, kCfg);
        };
    }
};

} // namespace

TEST(RunTable, MissThenHit) {
    test::TempDir dir("table");
    RunTable table;
    table.set_path(dir / "runs.csv");
    CountingModel counter;
    auto fb = counter.model();
    auto a = lookup_or_evaluate(table, fb, condition(2), nominal());
    EXPECT_EQ(*counter.calls, 1);
    auto b = lookup_or_evaluate(table, fb, condition(2), nominal());
    EXPECT_EQ(*counter.calls, 1);
    EXPECT_EQ(a.length, b.length);
    EXPECT_EQ(table.size(), 1u);
    // persisted copy serves a stored value without a fallback
    auto reloaded = RunTable::load(dir / "runs.csv");
    auto c = lookup_or_evaluate(reloaded, ForwardModel{}, condition(2), nominal());
    EXPECT_DOUBLE_EQ(c.length, a.length);
    EXPECT_DOUBLE_EQ(c.depth, a.depth);
    EXPECT_THROW(lookup_or_evaluate(reloaded, ForwardModel{}, condition(3), nominal()), PreconditionError);
}

TEST(RunTable, HitReturnsStoredValue) {
    RunTable table;
    MeltPoolSize stored{1.234e-3, 5.6e-4, true};
    ASSERT_TRUE(table.insert({condition(4), nominal(), stored}));
    EXPECT_FALSE(table.insert({condition(4), nominal(), stored}));
    CountingModel counter;
    auto m = lookup_or_evaluate(table, counter.model(), condition(4), nominal());
    EXPECT_EQ(*counter.calls, 0);
    EXPECT_EQ(m.length, stored.length);
    EXPECT_EQ(m.depth, stored.depth);
}

TEST(RunTable, ReplayOfTrainingDesignNeedsNoFallback) {
    test::TempDir dir("table");
    auto ds = bundled_dataset();
    auto prior = default_prior();
    CountingModel first;
    auto table = std::make_shared<RunTable>();
    table->set_path(dir / "runs.csv");
    auto ts = build_training_set(ds, prior, 10, make_table_model(table, first.model()), RandomStream(20240101, 1));
    EXPECT_EQ(ts.size(), 130);
    EXPECT_GE(*first.calls, 130);

    CountingModel second;
    auto replay = std::make_shared<RunTable>(RunTable::load(dir / "runs.csv"));
    EXPECT_GE(replay->size(), 130u);
    auto again = build_training_set(ds, prior, 10, make_table_model(replay, second.model()), RandomStream(20240101, 1));
    EXPECT_EQ(*second.calls, 0);
    EXPECT_TRUE(again.outputs.isApprox(ts.outputs, 1e-14));
}

TEST(RunTable, RejectsBadFiles) {
    test::TempDir dir("table");
    test::spit(dir / "bad.csv", "a,b\n1,2\n");
    EXPECT_THROW(RunTable::load(dir / "bad.csv"), ParseError);
}
