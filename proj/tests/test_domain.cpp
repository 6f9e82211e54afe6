#include <gtest/gtest.h>

#include <sstream>

#include "meltcal/domain.hpp"
#include "meltcal/random.hpp"
#include "test_support.hpp"

using namespace meltcal;

namespace {

const char* kHeader = "index,power_W,beam_radius_mm,pulse_ms,length_mm,depth_mm\n";

ExperimentalDataset parse(const std::string& text) {
    std::istringstream is(text);
    return parse_dataset(is, "test.csv");
}

std::string parse_error(const std::string& text) {
    try {
        parse(text);
    } catch (const ParseError& e) {
        return e.what();
    }
    return "";
}

} // namespace

TEST(Dataset, FirstRowConvertsToSi) {
    auto ds = parse(std::string(kHeader) + "1,530,0.159,4,0.625,0.190\n");
    ASSERT_EQ(ds.size(), 1u);
    const auto& r = ds.rows[0];
    EXPECT_EQ(r.index, 1);
    EXPECT_DOUBLE_EQ(r.design.power, 530.0);
    EXPECT_DOUBLE_EQ(r.design.beam_radius, 1.59e-4);
    EXPECT_DOUBLE_EQ(r.design.pulse_duration, 4e-3);
    EXPECT_DOUBLE_EQ(r.length, 6.25e-4);
    EXPECT_DOUBLE_EQ(r.depth, 1.90e-4);
    EXPECT_FALSE(r.length_sigma.has_value());
}

TEST(Dataset, LastBundledRow) {
    auto ds = bundled_dataset();
    ASSERT_EQ(ds.size(), 13u);
    const auto& r = ds.rows[12];
    EXPECT_EQ(r.index, 13);
    EXPECT_DOUBLE_EQ(r.design.power, 1967.0);
    EXPECT_DOUBLE_EQ(r.design.beam_radius, 5.70e-4);
    EXPECT_DOUBLE_EQ(r.design.pulse_duration, 3e-3);
    EXPECT_DOUBLE_EQ(r.length, 1.027e-3);
    EXPECT_DOUBLE_EQ(r.depth, 2.12e-4);
}

TEST(Dataset, BundledRowsAreValid) {
    auto ds = bundled_dataset();
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& r = ds.rows[i];
        EXPECT_EQ(r.index, static_cast<int>(i + 1));
        EXPECT_GT(r.length, r.depth);
        EXPECT_GT(r.depth, 0.0);
        EXPECT_NO_THROW(r.design.validate());
    }
}

TEST(Dataset, DataFileMatchesBundledCopy) {
    auto file = load_dataset(std::string(MELTCAL_DATA_DIR) + "/spot_welds.csv");
    auto bundled = bundled_dataset();
    ASSERT_EQ(file.size(), bundled.size());
    for (std::size_t i = 0; i < file.size(); ++i) {
        EXPECT_DOUBLE_EQ(file.rows[i].design.beam_radius, bundled.rows[i].design.beam_radius);
        EXPECT_DOUBLE_EQ(file.rows[i].length, bundled.rows[i].length);
        EXPECT_DOUBLE_EQ(file.rows[i].depth, bundled.rows[i].depth);
    }
}

TEST(Dataset, HeaderOnlyHasNoDataRows) {
    EXPECT_NE(parse_error(kHeader).find("no data rows"), std::string::npos);
}

TEST(Dataset, ErrorsNameRowAndColumn) {
    auto msg = parse_error(std::string(kHeader) + "1,530,0.159,4,0.625,0.19\n2,530,abc,4,0.4,0.2\n");
    EXPECT_NE(msg.find("row 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("beam_radius_mm"), std::string::npos) << msg;

    msg = parse_error(std::string(kHeader) + "1,530,0.159,4,-0.625,0.19\n");
    EXPECT_NE(msg.find("length_mm"), std::string::npos) << msg;
}

TEST(Dataset, MissingAndDuplicateColumnsRejected) {
    EXPECT_FALSE(parse_error("index,power_W,beam_radius_mm,pulse_ms,length_mm\n1,530,0.159,4,0.625\n").empty());
    EXPECT_FALSE(
        parse_error("index,power_W,power_W,pulse_ms,length_mm,depth_mm\n1,530,0.159,4,0.625,0.19\n").empty());
}

TEST(Dataset, SigmaColumnsCaptured) {
    auto ds = parse("index,power_W,beam_radius_mm,pulse_ms,length_mm,depth_mm,length_sigma_mm,depth_sigma_mm\n"
                    "1,530,0.159,4,0.625,0.19,0.02,0.01\n");
    ASSERT_TRUE(ds.has_sigmas());
    EXPECT_DOUBLE_EQ(*ds.rows[0].length_sigma, 2e-5);
    EXPECT_DOUBLE_EQ(*ds.rows[0].depth_sigma, 1e-5);
}

TEST(DomainProperty, DatasetRoundTripTo12Digits) {
    test::TempDir dir("dataset");
    for (bool sigmas : {false, true}) {
        auto ds = bundled_dataset();
        if (sigmas)
            for (auto& r : ds.rows) {
                r.length_sigma = r.length * 0.0312345678901;
                r.depth_sigma = r.depth * 0.0498765432109;
            }
        write_dataset(dir / "a.csv", ds);
        auto back = load_dataset(dir / "a.csv");
        ASSERT_EQ(back.size(), ds.size());
        ASSERT_EQ(back.has_sigmas(), sigmas);
        // 12 significant digits: half a unit in the last place is 5e-12 relative
        auto close = [](double a, double b) { return std::abs(a - b) <= 1e-11 * std::abs(a); };
        for (std::size_t i = 0; i < ds.size(); ++i) {
            const auto &a = ds.rows[i], &b = back.rows[i];
            EXPECT_TRUE(close(a.design.power, b.design.power));
            EXPECT_TRUE(close(a.design.beam_radius, b.design.beam_radius));
            EXPECT_TRUE(close(a.design.pulse_duration, b.design.pulse_duration));
            EXPECT_TRUE(close(a.length, b.length));
            EXPECT_TRUE(close(a.depth, b.depth));
            if (sigmas) {
                EXPECT_TRUE(close(*a.length_sigma, *b.length_sigma));
                EXPECT_TRUE(close(*a.depth_sigma, *b.depth_sigma));
            }
        }
        // rewriting the parsed file reproduces it byte for byte
        write_dataset(dir / "b.csv", back);
        EXPECT_EQ(test::slurp(dir / "a.csv"), test::slurp(dir / "b.csv"));
    }
}

TEST(Prior, RealizedIntervals) {
    auto p = default_prior();
    EXPECT_NEAR(p.interval(0).lo, 0.135, 1e-15);
    EXPECT_NEAR(p.interval(0).hi, 0.405, 1e-15);
    EXPECT_NEAR(p.interval(7).lo, -4.73e-4, 1e-18);
    EXPECT_NEAR(p.interval(7).hi, -3.87e-4, 1e-18);
    EXPECT_NEAR(p.interval(6).lo, 0.05, 1e-15);
    EXPECT_NEAR(p.interval(6).hi, 0.2, 1e-15);
}

TEST(Prior, NominalsAndMultipliers) {
    auto p = default_prior();
    const double nominal[] = {0.27, 100, 0.59, 837.4, 209.3, 2.5e5, 0.1, -4.3e-4};
    const double lo[] = {0.5, 0.8, 0.5, 0.9, 0.9, 0.9, 0.5, 0.9};
    const double hi[] = {1.5, 1.2, 1.5, 1.1, 1.1, 1.1, 2.0, 1.1};
    for (std::size_t i = 0; i < kNumParams; ++i) {
        EXPECT_EQ(p.entries[i].name, CalibrationParams::names[i]);
        EXPECT_DOUBLE_EQ(p.entries[i].nominal, nominal[i]);
        EXPECT_DOUBLE_EQ(p.entries[i].lower_multiplier, lo[i]);
        EXPECT_DOUBLE_EQ(p.entries[i].upper_multiplier, hi[i]);
    }
    EXPECT_TRUE(p.nominal().physical());
}

TEST(Prior, SupportExamples) {
    auto p = default_prior();
    auto theta = p.nominal();
    EXPECT_TRUE(in_support(theta, p));
    theta.alpha = 0.406;
    EXPECT_FALSE(in_support(theta, p));
    theta.alpha = 0.405;
    EXPECT_TRUE(in_support(theta, p));
    theta.alpha = 0.135;
    EXPECT_TRUE(in_support(theta, p));
}

TEST(Prior, ConstantsDefaults) {
    PhysicalConstants c;
    EXPECT_EQ(c.stefan_boltzmann, 5.670374419e-8);
    EXPECT_GT(c.liquidus, c.ambient);
    EXPECT_NO_THROW(c.validate());
}

TEST(DomainProperty, IntervalsContainNominal) {
    auto p = default_prior();
    for (std::size_t i = 0; i < kNumParams; ++i) {
        EXPECT_LT(p.interval(i).lo, p.interval(i).hi);
        EXPECT_TRUE(p.interval(i).contains(p.entries[i].nominal));
    }
    // also for random multiplier pairs, including negative nominals
    RandomStream rs(5, 0);
    for (int k = 0; k < 1000; ++k) {
        PriorEntry e{"x", rs.uniform(-10.0, 10.0), rs.uniform(0.01, 1.0), 0.0};
        e.upper_multiplier = rs.uniform(1.0, 3.0);
        EXPECT_TRUE(e.interval().contains(e.nominal));
    }
}

TEST(DomainProperty, SupportMonotoneUnderShrinking) {
    auto wide = default_prior();
    RandomStream rs(11, 0);
    for (int k = 0; k < 2000; ++k) {
        auto narrow = wide;
        std::size_t i = rs.below(kNumParams);
        // pull one multiplier toward 1 (shrinks the realized interval)
        if (rs.uniform() < 0.5) narrow.entries[i].lower_multiplier += (1.0 - narrow.entries[i].lower_multiplier) * rs.uniform();
        else narrow.entries[i].upper_multiplier -= (narrow.entries[i].upper_multiplier - 1.0) * rs.uniform();
        std::array<double, kNumParams> v{};
        for (std::size_t j = 0; j < kNumParams; ++j) {
            auto iv = wide.interval(j);
            double pad = 0.1 * iv.width();
            v[j] = rs.uniform(iv.lo - pad, iv.hi + pad);
        }
        auto theta = CalibrationParams::from_array(v);
        if (!in_support(theta, wide)) {
            EXPECT_FALSE(in_support(theta, narrow));
        }
        if (in_support(theta, narrow)) {
            EXPECT_TRUE(in_support(theta, wide));
        }
    }
}

TEST(DomainProperty, RandomStreamReproducible) {
    RandomStream a(42, 7), b(42, 7), c(42, 8);
    int differ = 0;
    for (int i = 0; i < 10000; ++i) {
        auto x = a.next_u64();
        ASSERT_EQ(x, b.next_u64());
        differ += x != c.next_u64();
    }
    EXPECT_GT(differ, 9990);
    RandomStream s1 = RandomStream(3, 1).split(4), s2 = RandomStream(3, 1).split(4);
    for (int i = 0; i < 1000; ++i) ASSERT_EQ(s1.uniform(), s2.uniform());
}

TEST(Random, UniformAndNormalMoments) {
    RandomStream rs(1, 2);
    const int n = 200000;
    double su = 0, sn = 0, sn2 = 0;
    for (int i = 0; i < n; ++i) {
        double u = rs.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        su += u;
        double z = rs.normal();
        sn += z;
        sn2 += z * z;
    }
    EXPECT_NEAR(su / n, 0.5, 0.005);
    EXPECT_NEAR(sn / n, 0.0, 0.01);
    EXPECT_NEAR(sn2 / n, 1.0, 0.02);
    auto perm = rs.permutation(50);
    std::sort(perm.begin(), perm.end());
    for (std::size_t i = 0; i < perm.size(); ++i) EXPECT_EQ(perm[i], i);
}

TEST(Domain, DesignAndParamInvariants) {
    EXPECT_THROW((DesignVars{530, 0.0, 4e-3}.validate()), PreconditionError);
    EXPECT_THROW((DesignVars{530, 0.02, 4e-3}.validate()), PreconditionError);
    EXPECT_THROW((DesignVars{530, 1.59e-4, 2.0}.validate()), PreconditionError);
    auto theta = default_prior().nominal();
    theta.gamma_t = 4.3e-4;
    EXPECT_FALSE(theta.physical());
}
