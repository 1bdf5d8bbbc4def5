#include "roughsde/drifts.hpp"
#include "roughsde/sde_flow.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>

using namespace roughsde;

namespace {

const HolderExponents kEx = HolderExponents::make(1.8, 0.5);
const Grid<1> kGrid(8.0, 1.0 / 32);
const TimeGrid kTime(1.0, 64);
const NoiseStream<1> kNoise(77, 1.0, 1024);

const ZvonkinTransform<1>& transform(const std::string& family)
{
    static std::map<std::string, ZvonkinTransform<1>> cache;
    auto it = cache.find(family);
    if (it == cache.end()) {
        const auto b = make_drift<1>({.family = family, .amplitude = 0.5, .levels = 4}, kEx);
        it = cache.emplace(family, build_transform<1>(b, kGrid, kTime, DiffusionCoefficient<1>::identity())).first;
    }
    return it->second;
}

// W_t − W_s summed directly from the stream's fine normals.
double brownian(const NoiseStream<1>& ns, std::uint64_t path, double s, double t)
{
    double w = 0.0;
    for (int j = ns.index_of(s); j < ns.index_of(t); ++j) {
        w += std::sqrt(ns.fine_step()) * ns.normal(path, j)[0];
    }
    return w;
}

std::vector<Vec<1>> points(std::initializer_list<double> xs)
{
    std::vector<Vec<1>> v;
    for (double x : xs) {
        v.emplace_back(x);
    }
    return v;
}

double rms_distance(const FlowEnsemble<1>& a, const FlowEnsemble<1>& b)
{
    double s = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < a.x0s.size(); ++i) {
        for (int p = 0; p < a.n_paths; ++p) {
            for (int r = 0; r < a.n_records; ++r) {
                const double d = a.x(i, p, r)[0] - b.x(i, p, r)[0];
                s += d * d;
                ++n;
            }
        }
    }
    return std::sqrt(s / n);
}

}  // namespace

TEST(SdeFlow, ZeroDriftIsBrownianShift)
{
    const auto& z = transform("zero");
    const FlowWindow w{0.25, 1.0, 48};
    const auto e = simulate_transformed(z, points({-1.0, 0.5}), w, kNoise, {.n_paths = 20, .record_every = 0});
    for (std::size_t i = 0; i < 2; ++i) {
        for (int p = 0; p < 20; ++p) {
            EXPECT_EQ(e.x(i, p, 0)[0], e.x0s[i][0]);
            EXPECT_NEAR(e.x(i, p, 1)[0], e.x0s[i][0] + brownian(kNoise, p, 0.25, 1.0), 1e-12);
        }
    }
    EXPECT_EQ(e.failures(), 0u);
}

TEST(SdeFlow, ZeroDriftSecondMoment)
{
    const auto& z = transform("zero");
    const int n = 4000;
    const auto e = simulate_transformed(z, points({0.7}), {0.0, 1.0, 16}, kNoise, {.n_paths = n, .record_every = 0});
    double m = 0.0, m2 = 0.0;
    for (int p = 0; p < n; ++p) {
        const double v = std::pow(e.x(0, p, 1)[0], 2);
        m += v;
        m2 += v * v;
    }
    m /= n;
    const double se = std::sqrt((m2 / n - m * m) / n);
    EXPECT_NEAR(m, 0.49 + 1.0, 3.0 * se);
}

TEST(SdeFlow, DirectAndTransformedAgreeWithoutDrift)
{
    const auto& z = transform("zero");
    const auto b = make_drift<1>({.family = "zero"}, kEx);
    const FlowWindow w{0.0, 1.0, 32};
    const auto a = simulate_transformed(z, points({0.0, 2.0}), w, kNoise, {.n_paths = 10});
    const auto d = simulate_direct(b, DiffusionCoefficient<1>::identity(), points({0.0, 2.0}), w, kNoise, {.n_paths = 10});
    EXPECT_LE(rms_distance(a, d), 1e-12);
}

TEST(SdeFlow, DirectSchemeMatchesOdeAtFirstOrder)
{
    // dx/dt = A cos x has x(t) = gd(A t + gd⁻¹(x0)), gd(u) = 2 atan(tanh(u / 2)).
    const double A = 0.5, x0 = 0.3;
    const auto b = make_drift<1>({.family = "smooth", .amplitude = A}, kEx);
    DiffusionCoefficient<1> still;
    still.sigma = [](double) { return Mat<1>::Zero().eval(); };
    const auto gd = [](double u) { return 2.0 * std::atan(std::tanh(0.5 * u)); };
    const double exact = gd(A * 1.0 + 2.0 * std::atanh(std::tan(0.5 * x0)));
    std::vector<double> err;
    for (int n : {16, 32, 64}) {
        const FlowWindow w{0.0, 1.0, n};
        const auto r = direct_walk(b, still, noise_index(kNoise, w), 0, w, Vec<1>(x0));
        err.push_back(std::abs(r.x[0] - exact));
    }
    EXPECT_NEAR(err[1] / err[0], 0.5, 0.05);
    EXPECT_NEAR(err[2] / err[1], 0.5, 0.05);
}

TEST(SdeFlow, SchemesConvergeToEachOtherForSmoothDrift)
{
    const auto& z = transform("smooth");
    const auto b = make_drift<1>({.family = "smooth", .amplitude = 0.5}, kEx);
    std::vector<double> dist;
    for (int n : {32, 64, 128}) {
        const FlowWindow w{0.0, 1.0, n};
        const SimOptions o{.n_paths = 200, .record_every = n / 8};
        const auto a = simulate_transformed(z, points({-0.5, 1.0}), w, kNoise, o);
        const auto d = simulate_direct(b, DiffusionCoefficient<1>::identity(), points({-0.5, 1.0}), w, kNoise, o);
        dist.push_back(rms_distance(a, d));
    }
    EXPECT_LT(dist[1], dist[0]);
    EXPECT_LT(dist[2], dist[1]);
}

TEST(SdeFlow, InverseOfBrownianShift)
{
    const auto& z = transform("zero");
    const FlowWindow w{0.0, 0.5, 16};
    const auto inv = inverse_flow(z, kNoise, w, points({0.0, 1.5}), 12);
    for (std::size_t i = 0; i < 2; ++i) {
        for (int p = 0; p < 12; ++p) {
            EXPECT_NEAR(inv.x(i, p)[0], inv.targets[i][0] - brownian(kNoise, p, 0.0, 0.5), 1e-12);
        }
    }
    const auto same = inverse_walk(z, noise_index(kNoise, FlowWindow{0.5, 0.5, 4}), 0, {0.5, 0.5, 4}, Vec<1>(0.3));
    EXPECT_EQ(same.x[0], 0.3);
}

TEST(SdeFlow, FlowAxiomsForZeroDrift)
{
    const auto rep = flow_checks(transform("zero"), kNoise, points({-1.0, 0.0, 2.0}), 0.0, 0.25, 1.0, 16, 20);
    EXPECT_EQ(rep.identity_defect, 0.0);
    EXPECT_LE(rep.composition_max, 1e-12);
    EXPECT_LE(rep.inverse_max, 1e-12);
    EXPECT_EQ(rep.failures, 0u);
}

TEST(SdeFlow, RoughDriftAxiomDefectsShrink)
{
    const auto& z = transform("lacunary");
    std::vector<FlowCheckReport> reps;
    for (int n : {16, 64}) {
        reps.push_back(flow_checks(z, kNoise, points({-1.0, 0.5}), 0.0, 0.25, 1.0, n, 100));
    }
    EXPECT_EQ(reps[0].identity_defect, 0.0);
    EXPECT_LT(reps[1].composition_rms, reps[0].composition_rms);
    EXPECT_LT(reps[1].inverse_rms, reps[0].inverse_rms);
    EXPECT_LT(reps[1].inverse_rms, 5e-2);
}

TEST(SdeFlow, VariationalFlowIsIdentityWithoutDrift)
{
    const auto& z = transform("zero");
    auto e = simulate_transformed(z, points({0.1}), {0.0, 1.0, 16}, kNoise, {.n_paths = 5, .variational = true});
    for (int p = 0; p < 5; ++p) {
        for (int r = 0; r < e.n_records; ++r) {
            EXPECT_EQ(e.zeta(0, p, r)(0, 0), 1.0);
            EXPECT_EQ(e.grad_x(0, p, r)(0, 0), 1.0);
        }
    }
}

TEST(SdeFlow, TangentJacobianMatchesDifferenceQuotients)
{
    const auto& z = transform("lacunary");
    const FlowWindow w{0.0, 1.0, 64};
    const auto ix = noise_index(kNoise, w);
    const WalkOptions tangent{true, JetMode::tangent};
    std::vector<double> err;
    for (double d : {1e-2, 1e-3, 1e-4}) {
        double s = 0.0;
        for (int p = 0; p < 40; ++p) {
            const Vec<1> x(0.37 + 0.05 * p);
            const auto a = transformed_walk(z, ix, p, w, x, tangent);
            const auto b = transformed_walk(z, ix, p, w, Vec<1>(x[0] + d));
            const double dq = (b.x[0] - a.x[0]) / d;
            s += std::pow(dq - a.grad_x(0, 0), 2);
        }
        err.push_back(std::sqrt(s / 40));
    }
    EXPECT_LT(err[1], err[0]);
    EXPECT_LT(err[2], err[1]);
    EXPECT_LT(err[2], 1e-2);
}

TEST(SdeFlow, TableAndTangentJacobiansAgree)
{
    const auto& z = transform("smooth");
    const FlowWindow w{0.0, 1.0, 64};
    const auto ix = noise_index(kNoise, w);
    for (int p = 0; p < 10; ++p) {
        const auto a = transformed_walk(z, ix, p, w, Vec<1>(0.2), {true, JetMode::tables});
        const auto b = transformed_walk(z, ix, p, w, Vec<1>(0.2), {true, JetMode::tangent});
        EXPECT_NEAR(a.grad_x(0, 0), b.grad_x(0, 0), 2e-2 * std::abs(b.grad_x(0, 0)));
        EXPECT_NEAR(a.x[0], b.x[0], 1e-12);
    }
}

TEST(SdeFlow, MomentEstimatorZeroDrift)
{
    const auto& z = transform("zero");
    const auto e = simulate_transformed(z, points({-1.0, 1.0}), {0.0, 1.0, 8}, kNoise,
                                        {.n_paths = 120, .record_every = 0, .variational = true});
    for (double p : {2.0, 4.0}) {
        const auto est = moment_estimator(e, p);
        EXPECT_DOUBLE_EQ(est.value, 1.0);
        EXPECT_EQ(est.stderr_, 0.0);
    }
    const auto inv = inverse_gradient_sups(z, kNoise, points({0.0}), {0.0, 1.0, 8}, 2, 120);
    EXPECT_DOUBLE_EQ(moment_estimator(inv, 4.0).value, 1.0);
    const auto few = simulate_transformed(z, points({0.0}), {0.0, 1.0, 8}, kNoise,
                                          {.n_paths = 50, .record_every = 0, .variational = true});
    EXPECT_THROW(moment_estimator(few, 2.0), Error);
}

TEST(SdeFlow, BootstrapStandardErrorOfMean)
{
    // Oracle: the standard error of a sample mean is sd / sqrt(n).
    const int n = 2000;
    std::vector<std::vector<double>> s(1, std::vector<double>(n));
    for (int i = 0; i < n; ++i) {
        s[0][i] = kNoise.normal(9, i)[0];
    }
    const auto e = sup_mean_bootstrap(s, 5, 1000);
    EXPECT_NEAR(e.stderr_, 1.0 / std::sqrt(n), 0.15 / std::sqrt(n));
    std::vector<std::vector<double>> c(2, std::vector<double>(100, 3.0));
    EXPECT_EQ(sup_mean_bootstrap(c).stderr_, 0.0);
}

TEST(SdeFlow, BrownianTimeExponentIsHalf)
{
    const auto& z = transform("zero");
    const auto e = simulate_transformed(z, points({0.0}), {0.0, 1.0, 64}, kNoise, {.n_paths = 4000});
    const auto [sep, d] = time_increments(e, 0, 0, {1, 2, 4, 8, 16, 32});
    const auto fit = holder_exponent_fit(sep, d, 2.0);
    EXPECT_NEAR(fit.exponent, 0.5, 0.02);
    EXPECT_LE(fit.ci_low, fit.exponent);
    EXPECT_THROW(holder_exponent_fit({1, 2, 3}, {{1}, {2}, {3}}, 2.0), Error);
}

TEST(SdeFlow, SpatialExponentIsOneWithoutDrift)
{
    const auto& z = transform("zero");
    const auto e = simulate_transformed(z, points({0.0, 0.01, 0.02, 0.04, 0.08}), {0.0, 1.0, 16}, kNoise,
                                        {.n_paths = 200, .record_every = 0});
    const auto [sep, d] = space_increments(e, 1, false);
    EXPECT_NEAR(holder_exponent_fit(sep, d, 2.0).exponent, 1.0, 1e-9);
}

TEST(SdeFlow, StartTimeIncrementsVanishAtZeroOffsetOnly)
{
    const auto& z = transform("zero");
    const auto [sep, d] = start_time_increments(z, kNoise, Vec<1>(0.0), 0.0, 1.0, 1.0 / 64, {1.0 / 64, 1.0 / 16}, 50);
    for (int q = 0; q < 50; ++q) {
        // X_{s,t} − X_{s+δ,t} = W_{s+δ} − W_s for zero drift.
        EXPECT_NEAR(d[0][q], std::abs(brownian(kNoise, q, 0.0, 1.0 / 64)), 1e-12);
    }
}

TEST(SdeFlow, EnsembleIndependentOfWorkerCount)
{
    const auto& z = transform("lacunary");
    const FlowWindow w{0.0, 1.0, 32};
    setenv("ROUGHSDE_WORKERS", "1", 1);
    const auto a = simulate_transformed(z, points({0.0, 1.0}), w, kNoise, {.n_paths = 30, .variational = true});
    setenv("ROUGHSDE_WORKERS", "4", 1);
    const auto b = simulate_transformed(z, points({0.0, 1.0}), w, kNoise, {.n_paths = 30, .variational = true});
    unsetenv("ROUGHSDE_WORKERS");
    EXPECT_EQ(a.x_paths, b.x_paths);
    EXPECT_EQ(a.grad_paths, b.grad_paths);
}

TEST(SdeFlow, StabilitySentinelAndGate)
{
    const auto b = make_drift<1>({.family = "lacunary", .amplitude = 0.5}, kEx);
    FlowStabilityOptions<1> opt;
    opt.n_list = {0, 8};
    opt.window = {0.0, 1.0, 32};
    opt.n_paths = 40;
    const auto rep = stability_experiment(b, DiffusionCoefficient<1>::identity(), kGrid, kTime, kNoise, opt);
    EXPECT_EQ(rep.rows[0].path_distance.value, 0.0);
    EXPECT_EQ(rep.rows[0].grad_distance.value, 0.0);
    EXPECT_GT(rep.rows[1].path_distance.value, 0.0);
    const auto bad = make_drift<1>({.family = "lacunary"}, HolderExponents::make(1.5, 0.5));
    try {
        stability_experiment(bad, DiffusionCoefficient<1>::identity(), kGrid, kTime, kNoise, opt);
        FAIL() << "expected a hypothesis error";
    } catch (const HypothesisError& e) {
        EXPECT_NE(std::string(e.what()).find("4/(2+alpha)"), std::string::npos);
    }
}

TEST(SdeFlow, MisalignedWindowIsRejected)
{
    EXPECT_THROW(noise_index(kNoise, FlowWindow{0.0, 1.0, 3}), Error);
    EXPECT_THROW(noise_index(kNoise, FlowWindow{0.0, 2.0, 4}), Error);
}
