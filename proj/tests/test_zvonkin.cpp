#include "roughsde/drifts.hpp"
#include "roughsde/zvonkin.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>

using namespace roughsde;

namespace {

const HolderExponents kEx = HolderExponents::make(1.8, 0.5);

struct Fixture1 {
    Grid<1> grid{8.0, 1.0 / 32};
    TimeGrid time{1.0, 64};
};

ZvonkinTransform<1> transform1(const DriftParams& p)
{
    Fixture1 f;
    return build_transform<1>(make_drift<1>(p, kEx), f.grid, f.time, DiffusionCoefficient<1>::identity());
}

const ZvonkinTransform<1>& lacunary_transform()
{
    static const auto z = transform1({.family = "lacunary", .amplitude = 0.5, .levels = 4});
    return z;
}

const ZvonkinTransform<1>& smooth_transform()
{
    static const auto z = transform1({.family = "smooth", .amplitude = 0.5});
    return z;
}

std::vector<double> probe_points()
{
    std::vector<double> xs;
    for (double x = -9.5; x <= 9.5; x += 0.37) {
        xs.push_back(x);
    }
    return xs;
}

}  // namespace

TEST(Zvonkin, ZeroDriftGivesIdentity)
{
    const auto z = transform1({.family = "zero"});
    for (double x : probe_points()) {
        const Vec<1> v(x);
        for (double t : {0.0, 0.3, 1.0}) {
            EXPECT_EQ(z.phi(t, v)[0], x);
            InversionResult info;
            EXPECT_EQ(z.invert_phi(t, v, {}, -1.0, 60, &info)[0], x);
            EXPECT_EQ(info.iterations, 1);
            EXPECT_EQ(z.b_tilde(t, v)[0], 0.0);
            EXPECT_EQ(z.sigma_tilde(t, v)(0, 0), 1.0);
        }
    }
    const auto c = z.checks();
    EXPECT_EQ(c.grad_phi_max, 1.0);
    EXPECT_EQ(c.grad_psi_max, 1.0);
}

TEST(Zvonkin, TunedGradientBelowHalfAndBoundsHold)
{
    const auto& z = lacunary_transform();
    EXPECT_LT(z.grad_bound(), 0.5);
    EXPECT_GE(z.lambda(), 4.0);
    const auto c = z.checks();
    EXPECT_TRUE(c.bounds_ok());
    // Spectral norms are squeezed by the sup bound on ∇U.
    EXPECT_LE(c.grad_phi_max, 1.0 + z.grad_sup() + 1e-12);
    EXPECT_GE(c.grad_phi_min, 1.0 - z.grad_sup() - 1e-12);
    EXPECT_LE(c.grad_psi_max, 1.0 / (1.0 - z.grad_sup()) + 1e-12);
    EXPECT_LE(c.round_trip, 1e-8);
}

TEST(Zvonkin, RoundTripOffGridAndOutsideBox)
{
    const auto& z = lacunary_transform();
    for (double t : {0.0, 0.123, 0.5, 0.999, 1.0}) {
        for (double x : probe_points()) {
            const Vec<1> v(x);
            InversionResult info;
            const Vec<1> y = z.invert_phi(t, v, {}, -1.0, 60, &info);
            EXPECT_LE(info.iterations, 60);
            EXPECT_LE(std::abs(z.phi(t, y)[0] - x), 1e-10 * (1 + std::abs(x)));
            EXPECT_LE(std::abs(z.psi(t, z.phi(t, v))[0] - x), 1e-8 * (1 + std::abs(x)));
            EXPECT_LE(std::abs(z.phi(t, z.psi(t, v))[0] - x), 1e-8 * (1 + std::abs(x)));
        }
    }
}

TEST(Zvonkin, WarmStartNeedsFewerIterations)
{
    const auto& z = lacunary_transform();
    int cold = 0, warm = 0;
    for (double x : probe_points()) {
        InversionResult a, b;
        z.invert_phi(0.41, Vec<1>(x), {}, -1.0, 60, &a);
        z.psi(0.41, Vec<1>(x), &b);
        cold += a.iterations;
        warm += b.iterations;
    }
    EXPECT_LT(warm, cold);
}

TEST(Zvonkin, TransformedDriftMatchesDisplacementIdentity)
{
    // Φ(Ψ(y)) = y gives U(Ψ(y)) = y − Ψ(y), so b̃(y) = λ(y − Ψ(y)).
    const auto& z = lacunary_transform();
    for (double x : probe_points()) {
        const Vec<1> y(x);
        const double expect = z.lambda() * (x - z.psi(0.3, y)[0]);
        EXPECT_NEAR(z.b_tilde(0.3, y)[0], expect, 1e-9 * z.lambda() * (1 + std::abs(x)));
    }
}

TEST(Zvonkin, GradPsiMatchesDifferenceQuotient)
{
    const auto& z = smooth_transform();
    const double d = 1e-4;
    for (double x = -3.0; x <= 3.0; x += 0.29) {
        const double fd = (z.psi(0.5, Vec<1>(x + d))[0] - z.psi(0.5, Vec<1>(x - d))[0]) / (2 * d);
        // Interpolated ∇U and the slope of interpolated U agree to O(h).
        EXPECT_NEAR(z.grad_psi(0.5, Vec<1>(x))(0, 0), fd, 2e-3);
    }
}

TEST(Zvonkin, CoefficientDerivativesMatchDifferenceQuotients)
{
    const auto& z = smooth_transform();
    const double d = 1e-3;
    for (double x = -3.0; x <= 3.0; x += 0.41) {
        const auto c = z.coefficients(0.25, Vec<1>(x), true);
        const auto cp = z.coefficients(0.25, Vec<1>(x + d), false);
        const auto cm = z.coefficients(0.25, Vec<1>(x - d), false);
        const double db = (cp.b[0] - cm.b[0]) / (2 * d);
        const double ds = (cp.s(0, 0) - cm.s(0, 0)) / (2 * d);
        EXPECT_NEAR(c.grad_b(0, 0), db, 2e-2 * z.lambda() * 0.05 + 1e-3);
        EXPECT_NEAR(c.grad_s[0](0, 0), ds, 1e-2);
        EXPECT_NEAR(c.b[0], z.b_tilde(0.25, Vec<1>(x))[0], 1e-12);
        EXPECT_NEAR(c.x[0], z.psi(0.25, Vec<1>(x))[0], 1e-15);
    }
}

TEST(Zvonkin, TransformedDriftIsLipschitzWithConstantLambda)
{
    // |b̃(y) − b̃(y')| <= λ ||∇U|| ||∇Ψ|| |y − y'| <= λ |y − y'| when ||∇U|| <= 1/2.
    const auto& z = lacunary_transform();
    double worst = 0.0;
    for (double x = -7.0; x < 7.0; x += 0.013) {
        const double a = z.b_tilde(0.7, Vec<1>(x))[0];
        const double b = z.b_tilde(0.7, Vec<1>(x + 0.013))[0];
        worst = std::max(worst, std::abs(a - b) / 0.013);
    }
    EXPECT_LE(worst, z.lambda());
}

TEST(Zvonkin, TwoDimensionalTransform)
{
    Grid<2> g(4.0, 1.0 / 8);
    TimeGrid tg(1.0, 32);
    const auto b = make_drift<2>({.family = "divfree", .amplitude = 0.4, .levels = 3}, kEx);
    const auto z = build_transform<2>(b, g, tg, DiffusionCoefficient<2>::identity());
    EXPECT_LT(z.grad_bound(), 0.5);
    const auto c = z.checks();
    EXPECT_TRUE(c.bounds_ok());
    EXPECT_LE(c.round_trip, 1e-8);
    const Vec<2> y(0.3, -1.1);
    const auto co = z.coefficients(0.4, y, true);
    EXPECT_LE((z.phi(0.4, co.x) - y).norm(), 1e-9);
    EXPECT_LE((co.grad_psi * z.grad_phi(0.4, co.x) - Mat<2>::Identity()).norm(), 1e-12);
}

TEST(Zvonkin, RejectsSupercriticalDrift)
{
    const auto ex = HolderExponents::make(1.05, 0.2);
    Fixture1 f;
    const auto b = make_drift<1>({.family = "lacunary"}, ex);
    EXPECT_THROW(build_transform<1>(b, f.grid, f.time, DiffusionCoefficient<1>::identity()), HypothesisError);
}

TEST(Zvonkin, FixedLambdaTooSmallIsReported)
{
    Fixture1 f;
    const auto b = make_drift<1>({.family = "lacunary", .amplitude = 2.0}, kEx);
    TransformOptions opt;
    opt.fixed_lambda = 0.05;
    EXPECT_THROW(build_transform<1>(b, f.grid, f.time, DiffusionCoefficient<1>::identity(), opt), Error);
}

TEST(Zvonkin, AnchorsIndependentOfWorkerCount)
{
    setenv("ROUGHSDE_WORKERS", "1", 1);
    const auto a = transform1({.family = "lacunary", .amplitude = 0.5});
    setenv("ROUGHSDE_WORKERS", "3", 1);
    const auto b = transform1({.family = "lacunary", .amplitude = 0.5});
    unsetenv("ROUGHSDE_WORKERS");
    for (double x : probe_points()) {
        EXPECT_EQ(a.psi(0.37, Vec<1>(x))[0], b.psi(0.37, Vec<1>(x))[0]);
    }
}
