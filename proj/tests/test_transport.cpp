#include "roughsde/drifts.hpp"
#include "roughsde/transport.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>

using namespace roughsde;

namespace {

const HolderExponents kEx = HolderExponents::make(1.8, 0.5);
const Grid<2> kPdeGrid(4.0, 1.0 / 8);
const TimeGrid kTime(1.0, 32);
const NoiseStream<2> kNoise(11, 1.0, 1024);

DriftSpec<2> drift(const std::string& family, double amplitude = 0.5)
{
    return make_drift<2>({.family = family, .amplitude = amplitude, .levels = 3}, kEx);
}

const ZvonkinTransform<2>& transform(const std::string& family, double amplitude = 0.5)
{
    static std::map<std::pair<std::string, double>, ZvonkinTransform<2>> cache;
    const auto key = std::make_pair(family, amplitude);
    auto it = cache.find(key);
    if (it == cache.end()) {
        it = cache
                 .emplace(key, build_transform<2>(drift(family, amplitude), kPdeGrid, kTime,
                                                  DiffusionCoefficient<2>::identity()))
                 .first;
    }
    return it->second;
}

Vec<2> brownian(const NoiseStream<2>& ns, std::uint64_t path, double t)
{
    Vec<2> w = Vec<2>::Zero();
    for (int j = 0; j < ns.index_of(t); ++j) {
        w += std::sqrt(ns.fine_step()) * ns.normal(path, j);
    }
    return w;
}

}  // namespace

TEST(Transport, TestFunctionDerivativesMatchFiniteDifferences)
{
    const TestFunction<2> phi{Vec<2>(0.3, -0.2), 0.8};
    const double d = 1e-5;
    for (const Vec<2>& x : {Vec<2>(0.1, 0.0), Vec<2>(0.6, -0.5), Vec<2>(0.3, 0.3)}) {
        Vec<2> fd;
        double lap = 0.0;
        for (int a = 0; a < 2; ++a) {
            const Vec<2> e = Vec<2>::Unit(a) * d;
            fd[a] = (phi.value(x + e) - phi.value(x - e)) / (2 * d);
            lap += (phi.value(x + e) - 2 * phi.value(x) + phi.value(x - e)) / (d * d);
        }
        EXPECT_NEAR((phi.gradient(x) - fd).norm(), 0.0, 1e-8);
        EXPECT_NEAR(phi.laplacian(x), lap, 1e-4);
    }
    EXPECT_EQ(phi.value(Vec<2>(2.0, 2.0)), 0.0);
    EXPECT_EQ(default_test_functions<2>().size(), 6u);
}

TEST(Transport, ZeroDriftIsBrownianShift)
{
    const auto u0 = InitialDatum<2>::gaussian(Vec<2>(0.2, -0.1), 0.6);
    const Grid<2> g(3.0, 0.25);
    const auto f = solve_transport(u0, drift("zero"), transform("zero"), kNoise, g, {0.0, 0.5, 1.0}, 1.0 / 32, 3);
    for (int p = 0; p < 3; ++p) {
        for (int j = 0; j < 3; ++j) {
            const Vec<2> w = brownian(kNoise, p, f.times[j]);
            for (std::size_t n = 0; n < f.nodes.size(); n += 7) {
                const Vec<2> x = g.node(f.nodes[n]);
                EXPECT_NEAR(f.at(p, j, n), u0.value(x - w), 1e-12);
            }
        }
    }
}

TEST(Transport, ConstantsTransportToConstants)
{
    const Grid<2> g(3.0, 0.5);
    const auto f = solve_transport(InitialDatum<2>::constant(2.5), drift("divfree"), transform("divfree"), kNoise, g,
                                   {0.25, 1.0}, 1.0 / 32, 2);
    for (double v : f.values) {
        EXPECT_EQ(v, 2.5);
    }
}

TEST(Transport, RotationMatchesClosedFormCharacteristics)
{
    // dX = A J X dt + dW with J the rotation generator:
    // X_t^{-1}(y) = e^{−AJt} y − ∫_0^t e^{−AJs} dW_s.
    const double A = 0.3, t = 0.25;
    const auto b = drift("rotation", A);
    const auto& z = transform("rotation", A);
    const auto rot = [](double a) {
        Mat<2> m;
        m << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
        return m;
    };
    const Grid<2> g(1.0, 0.5);
    const auto f = solve_transport(InitialDatum<2>::gaussian(Vec<2>::Zero(), 0.7), b, z, kNoise, g, {t}, 1.0 / 256, 3);
    for (int p = 0; p < 3; ++p) {
        Vec<2> integral = Vec<2>::Zero();
        const double h = kNoise.fine_step();
        for (int j = 0; j < kNoise.index_of(t); ++j) {
            integral += rot(-A * (j + 0.5) * h) * std::sqrt(h) * kNoise.normal(p, j);
        }
        for (std::size_t n = 0; n < f.nodes.size(); ++n) {
            const Vec<2> y = g.node(f.nodes[n]);
            const Vec<2> exact = rot(-A * t) * y - integral;
            EXPECT_LE((f.preimage(p, 0, n) - exact).norm(), 2e-2);
        }
    }
}

TEST(Transport, ConservationForZeroDrift)
{
    const auto u0 = InitialDatum<2>::gaussian(Vec<2>::Zero(), 0.4);
    const Grid<2> g(4.0, 1.0 / 8);
    const auto f = solve_transport(u0, drift("zero"), transform("zero"), kNoise, g, {0.25, 0.5}, 1.0 / 16, 2);
    const auto c = conservation_checks(f, 2.0);
    EXPECT_LE(c.mass_defect, 1e-6);
    EXPECT_LE(c.lr_defect, 1e-6);
    EXPECT_EQ(c.max_principle_violation, 0.0);
    EXPECT_THROW(conservation_checks(f, 0.0), Error);
    EXPECT_EQ(conservation_checks(f, INFINITY).lr_defect, 0.0);
}

TEST(Transport, ConservationForDivergenceFreeDrift)
{
    const auto u0 = InitialDatum<2>::gaussian(Vec<2>::Zero(), 0.5);
    const Grid<2> g(5.0, 0.25);
    const auto f = solve_transport(u0, drift("divfree"), transform("divfree"), kNoise, g, {0.5, 1.0}, 1.0 / 64, 2);
    const auto c = conservation_checks(f, 2.0);
    EXPECT_LE(c.mass_defect, 5e-3);
    EXPECT_LE(c.lr_defect, 5e-3);
    EXPECT_EQ(c.max_principle_violation, 0.0);
}

TEST(Transport, EulerIdentity)
{
    const std::vector<Vec<2>> xs{Vec<2>(0.0, 0.0), Vec<2>(0.7, -0.4)};
    const auto zero = euler_identity(transform("zero"), drift("zero"), kNoise, xs, {0.0, 1.0, 16}, 10);
    EXPECT_EQ(zero.max, 0.0);
    std::vector<double> rms;
    for (int n : {16, 128}) {
        rms.push_back(euler_identity(transform("divfree"), drift("divfree"), kNoise, xs, {0.0, 1.0, n}, 60).rms);
    }
    EXPECT_LT(rms[1], rms[0]);
    EXPECT_LT(rms[1], 5e-2);
}

TEST(Transport, WeakResidualOfConstantsVanishes)
{
    const Grid<2> g(4.0, 1.0 / 16);
    const auto phis = default_test_functions<2>();
    const auto nodes = support_nodes(g, phis);
    std::vector<double> times{0.0, 0.25, 0.5};
    const auto f0 = solve_transport(InitialDatum<2>::constant(1.5), drift("zero"), transform("zero"), kNoise, g, times,
                                    0.25, 2, 0, nodes);
    const auto f1 = solve_transport(InitialDatum<2>::constant(1.5), drift("divfree"), transform("divfree"), kNoise, g,
                                    times, 0.25, 2, 0, nodes);
    for (const auto& phi : phis) {
        EXPECT_LE(weak_residual(f0, drift("zero"), phi), 1e-4);
        EXPECT_LE(weak_residual(f1, drift("divfree"), phi), 5e-3);
    }
    const auto first = solve_transport(InitialDatum<2>::gaussian(Vec<2>::Zero(), 1.0), drift("zero"),
                                       transform("zero"), kNoise, g, {0.0}, 0.25, 2, 0, nodes);
    EXPECT_EQ(weak_residual(first, drift("zero"), phis[0]), 0.0);
    const auto partial = solve_transport(InitialDatum<2>::constant(1.0), drift("zero"), transform("zero"), kNoise, g,
                                         times, 0.25, 1, 0, support_nodes(g, {phis[0]}));
    EXPECT_THROW(weak_residual(partial, drift("zero"), phis[5]), Error);
}

TEST(Transport, LagrangianResidualMatchesFieldResidual)
{
    // For zero drift both evaluate the same integrals with different nodes.
    const auto u0 = InitialDatum<2>::gaussian(Vec<2>::Zero(), 1.0);
    const Grid<2> g(4.0, 1.0 / 16);
    const auto phis = default_test_functions<2>();
    std::vector<double> times;
    for (int j = 0; j <= 8; ++j) {
        times.push_back(j / 8.0);
    }
    const auto f = solve_transport(u0, drift("zero"), transform("zero"), kNoise, g, times, 1.0 / 8, 1, 0,
                                   support_nodes(g, phis));
    const auto lag =
        weak_residual_lagrangian(u0, drift("zero"), transform("zero"), kNoise, Grid<2>(7.0, 1.0 / 16), phis,
                                 {0.0, 1.0, 8}, 1);
    for (std::size_t i = 0; i < phis.size(); ++i) {
        EXPECT_NEAR(lag[i].max, weak_residual(f, drift("zero"), phis[i]), 2e-4);
    }
}

TEST(Transport, WeakResidualShrinksUnderRefinement)
{
    const auto u0 = InitialDatum<2>::gaussian(Vec<2>::Zero(), 1.0);
    const auto phis = default_test_functions<2>();
    const Grid<2> zg(5.0, 0.25);
    double coarse = 0.0, fine = 0.0;
    for (const auto& r : weak_residual_lagrangian(u0, drift("divfree"), transform("divfree"), kNoise, zg, phis,
                                                  {0.0, 1.0, 16}, 6)) {
        coarse = std::max(coarse, r.rms);
    }
    for (const auto& r : weak_residual_lagrangian(u0, drift("divfree"), transform("divfree"), kNoise, zg, phis,
                                                  {0.0, 1.0, 256}, 6)) {
        fine = std::max(fine, r.rms);
    }
    EXPECT_LT(fine, 0.6 * coarse);
}

TEST(Transport, UniquenessProbe)
{
    const Grid<2> g(3.0, 0.5);
    const auto phis = default_test_functions<2>();
    const auto u0 = InitialDatum<2>::gaussian(Vec<2>::Zero(), 0.5);
    const auto a = solve_transport(u0, drift("divfree"), transform("divfree"), kNoise, g, {0.5}, 1.0 / 16, 2);
    EXPECT_EQ(uniqueness_probe(a, a, phis), 0.0);
    const auto z0 = solve_transport(InitialDatum<2>::constant(0.0), drift("divfree"), transform("divfree"), kNoise, g,
                                    {0.5}, 1.0 / 16, 2);
    EXPECT_EQ(uniqueness_probe(z0, z0, phis), 0.0);
    const auto other = solve_transport(u0, drift("divfree"), transform("divfree"), kNoise, g, {1.0}, 1.0 / 16, 2);
    EXPECT_THROW(uniqueness_probe(a, other, phis), Error);
}

TEST(Transport, GradientStatisticForZeroDrift)
{
    // ∇u(t, x) = ∇u0(x − W_t).
    const auto u0 = InitialDatum<2>::gaussian(Vec<2>::Zero(), 0.6);
    const std::vector<Vec<2>> pts{Vec<2>(0.0, 0.0), Vec<2>(0.5, 0.2), Vec<2>(-0.4, 0.6)};
    const std::vector<double> times{0.5, 1.0};
    const int n = 120;
    const auto st = gradient_transport(u0, transform("zero"), kNoise, pts, 0.1, times, 1.0 / 16, INFINITY, 2.0, n);
    double oracle = 0.0;
    for (int p = 0; p < n; ++p) {
        double best = 0.0;
        for (double t : times) {
            const Vec<2> w = brownian(kNoise, p, t);
            for (const auto& x : pts) {
                best = std::max(best, u0.gradient(x - w).norm());
            }
        }
        oracle += best * best;
    }
    EXPECT_NEAR(st.estimate.value, oracle / n, 1e-10);
    InitialDatum<2> novel;
    novel.value = u0.value;
    EXPECT_THROW(gradient_transport(novel, transform("zero"), kNoise, pts, 0.1, times, 1.0 / 16, 2.0, 2.0, 4), Error);
}

TEST(Transport, HypothesisGates)
{
    const Grid<2> g(2.0, 0.5);
    const auto u0 = InitialDatum<2>::constant(1.0);
    auto smooth = drift("smooth");
    EXPECT_THROW(solve_transport(u0, smooth, transform("zero"), kNoise, g, {0.5}, 0.25, 1), HypothesisError);
    DiffusionCoefficient<2> scaled;
    scaled.sigma = [](double) { return (1.1 * Mat<2>::Identity()).eval(); };
    const auto z = build_transform<2>(drift("zero"), kPdeGrid, kTime, scaled);
    EXPECT_THROW(solve_transport(u0, drift("zero"), z, kNoise, g, {0.5}, 0.25, 1), HypothesisError);
}
