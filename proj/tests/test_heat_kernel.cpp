#include "roughsde/heat_kernel.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

using namespace roughsde;

namespace {

// Closed-form normalized Gaussian density with covariance S.
template <int D>
double gaussian_density(const Mat<D>& S, const Vec<D>& x)
{
    return std::exp(-0.5 * x.dot(S.inverse() * x)) / std::sqrt(std::pow(2.0 * std::numbers::pi, D) * S.determinant());
}

}  // namespace

TEST(Covariance, IdentityAndLinearVariance)
{
    auto w = covariance(DiffusionCoefficient<2>::identity(), 0.25, 1.0);
    EXPECT_NEAR((w.A - 0.75 * Mat<2>::Identity()).norm(), 0.0, 1e-15);
    EXPECT_NEAR((w.B - Mat<2>::Identity() / 0.75).norm(), 0.0, 1e-14);

    DiffusionCoefficient<1> lin;
    lin.constant = false;
    lin.theta = 2.5;
    lin.sigma = [](double t) { return Mat<1>::Constant(std::sqrt(1.0 + t)); };
    EXPECT_NEAR(covariance(lin, 0.0, 1.0).A(0, 0), 1.5, 1e-13);
}

TEST(Covariance, EigenvalueSandwichForRandomDiagonal)
{
    const double theta = 3.0;
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(std::pow(theta, -0.5), std::pow(theta, 0.5));
    for (int trial = 0; trial < 20; ++trial) {
        const double c0 = u(rng), c1 = u(rng), f0 = u(rng), f1 = u(rng);
        DiffusionCoefficient<2> sig;
        sig.theta = theta;
        sig.constant = false;
        // Diagonal entries drifting between two admissible values.
        sig.sigma = [=](double t) {
            Mat<2> m = Mat<2>::Zero();
            m(0, 0) = (1 - t) * c0 + t * f0;
            m(1, 1) = (1 - t) * c1 + t * f1;
            return m;
        };
        EXPECT_NO_THROW(sig.validate(1.0));
        const auto w = covariance(sig, 0.1, 0.9);
        Eigen::SelfAdjointEigenSolver<Mat<2>> es(w.A);
        EXPECT_GE(es.eigenvalues().minCoeff(), 0.8 / theta);
        EXPECT_LE(es.eigenvalues().maxCoeff(), 0.8 * theta);
    }
}

TEST(Covariance, Errors)
{
    const auto id = DiffusionCoefficient<1>::identity();
    EXPECT_THROW(covariance(id, 1.0, 1.0), Error);
    EXPECT_THROW(covariance(id, 1.0, 0.5), Error);
    EXPECT_THROW(covariance_from_matrix<2>(0.0, 1.0, Mat<2>::Zero(), 2.0), Error);
    DiffusionCoefficient<1> weak;
    weak.sigma = [](double) { return Mat<1>::Constant(0.1); };
    EXPECT_THROW(weak.validate(1.0), HypothesisError);
}

TEST(GaussKernel, ValuesAndDerivatives)
{
    const auto w1 = covariance(DiffusionCoefficient<1>::identity(), 0.0, 1.0);
    EXPECT_NEAR(gauss_kernel(w1, Vec<1>(Vec<1>::Zero())), 0.3989422804014327, 1e-15);

    Mat<2> A;
    A << 0.6, 0.2, 0.2, 0.4;
    const auto w = covariance_from_matrix<2>(0.0, 0.5, A, 3.0);
    const Vec<2> x(0.3, -0.2);
    EXPECT_NEAR(gauss_kernel(w, x), gaussian_density<2>(A, x), 1e-14);
    const double e = 1e-5;
    Vec<2> fd_grad;
    Mat<2> fd_hess;
    for (int a = 0; a < 2; ++a) {
        Vec<2> da = Vec<2>::Zero();
        da[a] = e;
        fd_grad[a] = (gauss_kernel(w, Vec<2>(x + da)) - gauss_kernel(w, Vec<2>(x - da))) / (2 * e);
        const Vec<2> gp = gauss_kernel_grad(w, Vec<2>(x + da));
        const Vec<2> gm = gauss_kernel_grad(w, Vec<2>(x - da));
        fd_hess.col(a) = (gp - gm) / (2 * e);
    }
    EXPECT_NEAR((gauss_kernel_grad(w, x) - fd_grad).norm(), 0.0, 1e-8);
    EXPECT_NEAR((gauss_kernel_hess(w, x) - fd_hess).norm(), 0.0, 1e-7);
}

TEST(GaussKernel, NormalizedByQuadrature)
{
    Mat<2> A;
    A << 0.6, 0.2, 0.2, 0.4;
    const auto w = covariance_from_matrix<2>(0.0, 0.5, A, 3.0);
    // Tensor Gauss-Legendre on panels of [-6, 6]^2.
    double mass = 0.0;
    for (int p = 0; p < 24; ++p) {
        const auto gx = gauss_legendre<10>(-6.0 + 0.5 * p, -5.5 + 0.5 * p);
        for (int r = 0; r < 24; ++r) {
            const auto gy = gauss_legendre<10>(-6.0 + 0.5 * r, -5.5 + 0.5 * r);
            for (std::size_t i = 0; i < gx.nodes.size(); ++i) {
                for (std::size_t j = 0; j < gy.nodes.size(); ++j) {
                    mass += gx.weights[i] * gy.weights[j] * gauss_kernel(w, Vec<2>(gx.nodes[i], gy.nodes[j]));
                }
            }
        }
    }
    EXPECT_NEAR(mass, 1.0, 1e-8);
}

TEST(GaussKernel, GradientEnvelopeWithFittedConstants)
{
    // |∇K̂| <= C (t−s)^{-(d+1)/2} exp(−μ|x|²/(t−s)); with μ = 1/(4Θ) the ratio
    // must be bounded uniformly in (t−s, x).
    const double theta = 2.0;
    DiffusionCoefficient<2> sig;
    sig.theta = theta;
    sig.sigma = [](double) {
        Mat<2> m;
        m << 1.2, 0.0, 0.3, 0.8;
        return m;
    };
    sig.validate(1.0);
    const double mu = 1.0 / (4.0 * theta);
    std::vector<double> per_window;
    for (double len : {1e-3, 1e-2, 1e-1, 1.0}) {
        const auto w = covariance(sig, 0.0, len);
        double worst = 0.0;
        for (int i = -60; i <= 60; ++i) {
            for (int j = -60; j <= 60; ++j) {
                const Vec<2> x = std::sqrt(len) * Vec<2>(i / 6.0, j / 6.0);
                const double env = std::pow(len, -1.5) * std::exp(-mu * x.squaredNorm() / len);
                worst = std::max(worst, gauss_kernel_grad(w, x).norm() / env);
            }
        }
        per_window.push_back(worst);
    }
    // Parabolic scaling: the fitted constant C is the same for every window.
    for (double c : per_window) {
        EXPECT_TRUE(std::isfinite(c));
        EXPECT_NEAR(c / per_window.front(), 1.0, 1e-9);
    }
}

TEST(Convolve, ConstantsAndDerivatives)
{
    Grid<1> g(4.0, 1.0 / 32);
    const auto w = covariance(DiffusionCoefficient<1>::identity(), 0.0, 0.05);
    std::vector<double> c(g.size(), 2.5);
    const auto out0 = convolve(w, g, std::span<const double>(c), 1, 0);
    const auto out1 = convolve(w, g, std::span<const double>(c), 1, 1);
    for (std::size_t i = 0; i < g.size(); ++i) {
        EXPECT_NEAR(out0[i], 2.5, 1e-9);
        EXPECT_NEAR(out1[i], 0.0, 1e-10);
    }
    Grid<2> g2(2.0, 1.0 / 16);
    std::vector<double> c2(g2.size() * 2, -1.0);
    const auto w2 = covariance(DiffusionCoefficient<2>::identity(), 0.0, 0.05);
    const auto o2 = convolve(w2, g2, std::span<const double>(c2), 2, 2);
    for (double v : o2) {
        EXPECT_NEAR(v, 0.0, 1e-7);
    }
    EXPECT_THROW(convolve(CovarianceWindow<1>{0.5, 0.5}, g, std::span<const double>(c), 1, 0), Error);
}

TEST(Convolve, GaussianOracle1D)
{
    Grid<1> g(8.0, 1.0 / 64);
    const double Sigma = 0.3;
    const auto w = covariance(DiffusionCoefficient<1>::identity(), 0.0, 0.2);
    std::vector<double> f(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        f[i] = gaussian_density<1>(Mat<1>::Constant(Sigma), g.node(i));
    }
    const auto out = convolve(w, g, std::span<const double>(f), 1, 0);
    const auto grad = convolve(w, g, std::span<const double>(f), 1, 1);
    const Mat<1> S = Mat<1>::Constant(Sigma + 0.2);
    double err = 0.0, gerr = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        const Vec<1> x = g.node(i);
        err = std::max(err, std::abs(out[i] - gaussian_density<1>(S, x)));
        gerr = std::max(gerr, std::abs(grad[i] + x[0] / S(0, 0) * gaussian_density<1>(S, x)));
    }
    EXPECT_LE(err, 1e-6);
    EXPECT_LE(gerr, 1e-6);
}

TEST(Convolve, GaussianOracle2DCorrelated)
{
    Grid<2> g(4.0, 1.0 / 16);
    Mat<2> Sigma;
    Sigma << 0.4, 0.1, 0.1, 0.3;
    Mat<2> A;
    A << 0.12, 0.05, 0.05, 0.1;
    const auto w = covariance_from_matrix<2>(0.0, 0.1, A, 2.0);
    std::vector<double> f(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        f[i] = gaussian_density<2>(Sigma, g.node(i));
    }
    const auto out = convolve(w, g, std::span<const double>(f), 1, 0);
    const Mat<2> S = Sigma + A;
    double err = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        err = std::max(err, std::abs(out[i] - gaussian_density<2>(S, g.node(i))));
    }
    EXPECT_LE(err, 1e-6);

    // Same check on the separable path.
    const auto wd = covariance(DiffusionCoefficient<2>::identity(), 0.0, 0.1);
    const auto od = convolve(wd, g, std::span<const double>(f), 1, 0);
    const Mat<2> Sd = Sigma + 0.1 * Mat<2>::Identity();
    err = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        err = std::max(err, std::abs(od[i] - gaussian_density<2>(Sd, g.node(i))));
    }
    EXPECT_LE(err, 1e-6);
}

TEST(Convolve, ChapmanKolmogorov)
{
    Grid<1> g(6.0, 1.0 / 64);
    DiffusionCoefficient<1> sig;
    sig.constant = false;
    sig.theta = 2.0;
    sig.sigma = [](double t) { return Mat<1>::Constant(1.0 + 0.3 * std::sin(3 * t)); };
    std::vector<double> f(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        f[i] = gaussian_density<1>(Mat<1>::Constant(0.5), g.node(i));
    }
    const auto su = convolve(covariance(sig, 0.0, 0.3), g, std::span<const double>(f), 1, 0);
    const auto sut = convolve(covariance(sig, 0.3, 0.7), g, std::span<const double>(su), 1, 0);
    const auto st = convolve(covariance(sig, 0.0, 0.7), g, std::span<const double>(f), 1, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
        EXPECT_NEAR(sut[i], st[i], 1e-6);
    }
}

TEST(Convolve, DerivativeConsistencyIsSecondOrder)
{
    std::vector<double> errs;
    for (double h : {1.0 / 16, 1.0 / 32, 1.0 / 64}) {
        Grid<1> g(4.0, h);
        const auto w = covariance(DiffusionCoefficient<1>::identity(), 0.0, 0.1);
        std::vector<double> f(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            f[i] = std::sin(2.0 * g.node(i)[0]) + std::cos(g.node(i)[0]);
        }
        const auto u = convolve(w, g, std::span<const double>(f), 1, 0);
        const auto du = convolve(w, g, std::span<const double>(f), 1, 1);
        std::vector<double> fd(g.size());
        fd_gradient(g, std::span<const double>(u), 1, std::span<double>(fd));
        double e = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (std::abs(g.node(i)[0]) < 2.0) {
                e = std::max(e, std::abs(fd[i] - du[i]));
            }
        }
        errs.push_back(e);
    }
    EXPECT_GT(errs[0] / errs[1], 3.5);
    EXPECT_GT(errs[1] / errs[2], 3.5);
}

TEST(Convolve, OddFieldVanishesAtOrigin)
{
    Grid<2> g(2.0, 1.0 / 16);
    std::vector<double> f(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        const auto x = g.node(i);
        f[i] = std::sin(x[0]) * std::exp(-x[1] * x[1]) + x[1] * x[1] * x[1];
    }
    Mat<2> A;
    A << 0.1, 0.03, 0.03, 0.08;
    const auto out = convolve(covariance_from_matrix<2>(0.0, 0.1, A, 2.0), g, std::span<const double>(f), 1, 0);
    EXPECT_NEAR(out[g.flat_index({32, 32})], 0.0, 1e-14);
    EXPECT_NEAR(gauss_kernel(covariance_from_matrix<2>(0.0, 0.1, A, 2.0), Vec<2>(0.1, -0.2)),
                gauss_kernel(covariance_from_matrix<2>(0.0, 0.1, A, 2.0), Vec<2>(-0.1, 0.2)), 0.0);
}
