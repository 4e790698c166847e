#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "kdrop/kernels.hpp"

using namespace kdrop;

namespace {

KernelConfig cfg_of(KernelKind kind, bool concat = false) {
    KernelConfig c;
    c.kind = kind;
    c.concat_original = concat;
    return c;
}

double dot(const Vector &a, const Vector &b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

/// Mean |phi(x).phi(y) - k(x, y)| over random pairs in [-1, 1]^8.
template <typename Exact>
double rff_error(KernelKind kind, double gamma, std::size_t D, Exact exact, std::uint64_t seed = 0) {
    KernelConfig c = cfg_of(kind);
    c.gamma = gamma;
    c.rff_dim = D;
    c.rff_seed = seed;
    FeatureMap phi(c, 8);
    Stream rng = Stream::keyed(1234);
    double err = 0.0;
    for (int p = 0; p < 100; ++p) {
        Vector x(8), y(8);
        for (auto &v : x) v = 2.0 * rng.uniform() - 1.0;
        for (auto &v : y) v = 2.0 * rng.uniform() - 1.0;
        err += std::abs(dot(phi(x), phi(y)) - exact(x, y));
    }
    return err / 100.0;
}

double gaussian_kernel(const Vector &x, const Vector &y) {
    double d2 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) d2 += (x[i] - y[i]) * (x[i] - y[i]);
    return std::exp(-0.5 * d2);
}

double laplacian_kernel(const Vector &x, const Vector &y) {
    double d1 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) d1 += std::abs(x[i] - y[i]);
    return std::exp(-0.5 * d1);
}

} // namespace

TEST(KernelMap, SquaredIsElementwise) {
    const Vector x{2.0, -3.0};
    EXPECT_EQ(kernel_map(x, cfg_of(KernelKind::Squared)), (Vector{4.0, 9.0}));
}

TEST(KernelMap, SquaredConcatAppendsOriginal) {
    const Vector x{2.0, -3.0};
    EXPECT_EQ(kernel_map(x, cfg_of(KernelKind::Squared, true)), (Vector{4.0, 9.0, 2.0, -3.0}));
}

TEST(KernelMap, LinearIsIdentity) {
    const Vector x{0.1, -0.5, 7.0};
    EXPECT_EQ(kernel_map(x, cfg_of(KernelKind::Linear)), x);
}

TEST(KernelMap, SigmoidIsTanh) {
    auto c = cfg_of(KernelKind::Sigmoid);
    c.scale = 0.5;
    const auto out = kernel_map(Vector{1.0, -2.0}, c);
    EXPECT_DOUBLE_EQ(out[0], std::tanh(0.5));
    EXPECT_DOUBLE_EQ(out[1], std::tanh(-1.0));
}

TEST(KernelMap, RejectsEmptyAndNonFinite) {
    EXPECT_THROW(kernel_map(Vector{}, cfg_of(KernelKind::Squared)), DataError);
    try {
        kernel_map(Vector{1.0, std::numeric_limits<double>::quiet_NaN(), 2.0}, cfg_of(KernelKind::Squared));
        FAIL() << "expected DataError";
    } catch (const DataError &e) {
        EXPECT_NE(std::string(e.what()).find("index 1"), std::string::npos);
    }
    EXPECT_THROW(kernel_map(Vector{std::numeric_limits<double>::infinity()}, cfg_of(KernelKind::Linear)), DataError);
}

TEST(KernelMap, DimensionMismatch) {
    FeatureMap phi(cfg_of(KernelKind::Squared), 3);
    EXPECT_THROW(phi(Vector{1.0, 2.0}), DataError);
}

TEST(KernelConfig, Validation) {
    auto c = cfg_of(KernelKind::RbfRff);
    c.gamma = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c.gamma = 1.0;
    c.rff_dim = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_THROW(parse_kernel_kind("poly"), ConfigError);
    EXPECT_EQ(parse_kernel_kind("laplacian"), KernelKind::LaplacianRff);
}

TEST(OutputDim, Examples) {
    EXPECT_EQ(output_dim(cfg_of(KernelKind::Squared, false), 768), 768u);
    EXPECT_EQ(output_dim(cfg_of(KernelKind::Squared, true), 768), 1536u);
    auto rff = cfg_of(KernelKind::RbfRff, false);
    rff.rff_dim = 1024;
    EXPECT_EQ(output_dim(rff, 768), 1024u);
    rff.concat_original = true;
    EXPECT_EQ(output_dim(rff, 768), 1792u);
    EXPECT_THROW(output_dim(rff, 0), ConfigError);
}

TEST(OutputDim, MatchesMappedLength) {
    for (auto kind : {KernelKind::Squared, KernelKind::Linear, KernelKind::RbfRff, KernelKind::LaplacianRff,
                      KernelKind::Sigmoid})
        for (bool concat : {false, true}) {
            auto c = cfg_of(kind, concat);
            c.rff_dim = 33;
            EXPECT_EQ(kernel_map(Vector(5, 0.25), c).size(), output_dim(c, 5)) << to_string(kind);
        }
}

TEST(RandomFourierFeatures, GaussianKernelApproximation) {
    EXPECT_LT(rff_error(KernelKind::RbfRff, 0.5, 2048, gaussian_kernel), 0.05);
}

TEST(RandomFourierFeatures, LaplacianKernelApproximation) {
    EXPECT_LT(rff_error(KernelKind::LaplacianRff, 0.5, 2048, laplacian_kernel), 0.05);
}

TEST(RandomFourierFeatures, ErrorShrinksWithDimension) {
    double small = 0.0, large = 0.0;
    for (std::uint64_t s = 0; s < 5; ++s) {
        small += rff_error(KernelKind::RbfRff, 0.5, 64, gaussian_kernel, s);
        large += rff_error(KernelKind::RbfRff, 0.5, 1024, gaussian_kernel, s);
    }
    EXPECT_LT(large, small);
}

TEST(RandomFourierFeatures, FrozenBySeed) {
    auto c = cfg_of(KernelKind::RbfRff);
    c.rff_dim = 16;
    const Vector x{0.3, -0.2, 0.9};
    EXPECT_EQ(kernel_map(x, c), kernel_map(x, c));
    auto c2 = c;
    c2.rff_seed = 1;
    EXPECT_NE(kernel_map(x, c), kernel_map(x, c2));

    FeatureMap phi(c, 3);
    FeatureMap restored(c, 3, phi.frequencies(), phi.phases());
    EXPECT_EQ(phi(x), restored(x));
}
