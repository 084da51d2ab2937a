#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "ldm/nn/adam.hpp"
#include "ldm/nn/layers.hpp"

using namespace ldm;
using namespace ldm::nn;

namespace {

FeatureMap random_map(int channels, int batch, const Spatial& sp, std::uint64_t seed)
{
    Rng rng(seed);
    std::normal_distribution<double> g;
    auto fm = FeatureMap::zeros(channels, batch, sp);
    for (Eigen::Index i = 0; i < fm.x.size(); ++i)
        fm.x.data()[i] = g(rng);
    return fm;
}

// Loss = <weights, layer(input)>; checks input and parameter gradients.
void check_layer(Layer& layer, FeatureMap input, std::uint64_t seed)
{
    const auto out = layer.forward(input, true);
    auto weights = random_map(out.channels(), out.batch, out.spatial, seed);
    auto loss = [&](const FeatureMap& in) { return layer.forward(in, true).x.cwiseProduct(weights.x).sum(); };

    for (auto* p : layer.params())
        p->zero_grad();
    layer.forward(input, true);
    const auto grad_in = layer.backward(weights);
    ASSERT_EQ(grad_in.x.rows(), input.x.rows());
    ASSERT_EQ(grad_in.x.cols(), input.x.cols());

    constexpr double h = 1e-6;
    for (Eigen::Index i = 0; i < input.x.size(); i += 7) {
        const double keep = input.x.data()[i];
        input.x.data()[i] = keep + h;
        const double up = loss(input);
        input.x.data()[i] = keep - h;
        const double down = loss(input);
        input.x.data()[i] = keep;
        EXPECT_NEAR(grad_in.x.data()[i], (up - down) / (2 * h), 1e-6 * (1 + std::abs(grad_in.x.data()[i])));
    }
    for (auto* p : layer.params()) {
        const Matrix analytic = p->grad;
        for (Eigen::Index i = 0; i < p->value.size(); ++i) {
            const double keep = p->value.data()[i];
            p->value.data()[i] = keep + h;
            const double up = loss(input);
            p->value.data()[i] = keep - h;
            const double down = loss(input);
            p->value.data()[i] = keep;
            EXPECT_NEAR(analytic.data()[i], (up - down) / (2 * h), 1e-6 * (1 + std::abs(analytic.data()[i])))
                << p->name;
        }
    }
}

} // namespace

TEST(Layers, ConvGradients2dAnd3d)
{
    Rng rng(1);
    Conv c2("c2", 3, 4, 2, true, rng);
    check_layer(c2, random_map(3, 2, Spatial::from_dims({5, 4}), 2), 3);
    Conv c3("c3", 2, 3, 3, false, rng);
    check_layer(c3, random_map(2, 2, Spatial::from_dims({3, 4, 3}), 4), 5);
}

TEST(Layers, ConvMatchesDirectStencil)
{
    Rng rng(6);
    Conv conv("c", 2, 3, 2, true, rng);
    const auto sp = Spatial::from_dims({4, 5});
    const auto in = random_map(2, 2, sp, 7);
    const auto out = conv.forward(in, false);
    const auto params = conv.params();
    const Matrix& w = params[0]->value;
    const Matrix& b = params[1]->value;
    for (int n = 0; n < 2; ++n)
        for (int o = 0; o < 3; ++o)
            for (int y = 0; y < 4; ++y)
                for (int x = 0; x < 5; ++x) {
                    double acc = b(o, 0);
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int yy = y + dy, xx = x + dx;
                            if (yy < 0 || yy >= 4 || xx < 0 || xx >= 5)
                                continue;
                            const int tap = (dy + 1) * 3 + (dx + 1);
                            for (int c = 0; c < 2; ++c)
                                acc += w(o, tap * 2 + c) * in.x(c, n * 20 + yy * 5 + xx);
                        }
                    EXPECT_NEAR(out.x(o, n * 20 + y * 5 + x), acc, 1e-12);
                }
}

TEST(Layers, BatchNormGradientsAndEvalMode)
{
    BatchNorm bn("bn", 3);
    auto in = random_map(3, 4, Spatial::from_dims({2, 3}), 8);
    check_layer(bn, in, 9);

    BatchNorm fresh("bn2", 2);
    auto x = random_map(2, 5, Spatial::from_dims({2, 2}), 10);
    x.x.array() += 3.0;
    const auto y = fresh.forward(x, true);
    for (int c = 0; c < 2; ++c) {
        EXPECT_NEAR(y.x.row(c).mean(), 0.0, 1e-12);
        EXPECT_NEAR((y.x.row(c).array().square()).mean(), 1.0, 1e-3);
    }
    const auto buffers = fresh.buffers();
    const double mean0 = x.x.row(0).mean();
    EXPECT_NEAR(buffers[0]->value(0, 0), 0.1 * mean0, 1e-12);
    const double m = static_cast<double>(x.x.cols());
    const double var_unbiased = (x.x.row(0).array() - mean0).square().sum() / (m - 1);
    EXPECT_NEAR(buffers[1]->value(0, 0), 0.9 + 0.1 * var_unbiased, 1e-12);
    // Evaluation mode normalises with the running statistics.
    const auto e = fresh.forward(x, false);
    EXPECT_NEAR(e.x(0, 0), (x.x(0, 0) - buffers[0]->value(0, 0)) / std::sqrt(buffers[1]->value(0, 0) + 1e-5), 1e-12);
}

TEST(Layers, GeluValuesAndGradient)
{
    Gelu g;
    auto in = FeatureMap::zeros(1, 1, Spatial::from_dims({3}));
    in.x << -1.0, 0.0, 2.0;
    const auto out = g.forward(in, false);
    EXPECT_NEAR(out.x(0, 0), -0.15865525393145707, 1e-14);
    EXPECT_EQ(out.x(0, 1), 0.0);
    EXPECT_NEAR(out.x(0, 2), 1.9544997361036416, 1e-14);
    check_layer(g, random_map(2, 2, Spatial::from_dims({3, 3}), 11), 12);
}

TEST(Layers, PoolAndUpsample)
{
    AvgPool pool;
    auto in = FeatureMap::zeros(1, 1, Spatial::from_dims({2, 4}));
    in.x << 1, 2, 3, 4, 5, 6, 7, 8;
    const auto p = pool.forward(in, false);
    EXPECT_EQ(p.spatial.size(), 2);
    EXPECT_DOUBLE_EQ(p.x(0, 0), 3.5);
    EXPECT_DOUBLE_EQ(p.x(0, 1), 5.5);
    check_layer(pool, random_map(2, 2, Spatial::from_dims({4, 4, 2}), 13), 14);

    Upsample up;
    const auto u = up.forward(p, false);
    EXPECT_EQ(u.spatial, in.spatial);
    EXPECT_DOUBLE_EQ(u.x(0, 0), 3.5);
    EXPECT_DOUBLE_EQ(u.x(0, 5), 3.5);
    EXPECT_DOUBLE_EQ(u.x(0, 7), 5.5);
    check_layer(up, random_map(2, 2, Spatial::from_dims({2, 3}), 15), 16);
}

TEST(Layers, ConcatCoordsAppendsAffineChannels)
{
    const auto sp = Spatial::from_dims({3, 2});
    ConcatCoords cc(sp);
    const auto in = random_map(1, 2, sp, 17);
    const auto out = cc.forward(in, false);
    ASSERT_EQ(out.channels(), 3);
    EXPECT_EQ(out.x(1, 0), -1.0);
    EXPECT_EQ(out.x(1, 5), 1.0);
    EXPECT_EQ(out.x(2, 0), -1.0);
    EXPECT_EQ(out.x(2, 1), 1.0);
    EXPECT_EQ(out.x(0, 7), in.x(0, 7));
    check_layer(cc, in, 18);
}

TEST(Layers, LinearAndFlatten)
{
    Rng rng(19);
    Linear lin("l", 4, 3, rng);
    Matrix x = Matrix::Random(4, 5);
    const Matrix y = lin.forward(x);
    EXPECT_TRUE(y.isApprox((lin.weight().value * x).colwise() + lin.bias().value.col(0)));
    Matrix g = Matrix::Random(3, 5);
    lin.weight().zero_grad();
    lin.bias().zero_grad();
    const Matrix gx = lin.backward(g);
    EXPECT_TRUE(gx.isApprox(lin.weight().value.transpose() * g));
    EXPECT_TRUE(lin.weight().grad.isApprox(g * x.transpose()));

    const auto fm = random_map(3, 2, Spatial::from_dims({2, 2}), 20);
    const Matrix flat = flatten(fm);
    EXPECT_EQ(flat.rows(), 12);
    EXPECT_EQ(flat(1 * 4 + 2, 1), fm.x(1, 1 * 4 + 2));
    EXPECT_EQ(unflatten(flat, 3, fm.spatial).x, fm.x);
}

TEST(AdamTest, FirstStepIsLearningRateSized)
{
    Param p("p", 2, 1);
    p.value << 1.0, -1.0;
    Adam adam({&p}, {});
    p.grad << 0.3, -7.0;
    adam.step();
    EXPECT_NEAR(p.value(0, 0), 1.0 - 1e-3, 1e-9);
    EXPECT_NEAR(p.value(1, 0), -1.0 + 1e-3, 1e-9);
    EXPECT_EQ(adam.steps(), 1);
}

TEST(AdamTest, MinimisesQuadratic)
{
    Param p("p", 1, 1);
    p.value << 5.0;
    AdamOptions o;
    o.lr = 0.1;
    Adam adam({&p}, o);
    for (int i = 0; i < 500; ++i) {
        adam.zero_grad();
        p.grad(0, 0) = 2 * (p.value(0, 0) - 2.0);
        adam.step();
    }
    EXPECT_NEAR(p.value(0, 0), 2.0, 1e-2);
}
