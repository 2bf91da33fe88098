#include <gtest/gtest.h>

#include <cmath>

#include "icd/gradcheck.hpp"
#include "icd/nn.hpp"
#include "icd/params.hpp"

using namespace icd;

namespace {

void set_values(Tensor t, double v) {
    for (auto& x : t.data()) x = v;
}

}  // namespace

TEST(Linear, IdentityAndConstantMaps) {
    ParamGroup g(Group::student);
    Rng rng(1);
    Linear lin(g, "l", 3, 3, rng);
    set_values(lin.weight, 0.0);
    for (std::size_t i = 0; i < 3; ++i) lin.weight.data()[i * 3 + i] = 1.0;
    const Tensor x = Tensor::from({2, 3}, {1, -2, 3, 0.5, 0, 7});
    const Tensor y = lin.forward(x);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(y.at(i), x.at(i));

    set_values(lin.weight, 0.0);
    lin.bias.data()[0] = 4;
    lin.bias.data()[1] = -1;
    lin.bias.data()[2] = 2;
    const Tensor c = lin.forward(x);
    for (std::size_t r = 0; r < 2; ++r) {
        EXPECT_EQ(c.at(r, 0), 4);
        EXPECT_EQ(c.at(r, 1), -1);
        EXPECT_EQ(c.at(r, 2), 2);
    }
}

TEST(Linear, AcceptsVectorInputAndChecksWidth) {
    ParamGroup g(Group::student);
    Rng rng(2);
    Linear lin(g, "l", 4, 2, rng);
    EXPECT_EQ(lin.forward(Tensor::zeros({4})).shape(), (Shape{2}));
    EXPECT_THROW(lin.forward(Tensor::zeros({3, 5})), DimensionError);
}

TEST(Linear, GradientCheck) {
    ParamGroup g(Group::student);
    Rng rng(3);
    Linear lin(g, "l", 4, 3, rng);
    const Tensor x = Tensor::from({2, 4}, {0.1, -0.5, 0.3, 0.9, -1.2, 0.4, 0.0, 0.7});
    const Tensor w = Tensor::from({2, 3}, {1, -2, 0.5, 0.3, 1.5, -1});
    const auto r = finite_diff_check([&] { return sum(mul(lin.forward(x), w)); }, g, {.tol = 1e-6});
    EXPECT_TRUE(r.passed()) << r.max_error();
}

TEST(Linear, FrozenForwardKeepsWeightsOutOfTheGraph) {
    ParamGroup g(Group::decoder);
    Rng rng(4);
    Linear lin(g, "l", 3, 2, rng);
    const Tensor x = Tensor::from({1, 3}, {1, 2, 3}, true);
    sum(lin.forward_frozen(x)).backward();
    EXPECT_EQ(g.max_abs_grad(), 0.0);
    ASSERT_TRUE(x.has_grad());
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_DOUBLE_EQ(x.grad()[i], lin.weight.at(0 * 3 + i) + lin.weight.at(1 * 3 + i));
    }
}

TEST(Mlp3, ZeroWeightsGiveLastBias) {
    ParamGroup g(Group::student);
    Rng rng(5);
    Mlp3 mlp(g, "m", 3, 4, 2, rng);
    for (Linear* l : {&mlp.l1, &mlp.l2, &mlp.l3}) {
        set_values(l->weight, 0.0);
        set_values(l->bias, 0.0);
    }
    mlp.l3.bias.data()[0] = 0.7;
    mlp.l3.bias.data()[1] = -3;
    const Tensor y = mlp.forward(Tensor::from({2, 3}, {1, 2, 3, -4, 5, 6}));
    for (std::size_t r = 0; r < 2; ++r) {
        EXPECT_EQ(y.at(r, 0), 0.7);
        EXPECT_EQ(y.at(r, 1), -3);
    }
}

TEST(Mlp3, ReluTransparentOnPositiveActivations) {
    ParamGroup g(Group::student);
    Rng rng(6);
    Mlp3 mlp(g, "m", 2, 2, 2, rng);
    for (Linear* l : {&mlp.l1, &mlp.l2, &mlp.l3}) {
        set_values(l->weight, 0.0);
        set_values(l->bias, 0.0);
        l->weight.data()[0] = 2.0;
        l->weight.data()[3] = 3.0;
    }
    const Tensor y = mlp.forward(Tensor::from({1, 2}, {0.5, 1.5}));
    EXPECT_DOUBLE_EQ(y.at(0), 0.5 * 8.0);
    EXPECT_DOUBLE_EQ(y.at(1), 1.5 * 27.0);
}

TEST(Mlp3, GradientCheck) {
    ParamGroup g(Group::student);
    Rng rng(7);
    Mlp3 mlp(g, "m", 3, 5, 2, rng);
    const Tensor x = Tensor::from({2, 3}, {0.2, -0.4, 0.9, 1.1, 0.3, -0.8});
    const auto r = finite_diff_check([&] { return sum(square(mlp.forward(x))); }, g, {.tol = 1e-5});
    EXPECT_TRUE(r.passed()) << r.max_error();
}

TEST(Init, KaimingUniformBoundAndZeroBias) {
    ParamGroup g(Group::student);
    Rng rng(8);
    Linear lin(g, "l", 24, 16, rng);
    const double bound = std::sqrt(6.0 / 24.0);
    for (double w : lin.weight.data()) EXPECT_LE(std::fabs(w), bound);
    for (double b : lin.bias.data()) EXPECT_EQ(b, 0.0);
}

TEST(SinePosEmbed, ZeroGivesSinZeroCosOne) {
    const auto e = sine_pos_embed(0.0, 8);
    for (std::size_t k = 0; k < 8; k += 2) {
        EXPECT_EQ(e[k], 0.0);
        EXPECT_EQ(e[k + 1], 1.0);
    }
}

TEST(SinePosEmbed, ReferenceValues) {
    const auto e = sine_pos_embed(0.25, 4, 10000.0);
    ASSERT_EQ(e.size(), 4u);
    EXPECT_NEAR(e[0], 0.24740395925452294, 1e-15);
    EXPECT_NEAR(e[1], 0.9689124217106447, 1e-15);
    EXPECT_NEAR(e[2], 0.002499997395834147, 1e-15);
    EXPECT_NEAR(e[3], 0.9999968750016276, 1e-15);
}

TEST(SinePosEmbed, BoundedAndEvenWidth) {
    for (double u = 0.0; u <= 1.0; u += 0.01) {
        for (double v : sine_pos_embed(u, 16)) {
            EXPECT_LE(v, 1.0);
            EXPECT_GE(v, -1.0);
        }
    }
    EXPECT_THROW(sine_pos_embed(0.5, 3), DimensionError);
}

TEST(OneHot, Examples) {
    EXPECT_EQ(one_hot(2, 4), (std::vector<double>{0, 0, 1, 0}));
    EXPECT_EQ(one_hot(0, 1), (std::vector<double>{1}));
    for (std::size_t c = 0; c < 5; ++c) {
        double s = 0;
        for (double v : one_hot(c, 5)) s += v;
        EXPECT_EQ(s, 1.0);
    }
    EXPECT_THROW(one_hot(4, 4), std::out_of_range);
}

TEST(ParamGroup, RejectsDuplicatesAndTracksFreeze) {
    ParamGroup g(Group::teacher);
    const Tensor a = Tensor::zeros({2});
    g.add("a", a);
    EXPECT_TRUE(a.requires_grad());
    EXPECT_THROW(g.add("a", Tensor::zeros({1})), ContractError);
    EXPECT_THROW(g.add("b", a), ContractError);
    g.freeze();
    EXPECT_FALSE(a.requires_grad());
    ParamGroup other(Group::student);
    other.add("x", Tensor::zeros({1}));
    const ParamGroup* both[] = {&g, &other};
    EXPECT_TRUE(groups_disjoint(both));
}

TEST(ParamGroup, SharedTensorBreaksDisjointness) {
    ParamGroup a(Group::student), b(Group::decoder);
    const Tensor t = Tensor::zeros({3});
    a.add("t", t);
    b.add("t", t);
    const ParamGroup* both[] = {&a, &b};
    EXPECT_FALSE(groups_disjoint(both));
}

TEST(Optimizer, ZeroGradientAndDecayLeaveParamsUnchanged) {
    for (auto kind : {OptimizerKind::adamw, OptimizerKind::sgd_momentum}) {
        ParamGroup g(Group::student);
        const Tensor p = Tensor::from({3}, {1, -2, 3});
        g.add("p", p);
        p.impl()->grad.assign(3, 0.0);
        Optimizer opt({.kind = kind, .lr = 0.1, .weight_decay = 0.0}, g);
        for (int i = 0; i < 3; ++i) {
            p.impl()->grad.assign(3, 0.0);
            opt.step();
        }
        EXPECT_EQ(p.at(0), 1);
        EXPECT_EQ(p.at(1), -2);
        EXPECT_EQ(p.at(2), 3);
    }
}

TEST(Optimizer, AdamWTwoStepsByHand) {
    ParamGroup g(Group::decoder);
    const Tensor p = Tensor::scalar(1.0);
    g.add("p", p);
    Optimizer opt({.kind = OptimizerKind::adamw, .lr = 0.1, .weight_decay = 0.01}, g);
    p.impl()->grad.assign(1, 0.5);
    opt.step();
    EXPECT_NEAR(p.item(), 0.899000002, 1e-15);
    p.impl()->grad.assign(1, -0.2);
    opt.step();
    EXPECT_NEAR(p.item(), 0.8635404181145108, 1e-15);
    EXPECT_EQ(p.grad()[0], 0.0);
}

TEST(Optimizer, SgdMomentumByHand) {
    ParamGroup g(Group::student);
    const Tensor p = Tensor::scalar(2.0);
    g.add("p", p);
    Optimizer opt({.kind = OptimizerKind::sgd_momentum, .lr = 0.1, .weight_decay = 0.0, .momentum = 0.9}, g);
    p.impl()->grad.assign(1, 1.0);
    opt.step();  // m = 1
    EXPECT_DOUBLE_EQ(p.item(), 1.9);
    p.impl()->grad.assign(1, 1.0);
    opt.step();  // m = 1.9
    EXPECT_DOUBLE_EQ(p.item(), 1.9 - 0.19);
}

TEST(Optimizer, ClipsGlobalNormAcrossParameters) {
    ParamGroup g(Group::student);
    const Tensor p = Tensor::from({2}, {0.0, 0.0});
    const Tensor q = Tensor::scalar(0.0);
    g.add("p", p);
    g.add("q", q);
    Optimizer opt({.kind = OptimizerKind::sgd_momentum, .lr = 1.0, .weight_decay = 0.0, .momentum = 0.0,
                   .max_grad_norm = 1.0},
                  g);
    p.impl()->grad = {3.0, 0.0};
    q.impl()->grad = {4.0};
    opt.step();
    EXPECT_DOUBLE_EQ(opt.last_grad_norm(), 5.0);
    EXPECT_DOUBLE_EQ(p.at(0), -0.6);
    EXPECT_EQ(p.at(1), 0.0);
    EXPECT_DOUBLE_EQ(q.item(), -0.8);
    p.impl()->grad = {0.3, 0.0};
    q.impl()->grad = {0.4};
    opt.step();
    EXPECT_DOUBLE_EQ(opt.last_grad_norm(), 0.5);
    EXPECT_DOUBLE_EQ(p.at(0), -0.9);
    EXPECT_DOUBLE_EQ(q.item(), -1.2);
}

TEST(Optimizer, QuadraticBowlConverges) {
    ParamGroup g(Group::decoder);
    const Tensor x = Tensor::from({3}, {3.0, -2.0, 0.5});
    g.add("x", x);
    const Tensor c = Tensor::from({3}, {1.0, 1.0, -1.0});
    Optimizer opt({.kind = OptimizerKind::adamw, .lr = 0.05, .weight_decay = 0.0}, g);
    int steps = 0;
    double err = 1.0;
    for (; steps < 500 && err > 1e-6; ++steps) {
        scale(sum(square(sub(x, c))), 0.5).backward();
        opt.step();
        err = 0;
        for (std::size_t i = 0; i < 3; ++i) err = std::max(err, std::fabs(x.at(i) - c.at(i)));
    }
    EXPECT_LE(err, 1e-6) << "after " << steps << " steps";
}

TEST(Optimizer, StepClearsGradients) {
    ParamGroup g(Group::student);
    const Tensor p = Tensor::from({2}, {1.0, 2.0});
    g.add("p", p);
    Optimizer opt({}, g);
    sum(square(p)).backward();
    EXPECT_GT(g.max_abs_grad(), 0.0);
    opt.step();
    EXPECT_EQ(g.max_abs_grad(), 0.0);
}
