#include <gtest/gtest.h>

#include <cmath>

#include "icd/harness/checks.hpp"
#include "icd/losses.hpp"

using namespace icd;

namespace {

Tensor randn(const Shape& s, Rng& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> v(shape_numel(s));
    for (auto& x : v) x = n(rng);
    return Tensor::from(s, std::move(v));
}

Tensor random_masks(std::size_t n, std::size_t len, Rng& rng) { return softmax(randn({n, len}, rng)); }

// Teacher knowledge with random masks/values and matching student values.
struct DistillCase {
    Knowledge teacher;
    std::vector<Tensor> student;
};

DistillCase random_case(std::size_t heads, std::size_t n, std::size_t len, std::size_t d, Rng& rng) {
    DistillCase c;
    for (std::size_t j = 0; j < heads; ++j) {
        c.teacher.masks.push_back(random_masks(n, len, rng));
        c.teacher.values.push_back(randn({len, d}, rng));
        c.student.push_back(randn({len, d}, rng));
    }
    return c;
}

// Parameter-free normalization of one row, written out directly.
std::vector<double> norm_row(const Tensor& t, std::size_t r) {
    const std::size_t d = t.size(1);
    double m = 0, v = 0;
    for (std::size_t c = 0; c < d; ++c) m += t.at(r, c);
    m /= d;
    for (std::size_t c = 0; c < d; ++c) v += (t.at(r, c) - m) * (t.at(r, c) - m);
    v /= d;
    std::vector<double> out(d);
    for (std::size_t c = 0; c < d; ++c) out[c] = (t.at(r, c) - m) / std::sqrt(v + kLayerNormEps);
    return out;
}

Instance box_instance(double x1, double y1, double x2, double y2, bool real = true) {
    Instance y;
    y.box = Box::from_corners(x1, y1, x2, y2);
    y.is_real = real;
    return y;
}

}  // namespace

TEST(Identification, MaxEntropyPredictionIsLn2) {
    const bool flags[] = {true, false, false, true};
    EXPECT_NEAR(identification_loss(Tensor::full({4}, 0.5), flags).item(), std::log(2.0), 1e-15);
}

TEST(Identification, TwoInstanceReference) {
    const bool flags[] = {true, false};
    EXPECT_NEAR(identification_loss(Tensor::from({2}, {0.8, 0.3}), flags).item(), 0.2899092476264711, 1e-15);
}

TEST(Identification, PerfectPredictionsAreClamped) {
    const bool flags[] = {true, false};
    const double l = identification_loss(Tensor::from({2}, {1.0, 0.0}), flags).item();
    EXPECT_TRUE(std::isfinite(l));
    EXPECT_LT(l, 1e-6);
    const double worst = identification_loss(Tensor::from({2}, {0.0, 1.0}), flags).item();
    EXPECT_NEAR(worst, -std::log(kBceClamp), 1e-6);
}

TEST(Regression, SymmetricAndOffsetCenters) {
    const Instance y = box_instance(0.2, 0.2, 0.6, 0.6);
    const auto a = regression_targets(y, {0.4, 0.4});
    for (double v : a.ltrb) EXPECT_NEAR(v, 0.2, 1e-15);
    const auto b = regression_targets(y, {0.3, 0.4});
    EXPECT_NEAR(b.ltrb[0], 0.1, 1e-15);
    EXPECT_NEAR(b.ltrb[1], 0.2, 1e-15);
    EXPECT_NEAR(b.ltrb[2], 0.3, 1e-15);
    EXPECT_NEAR(b.ltrb[3], 0.2, 1e-15);
}

TEST(Regression, SidesSumToBoxSizeOnDyadicGrid) {
    Rng rng(1);
    std::uniform_int_distribution<int> coord(0, 1 << 16);
    const double unit = 1.0 / (1 << 16);
    for (int k = 0; k < 1000; ++k) {
        int a = coord(rng), b = coord(rng), c = coord(rng), d = coord(rng);
        if (a == b) ++b;
        if (c == d) ++d;
        const Instance y = box_instance(std::min(a, b) * unit, std::min(c, d) * unit, std::max(a, b) * unit,
                                        std::max(c, d) * unit);
        const Center ctr{coord(rng) * unit, coord(rng) * unit};
        const auto t = regression_targets(y, ctr);
        EXPECT_EQ(t.ltrb[0] + t.ltrb[2], t.w);
        EXPECT_EQ(t.ltrb[1] + t.ltrb[3], t.h);
    }
}

TEST(Regression, SidesSumToBoxSizeExactlyForRandomJitteredInstances) {
    Rng rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int k = 0; k < 1000; ++k) {
        const double x1 = u(rng) * 0.5, y1 = u(rng) * 0.5;
        const Box b = Box::from_corners(x1, y1, x1 + 0.01 + u(rng) * 0.49, y1 + 0.01 + u(rng) * 0.49);
        const Instance y = make_instance(0, b, 64, true);
        const Center ctr = jitter_center(y.box, 0.3, rng);
        const auto t = regression_targets(y, ctr);
        EXPECT_EQ(t.ltrb[0] + t.ltrb[2], t.w);
        EXPECT_EQ(t.ltrb[1] + t.ltrb[3], t.h);
    }
}

TEST(Localization, OffsetOnEverySide) {
    const Instance y = box_instance(0.2, 0.2, 0.6, 0.6);
    const RegressionTarget t = regression_targets(y, {0.4, 0.4});
    const bool flags[] = {true};
    const Tensor pred = Tensor::from({1, 4}, {0.24, 0.24, 0.24, 0.24});
    const MaskedLoss l = localization_loss(pred, std::span(&t, 1), flags);
    EXPECT_NEAR(l.value.item(), 0.4, 1e-12);
    EXPECT_EQ(l.count, 1u);
}

TEST(Localization, PerfectPredictionIsZero) {
    const RegressionTarget t = regression_targets(box_instance(0.1, 0.3, 0.5, 0.4), {0.2, 0.35});
    const bool flags[] = {true};
    const Tensor pred = Tensor::from({1, 4}, {t.ltrb[0], t.ltrb[1], t.ltrb[2], t.ltrb[3]});
    EXPECT_EQ(localization_loss(pred, std::span(&t, 1), flags).value.item(), 0.0);
}

TEST(Localization, FakePredictionsAreIgnored) {
    const std::vector<RegressionTarget> t{regression_targets(box_instance(0.1, 0.1, 0.5, 0.5), {0.3, 0.3}),
                                          regression_targets(box_instance(0.6, 0.6, 0.9, 0.8), {0.7, 0.7})};
    const bool flags[] = {true, false};
    Rng rng(3);
    const Tensor p1 = randn({2, 4}, rng);
    Tensor p2 = p1.clone();
    for (std::size_t k = 4; k < 8; ++k) p2.data()[k] += 10.0 * static_cast<double>(k);
    EXPECT_EQ(localization_loss(p1, t, flags).value.item(), localization_loss(p2, t, flags).value.item());
}

TEST(Localization, AllFakeBatchIsZero) {
    const std::vector<RegressionTarget> t(3, regression_targets(box_instance(0.1, 0.1, 0.5, 0.5), {0.3, 0.3}));
    const bool flags[] = {false, false, false};
    Rng rng(4);
    const MaskedLoss l = localization_loss(randn({3, 4}, rng), t, flags);
    EXPECT_TRUE(l.empty());
    EXPECT_EQ(l.value.item(), 0.0);
}

TEST(AuxLoss, AllFakeBatchHasNoRegressionTerm) {
    Rng rng(5);
    AuxHeads heads(8, rng);
    std::vector<Condition> conds;
    for (int i = 0; i < 4; ++i) conds.push_back({box_instance(0.1, 0.1, 0.4, 0.3, false), {0.2, 0.2}});
    const AuxLoss l = aux_loss(randn({4, 8}, rng), conds, heads);
    EXPECT_EQ(l.reg.item(), 0.0);
    EXPECT_GT(l.idf.item(), 0.0);
}

TEST(AuxLoss, SubTaskFlagsSelectTerms) {
    Rng rng(6);
    AuxHeads heads(8, rng);
    std::vector<Condition> conds{{box_instance(0.1, 0.1, 0.4, 0.3), {0.2, 0.2}},
                                 {box_instance(0.5, 0.5, 0.9, 0.7, false), {0.6, 0.6}}};
    const Tensor g = randn({2, 8}, rng);
    const AuxLoss both = aux_loss(g, conds, heads);
    const AuxLoss idf = aux_loss(g, conds, heads, {.identification = true, .localization = false});
    const AuxLoss reg = aux_loss(g, conds, heads, {.identification = false, .localization = true});
    EXPECT_EQ(idf.reg.item(), 0.0);
    EXPECT_EQ(reg.idf.item(), 0.0);
    EXPECT_EQ(idf.idf.item(), both.idf.item());
    EXPECT_EQ(reg.reg.item(), both.reg.item());
}

TEST(Distill, ZeroWhenStudentMatchesTeacher) {
    Rng rng(7);
    DistillCase c = random_case(4, 3, 20, 8, rng);
    const bool flags[] = {true, false, true};
    std::vector<Tensor> same;
    for (const auto& v : c.teacher.values) same.push_back(v.clone());
    EXPECT_EQ(distill_loss(c.teacher, same, flags).value.item(), 0.0);
}

TEST(Distill, NonNegative) {
    Rng rng(8);
    for (int k = 0; k < 50; ++k) {
        DistillCase c = random_case(2, 4, 9, 4, rng);
        const bool flags[] = {true, true, false, true};
        EXPECT_GE(distill_loss(c.teacher, c.student, flags).value.item(), 0.0);
    }
}

TEST(Distill, UniformMasksReduceToMeanRowwiseMse) {
    Rng rng(9);
    const std::size_t heads = 3, n = 5, len = 17, d = 4;
    DistillCase c = random_case(heads, n, len, d, rng);
    for (auto& m : c.teacher.masks) m = Tensor::full({n, len}, 1.0 / len);
    const bool flags[] = {true, false, true, true, false};
    double ref = 0.0;
    for (std::size_t j = 0; j < heads; ++j) {
        for (std::size_t l = 0; l < len; ++l) {
            const auto s = norm_row(c.student[j], l), t = norm_row(c.teacher.values[j], l);
            double mse = 0;
            for (std::size_t k = 0; k < d; ++k) mse += (s[k] - t[k]) * (s[k] - t[k]);
            ref += mse / d;
        }
    }
    ref /= static_cast<double>(heads * len);
    EXPECT_NEAR(distill_loss(c.teacher, c.student, flags).value.item(), ref, 1e-10);
}

TEST(Distill, FakeMasksDoNotMatter) {
    Rng rng(10);
    DistillCase c = random_case(2, 3, 12, 4, rng);
    const bool flags[] = {true, false, true};
    const double a = distill_loss(c.teacher, c.student, flags).value.item();
    for (auto& m : c.teacher.masks) {
        auto& data = m.impl()->data;
        for (std::size_t l = 0; l < 12; ++l) data[12 + l] = l == 5 ? 1.0 : 0.0;
    }
    EXPECT_EQ(distill_loss(c.teacher, c.student, flags).value.item(), a);
}

TEST(Distill, InvariantToInstanceAndHeadOrder) {
    Rng rng(11);
    DistillCase c = random_case(3, 3, 10, 4, rng);
    const bool flags[] = {true, false, true};
    const double a = distill_loss(c.teacher, c.student, flags).value.item();

    DistillCase h = c;
    std::swap(h.teacher.masks[0], h.teacher.masks[2]);
    std::swap(h.teacher.values[0], h.teacher.values[2]);
    std::swap(h.student[0], h.student[2]);
    EXPECT_NEAR(distill_loss(h.teacher, h.student, flags).value.item(), a, 1e-14);

    DistillCase p = c;
    for (auto& m : p.teacher.masks) m = concat_rows({slice_rows(m, 2, 3), slice_rows(m, 1, 2), slice_rows(m, 0, 1)});
    EXPECT_NEAR(distill_loss(p.teacher, p.student, flags).value.item(), a, 1e-14);
}

TEST(Distill, NoRealInstancesGivesEmptyLoss) {
    Rng rng(12);
    DistillCase c = random_case(2, 2, 5, 4, rng);
    const bool flags[] = {false, false};
    const MaskedLoss l = distill_loss(c.teacher, c.student, flags);
    EXPECT_TRUE(l.empty());
    EXPECT_EQ(l.value.item(), 0.0);
}

TEST(Distill, ShapeMismatchIsAConfigError) {
    Rng rng(13);
    DistillCase c = random_case(2, 2, 5, 4, rng);
    c.student[1] = randn({5, 2}, rng);
    const bool flags[] = {true, true};
    EXPECT_THROW(distill_loss(c.teacher, c.student, flags), ConfigError);
}

TEST(Distill, TeacherValuesReceiveNoGradient) {
    Rng rng(14);
    DistillCase c = random_case(2, 3, 6, 4, rng);
    for (auto& v : c.teacher.values) v.set_requires_grad(true);
    for (auto& m : c.teacher.masks) m.set_requires_grad(true);
    for (auto& s : c.student) s.set_requires_grad(true);
    const bool flags[] = {true, true, false};
    distill_loss(c.teacher, c.student, flags).value.backward();
    auto max_grad = [](const Tensor& t) {
        double g = 0;
        for (double v : t.grad()) g = std::max(g, std::fabs(v));
        return g;
    };
    for (const auto& v : c.teacher.values) EXPECT_EQ(max_grad(v), 0.0);
    for (const auto& m : c.teacher.masks) EXPECT_EQ(max_grad(m), 0.0);
    EXPECT_GT(max_grad(c.student[0]), 0.0);
}

TEST(TotalLoss, WeightedSum) {
    AuxLoss aux;
    aux.idf = Tensor::scalar(0.3);
    aux.reg = Tensor::scalar(0.2);
    const LossBundle b = total_loss(Tensor::scalar(1.0), aux, Tensor::scalar(0.25), 8.0);
    EXPECT_DOUBLE_EQ(b.total.item(), 3.5);
    const LossBundle z = total_loss(Tensor::scalar(1.0), aux, Tensor::scalar(0.25), 0.0);
    EXPECT_DOUBLE_EQ(z.total.item(), 1.5);
}

TEST(Routing, DeployedGraphIsCleanAndMutationLeaks) {
    const RoutingAudit a = run_routing_audit(5);
    EXPECT_TRUE(a.deployed.passed()) << a.deployed.to_string();
    EXPECT_FALSE(a.mutated.passed()) << a.mutated.to_string();
    bool leak_into_decoder = false;
    for (const auto& c : a.mutated.cells) leak_into_decoder |= c.loss == "distill" && c.group == "decoder" && !c.ok();
    EXPECT_TRUE(leak_into_decoder);
}

TEST(Routing, ForbiddenCellsAreExactlyZero) {
    const CheckFixture fx = make_check_fixture(6);
    LossBundle b = fx.losses();
    ParamGroup* groups[] = {&fx.teacher->params(), &fx.student->params(), &fx.decoder->params(), &fx.aux->params()};
    const RoutingReport r = verify_gradient_routing(b, groups);
    std::size_t zero_cells = 0;
    for (const auto& c : r.cells) {
        if (!c.must_be_zero) continue;
        ++zero_cells;
        EXPECT_EQ(c.max_abs_grad, 0.0) << c.loss << " -> " << c.group << " via " << c.worst_param;
    }
    EXPECT_EQ(zero_cells, 8u);
    // allowed paths actually carry gradient
    for (const auto& c : r.cells) {
        if (c.loss == "det" && c.group == "student") {
            EXPECT_GT(c.max_abs_grad, 0.0);
        }
        if (c.loss == "aux" && c.group == "decoder") {
            EXPECT_GT(c.max_abs_grad, 0.0);
        }
        if (c.loss == "distill" && c.group == "student") {
            EXPECT_GT(c.max_abs_grad, 0.0);
        }
    }
}
