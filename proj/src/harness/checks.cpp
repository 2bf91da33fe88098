#include "icd/harness/checks.hpp"

#include <random>

#include "icd/harness/train.hpp"

namespace icd {

ExperimentConfig check_config() {
    ExperimentConfig c;
    c.image_size = 32;
    c.channels = 8;
    c.heads = 2;
    c.teacher_stem = 4;
    c.teacher_stage = 8;
    c.student_stem = 4;
    c.student_stage = 4;
    c.strides = {8, 16};
    c.fake_ratio = 2;
    return c;
}

CheckFixture make_check_fixture(std::uint64_t seed) {
    CheckFixture fx;
    fx.cfg = check_config();
    const ExperimentConfig& cfg = fx.cfg;
    const SceneConfig sc = scene_config(cfg);
    fx.scene = generate_scene(sc, seed);
    const auto scenes = generate_dataset(sc, 16, seed + 1);
    fx.stats = compute_stats(dataset_instances(scenes), cfg.num_classes, cfg.image_size);

    Rng rng(derive_seed(seed, 20));
    fx.teacher = std::make_unique<ToyDetector>(cfg.teacher_detector(), Group::teacher, rng);
    fx.teacher->params().freeze();
    fx.student = std::make_unique<ToyDetector>(cfg.student_detector(), Group::student, rng);
    fx.decoder = std::make_unique<InstanceDecoder>(cfg.decoder(), rng);
    fx.aux = std::make_unique<AuxHeads>(cfg.channels, rng);

    fx.teacher_flat = flatten_pyramid(fx.teacher->backbone_forward(fx.scene.image), cfg.effective_pos_dim(),
                                      cfg.temperature);
    const auto conds = build_condition_set(fx.scene.instances, fx.stats, cfg.fake_ratio, rng);
    std::vector<EncodedInstance> enc;
    for (const auto& y : conds) {
        enc.push_back(encode_instance(y, cfg.encoding(), rng));
        fx.conditions.push_back({y, enc.back().center});
    }
    fx.encodings = encoding_matrix(enc);
    return fx;
}

LossBundle CheckFixture::losses(const DistillOptions& opts, bool freeze_value_weights) const {
    const FeaturePyramid sp = student->backbone_forward(scene.image);
    const Tensor det = det_loss(student->head_forward(sp), scene.instances);
    const DecoderOutput out = decoder->forward(teacher_flat, encodings);
    const AuxLoss a = aux_loss(out.aggregated, conditions, *aux, cfg.aux_flags());
    const Tensor student_a = flatten_pyramid(sp, cfg.effective_pos_dim(), cfg.temperature).features;
    const auto vs = compute_values(decoder->last_layer(), student_a, freeze_value_weights);
    const auto flags = real_flags(conditions);
    const Tensor distill =
        distill_loss(out.knowledge, vs, std::span<const bool>(flags.get(), conditions.size()), opts).value;
    return total_loss(det, a, distill, cfg.lambda);
}

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = u(rng);
    return Tensor::from(shape, std::move(v), true);
}

// Magnitudes in [0.15, 0.4] or [0.6, 1.0] with random sign: clear of the
// kinks of relu/abs at 0 and of clamp at ±0.5.
Tensor kink_free_tensor(const Shape& shape, Rng& rng) {
    std::uniform_real_distribution<double> mag(0.15, 0.75);
    std::bernoulli_distribution neg(0.5);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) {
        double m = mag(rng);
        if (m > 0.4) m += 0.2;
        x = neg(rng) ? -m : m;
    }
    return Tensor::from(shape, std::move(v), true);
}

Tensor constant(const Shape& shape, Rng& rng) { return detach(random_tensor(shape, rng)); }

Tensor weighted_sum(const Tensor& x, const Tensor& w) { return sum(mul(x, w)); }

std::vector<NamedTensor> named(std::initializer_list<std::pair<const char*, Tensor>> ts) {
    std::vector<NamedTensor> out;
    for (const auto& [n, t] : ts) out.push_back({n, t});
    return out;
}

std::vector<NamedTensor> concat_params(std::initializer_list<const ParamGroup*> groups) {
    std::vector<NamedTensor> out;
    for (const auto* g : groups) {
        for (const auto& p : g->params()) out.push_back({std::string(g->name()) + "/" + p.name, p.tensor});
    }
    return out;
}

}  // namespace

std::vector<GradCheckReport> run_gradcheck_suite(std::uint64_t seed,
                                                 const std::function<void(const GradCheckReport&)>& on_report) {
    std::vector<GradCheckReport> reports;
    auto check = [&](const std::string& label, const std::function<Tensor()>& f,
                     const std::vector<NamedTensor>& params) {
        GradCheckReport r = finite_diff_check(f, params);
        r.label = label;
        for (auto p : params) p.tensor.zero_grad();
        if (on_report) on_report(r);
        reports.push_back(std::move(r));
    };

    Rng rng(derive_seed(seed, 30));
    {
        const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng), w = constant({3, 5}, rng);
        check("op.matmul", [=] { return weighted_sum(matmul(a, b), w); }, named({{"a", a}, {"b", b}}));
    }
    {
        const Tensor a = random_tensor({3, 4}, rng), w = constant({2, 6}, rng);
        check("op.transpose_reshape", [=] { return weighted_sum(reshape(transpose(a), {2, 6}), w); },
              named({{"a", a}}));
    }
    {
        const Tensor a = random_tensor({2, 3}, rng), b = random_tensor({2, 3}, rng), w = constant({2, 3}, rng);
        check("op.arithmetic",
              [=] { return weighted_sum(add_scalar(scale(mul(add(a, b), sub(a, b)), 2.5), 0.7), w); },
              named({{"a", a}, {"b", b}}));
    }
    {
        const Tensor x = kink_free_tensor({4, 5}, rng), w = constant({4, 5}, rng);
        check("op.elementwise",
              [=] {
                  const Tensor y = add(add(add(relu(x), sigmoid(x)), add(exp(scale(x, 0.3)), abs(x))),
                                       add(log(add_scalar(square(x), 1.0)), clamp(x, -0.5, 0.5)));
                  return weighted_sum(y, w);
              },
              named({{"x", x}}));
    }
    {
        const Tensor z = random_tensor({4, 6}, rng, -2.0, 2.0);
        std::vector<double> t(24, 0.0);
        for (std::size_t r = 0; r < 4; ++r) t[r * 6 + (r * 5) % 6] = 1.0;
        const Tensor target = Tensor::from({4, 6}, t);
        check("op.softmax_cross_entropy", [=] { return scale(sum(mul(target, log(softmax(z)))), -0.25); },
              named({{"z", z}}));
    }
    {
        const Tensor x = random_tensor({5}, rng);
        const Tensor c = constant({5}, rng);
        check("op.quadratic", [=] { return scale(sum(square(sub(x, c))), 0.5); }, named({{"x", x}}));
    }
    {
        const Tensor x = random_tensor({3, 6}, rng), w = constant({3, 6}, rng);
        check("op.layernorm", [=] { return weighted_sum(layernorm_pf(x), w); }, named({{"x", x}}));
    }
    {
        const Tensor x = random_tensor({3, 4}, rng), b = random_tensor({4}, rng), w = constant({3, 4}, rng);
        check("op.reductions_bias",
              [=] {
                  return add(add(mean(mul(add_row_bias(x, b), w)), sum(row_mean(square(x)))), sum(x));
              },
              named({{"x", x}, {"b", b}}));
    }
    {
        const Tensor a = random_tensor({4, 5}, rng), w1 = constant({6, 2}, rng), w2 = constant({2, 6}, rng);
        check("op.slice_concat",
              [=] {
                  const Tensor r = concat_rows({slice_rows(a, 0, 2), slice_rows(a, 3, 4), slice_rows(a, 1, 4)});
                  const Tensor c = concat_cols({slice_cols(a, 0, 2), slice_cols(a, 2, 5), slice_cols(a, 4, 5)});
                  return add(weighted_sum(slice_cols(r, 1, 3), w1), weighted_sum(slice_rows(c, 1, 3), w2));
              },
              named({{"a", a}}));
    }
    {
        const Tensor x = random_tensor({2, 6, 6}, rng), k = random_tensor({3, 2, 3, 3}, rng),
                     b = random_tensor({3}, rng), w = constant({3, 3, 3}, rng);
        check("op.conv2d", [=] { return weighted_sum(conv2d(x, k, b, 2, 1), w); },
              named({{"x", x}, {"weight", k}, {"bias", b}}));
    }
    {
        const Tensor z = random_tensor({3, 4}, rng, -3.0, 3.0);
        const Tensor t = detach(random_tensor({3, 4}, rng, 0.0, 1.0));
        check("op.bce_with_logits", [=] { return sum(bce_with_logits(z, t)); }, named({{"logits", z}}));
    }
    {
        ParamGroup g(Group::student);
        Linear lin(g, "linear", 5, 3, rng);
        const Tensor x = random_tensor({4, 5}, rng), w = constant({4, 3}, rng);
        std::vector<NamedTensor> ps = g.params();
        ps.push_back({"x", x});
        check("layer.linear", [&] { return weighted_sum(lin.forward(x), w); }, ps);
    }
    {
        ParamGroup g(Group::student);
        Mlp3 mlp(g, "mlp", 5, 7, 3, rng);
        const Tensor x = random_tensor({4, 5}, rng), w = constant({4, 3}, rng);
        check("layer.mlp3", [&] { return weighted_sum(mlp.forward(x), w); }, g.params());
    }

    const CheckFixture fx = make_check_fixture(seed);
    const ToyDetector& student = *fx.student;
    {
        DetectorConfig small = fx.cfg.student_detector();
        small.image_size = 16;
        small.strides = {8, 16};
        Rng det_rng(derive_seed(seed, 31));
        const ToyDetector det(small, Group::student, det_rng);
        const Tensor image = detach(random_tensor({3, 16, 16}, rng, 0.0, 1.0));
        const Tensor w0 = constant({small.channels, 2, 2}, rng), w1 = constant({small.channels, 1, 1}, rng);
        check("detector.backbone",
              [&] {
                  const FeaturePyramid p = det.backbone_forward(image);
                  return add(weighted_sum(p.levels[0].feat, w0), weighted_sum(p.levels[1].feat, w1));
              },
              concat_params({&det.params()}));
    }
    check("detector.det_loss",
          [&] { return det_loss(student.head_forward(student.backbone_forward(fx.scene.image)), fx.scene.instances); },
          concat_params({&student.params()}));

    const InstanceDecoder& decoder = *fx.decoder;
    const std::size_t n = fx.conditions.size(), L = fx.teacher_flat.length();
    const std::size_t D = fx.cfg.channels, d = decoder.config().head_dim();
    {
        const Tensor w = constant({n, D}, rng);
        check("decoder.query", [&] { return weighted_sum(make_query(fx.encodings, decoder.query_mlp()), w); },
              concat_params({&decoder.params()}));
    }
    {
        const Tensor w = constant({L, d}, rng);
        check("decoder.keys",
              [&] {
                  Tensor acc = Tensor::scalar(0.0);
                  for (const auto& k : compute_keys(decoder.last_layer(), fx.teacher_flat)) {
                      acc = add(acc, weighted_sum(k, w));
                  }
                  return acc;
              },
              concat_params({&decoder.params()}));
    }
    {
        const Tensor w = constant({n, L}, rng);
        check("decoder.attention_masks",
              [&] {
                  const Tensor q = make_query(fx.encodings, decoder.query_mlp());
                  const auto keys = compute_keys(decoder.last_layer(), fx.teacher_flat);
                  Tensor acc = Tensor::scalar(0.0);
                  for (const auto& m : attention_masks(keys, q, decoder.last_layer())) acc = add(acc, weighted_sum(m, w));
                  return acc;
              },
              concat_params({&decoder.params()}));
    }
    {
        const Tensor w = constant({n, D}, rng);
        check("decoder.aggregate",
              [&] { return weighted_sum(decoder.forward(fx.teacher_flat, fx.encodings).aggregated, w); },
              concat_params({&decoder.params()}));
    }
    check("loss.aux",
          [&] {
              const DecoderOutput out = decoder.forward(fx.teacher_flat, fx.encodings);
              return aux_loss(out.aggregated, fx.conditions, *fx.aux, fx.cfg.aux_flags()).sum();
          },
          concat_params({&decoder.params(), &fx.aux->params()}));
    check("loss.distill", [&] { return fx.losses().distill; }, concat_params({&student.params()}));
    check("loss.total.student", [&] { return fx.losses().total; }, concat_params({&student.params()}));
    check("loss.total.undetached",
          [&] { return fx.losses({false, false}, false).total; },
          concat_params({&student.params(), &decoder.params(), &fx.aux->params()}));
    return reports;
}

RoutingAudit run_routing_audit(std::uint64_t seed) {
    CheckFixture fx = make_check_fixture(seed);
    std::vector<ParamGroup*> groups{&fx.teacher->params(), &fx.student->params(), &fx.decoder->params(),
                                    &fx.aux->params()};
    RoutingAudit audit;
    audit.deployed = verify_gradient_routing(fx.losses(), groups);
    DistillOptions mutated;
    mutated.detach_masks = false;
    audit.mutated = verify_gradient_routing(fx.losses(mutated), groups);
    return audit;
}

}  // namespace icd
