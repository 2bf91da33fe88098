#include "icd/harness/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>

#include "icd/harness/eval.hpp"

namespace icd {

std::string format_metrics_row(const MetricsRow& row) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g,%.10g,", row.iter, row.loss_det, row.loss_aux_idf,
                  row.loss_aux_reg, row.loss_distill);
    std::string line = row.run + "," + buf;
    if (row.toy_ap) {
        std::snprintf(buf, sizeof buf, "%.10g", *row.toy_ap);
        line += buf;
    }
    return line;
}

void append_metrics(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::error_code ec;
    const bool fresh = !std::filesystem::exists(path, ec) || std::filesystem::file_size(path, ec) == 0;
    std::ofstream out(path, std::ios::app);
    if (!out) throw std::runtime_error("cannot append to metrics file '" + path + "'");
    if (fresh) out << kMetricsHeader << '\n';
    for (const auto& r : rows) out << format_metrics_row(r) << '\n';
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

ExperimentData make_data(const ExperimentConfig& cfg) {
    cfg.validate();
    const SceneConfig sc = scene_config(cfg);
    ExperimentData d;
    d.train = generate_dataset(sc, cfg.train_scenes, cfg.data_seed);
    d.eval = generate_dataset(sc, cfg.eval_scenes, cfg.eval_seed);
    const auto instances = dataset_instances(d.train);
    d.stats = compute_stats(instances, cfg.num_classes, cfg.image_size);
    return d;
}

namespace {

// Running means of the logged losses between two log points.
struct LossMeter {
    double det = 0, idf = 0, reg = 0, distill = 0;
    std::size_t n = 0;

    void add(double d, double i, double r, double s) {
        det += d;
        idf += i;
        reg += r;
        distill += s;
        ++n;
    }

    MetricsRow flush(const std::string& run, std::size_t iter) {
        const double k = n ? 1.0 / static_cast<double>(n) : 0.0;
        MetricsRow row{run, iter, det * k, idf * k, reg * k, distill * k, std::nullopt};
        *this = {};
        return row;
    }
};

bool log_now(std::size_t it, std::size_t iters, std::size_t every) {
    return it + 1 == iters || (every > 0 && (it + 1) % every == 0);
}

void check_finite(double v, const char* what, std::size_t it, const ExperimentConfig& cfg) {
    if (std::isfinite(v)) return;
    throw TrainingDiverged(std::string(what) + " became non-finite at iteration " + std::to_string(it) +
                           " (seed=" + std::to_string(cfg.seed) + ", teacher_seed=" +
                           std::to_string(cfg.teacher_seed) + ", data_seed=" + std::to_string(cfg.data_seed) +
                           ")");
}

void check_teacher(const ExperimentConfig& cfg, const ToyDetector& teacher) {
    const DetectorConfig want = cfg.teacher_detector();
    const DetectorConfig& got = teacher.config();
    if (got.image_size != want.image_size || got.channels != want.channels ||
        got.num_classes != want.num_classes || got.strides != want.strides ||
        got.in_channels != want.in_channels) {
        throw ConfigError("teacher checkpoint does not match the experiment config "
                          "(image_size, channels, num_classes or strides differ)");
    }
    if (!teacher.params().frozen()) throw ContractError("distill_student expects a frozen teacher");
}

std::vector<Center> cell_centers(const FlatPyramid& flat, std::size_t image_size) {
    std::vector<Center> out;
    out.reserve(flat.length());
    const double img = static_cast<double>(image_size);
    for (const auto& c : flat.index) {
        const double s = static_cast<double>(flat.geometry[c.level].stride);
        out.push_back({(static_cast<double>(c.x) + 0.5) * s / img, (static_cast<double>(c.y) + 0.5) * s / img});
    }
    return out;
}

std::vector<double> normalized_or_uniform(std::vector<double> w) {
    double total = 0.0;
    for (double v : w) total += v;
    if (!(total > 0.0)) return std::vector<double>(w.size(), 1.0 / static_cast<double>(w.size()));
    for (double& v : w) v /= total;
    return w;
}

}  // namespace

TeacherResult train_teacher(const ExperimentConfig& cfg, const ExperimentData& data, const std::string& run) {
    cfg.validate();
    if (data.train.empty()) throw ContractError("train_teacher: empty training set");
    TeacherResult res;
    Rng init(derive_seed(cfg.teacher_seed, 1));
    res.detector = std::make_unique<ToyDetector>(cfg.teacher_detector(), Group::teacher, init);
    ToyDetector& det = *res.detector;
    Optimizer opt(cfg.detector_optimizer(cfg.lr_teacher), det.params());
    Rng pick_rng(derive_seed(cfg.teacher_seed, 2));
    std::uniform_int_distribution<std::size_t> pick(0, data.train.size() - 1);

    LossMeter meter;
    const double inv_b = 1.0 / static_cast<double>(cfg.batch);
    for (std::size_t it = 0; it < cfg.teacher_iters; ++it) {
        opt.config().lr = cfg.detector_lr(cfg.lr_teacher, it, cfg.teacher_iters);
        double det_sum = 0.0;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const Scene& s = data.train[pick(pick_rng)];
            Tensor loss = det_loss(det.head_forward(det.backbone_forward(s.image)), s.instances);
            det_sum += loss.item();
            check_finite(loss.item(), "teacher det loss", it, cfg);
            scale(loss, inv_b).backward();
        }
        opt.step();
        meter.add(det_sum * inv_b, 0, 0, 0);
        if (log_now(it, cfg.teacher_iters, cfg.log_every)) res.rows.push_back(meter.flush(run, it + 1));
    }
    det.params().freeze();
    res.toy_ap = evaluate_toy_ap(det, data.eval);
    MetricsRow last = res.rows.empty() ? MetricsRow{run, 0, 0, 0, 0, 0, std::nullopt} : res.rows.back();
    if (!res.rows.empty()) res.rows.pop_back();
    last.toy_ap = res.toy_ap;
    res.rows.push_back(last);
    return res;
}

StudentResult distill_student(const ExperimentConfig& cfg, const ToyDetector& teacher, const ExperimentData& data,
                              const std::string& run) {
    cfg.validate();
    check_teacher(cfg, teacher);
    if (data.train.empty()) throw ContractError("distill_student: empty training set");

    StudentResult res;
    Rng student_init(derive_seed(cfg.seed, 10));
    res.student = std::make_unique<ToyDetector>(cfg.student_detector(), Group::student, student_init);
    Rng decoder_init(derive_seed(cfg.seed, 11));
    res.decoder = std::make_unique<InstanceDecoder>(cfg.decoder(), decoder_init);
    res.aux = std::make_unique<AuxHeads>(cfg.channels, decoder_init);
    ToyDetector& student = *res.student;
    const InstanceDecoder& decoder = *res.decoder;
    const AuxHeads& aux = *res.aux;
    if (cfg.inherit) res.inherited = inherit_parameters(student, teacher);

    Optimizer student_opt(cfg.detector_optimizer(cfg.lr_student), student.params());
    Optimizer decoder_opt(cfg.decoder_optimizer(), res.decoder->params());
    Optimizer aux_opt(cfg.decoder_optimizer(), res.aux->params());

    Rng pick_rng(derive_seed(cfg.seed, 12));
    Rng cond_rng(derive_seed(cfg.seed, 13));
    std::uniform_int_distribution<std::size_t> pick(0, data.train.size() - 1);
    const EncodingConfig enc_cfg = cfg.encoding();
    const AuxTaskFlags flags = cfg.aux_flags();
    const std::size_t pos_dim = cfg.effective_pos_dim();

    LossMeter meter;
    const double inv_b = 1.0 / static_cast<double>(cfg.batch);
    for (std::size_t it = 0; it < cfg.student_iters; ++it) {
        const bool distill_on = !cfg.baseline && cfg.lambda > 0.0 && it >= cfg.warmup;
        student_opt.config().lr = cfg.detector_lr(cfg.lr_student, it, cfg.student_iters);
        double sums[4] = {0, 0, 0, 0};
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const Scene& s = data.train[pick(pick_rng)];
            const FeaturePyramid student_p = student.backbone_forward(s.image);
            const Tensor det = det_loss(student.head_forward(student_p), s.instances);

            AuxLoss aux_l;
            Tensor distill = Tensor::scalar(0.0);
            if (!cfg.baseline) {
                const FlatPyramid teacher_flat =
                    flatten_pyramid(teacher.backbone_forward(s.image), pos_dim, cfg.temperature);
                const auto cond_instances =
                    build_condition_set(s.instances, data.stats, cfg.fake_ratio, cond_rng);
                std::vector<EncodedInstance> enc;
                std::vector<Condition> conds;
                enc.reserve(cond_instances.size());
                for (const auto& y : cond_instances) {
                    enc.push_back(encode_instance(y, enc_cfg, cond_rng));
                    conds.push_back({y, enc.back().center});
                }
                DecoderOutput out = decoder.forward(teacher_flat, encoding_matrix(enc));
                aux_l = aux_loss(out.aggregated, conds, aux, flags);

                if (distill_on) {
                    Knowledge k = out.knowledge;
                    if (cfg.attention != AttentionVariant::icd) {
                        k.masks = variant_masks(cfg.attention, teacher_flat, cond_instances, k.heads(),
                                                cfg.image_size);
                    }
                    const Tensor student_a = flatten_pyramid(student_p, pos_dim, cfg.temperature).features;
                    const auto vs = compute_values(decoder.last_layer(), student_a, cfg.freeze_value_weights);
                    const auto is_real = real_flags(conds);
                    distill = distill_loss(k, vs, std::span<const bool>(is_real.get(), conds.size())).value;
                }
            }
            const LossBundle bundle = total_loss(det, aux_l, distill, cfg.lambda);
            const double vals[4] = {det.item(), aux_l.idf.item(), aux_l.reg.item(), distill.item()};
            for (int q = 0; q < 4; ++q) sums[q] += vals[q];
            check_finite(bundle.total.item(), "student total loss", it, cfg);
            scale(bundle.total, inv_b).backward();
        }
        student_opt.step();
        if (!cfg.baseline) {
            decoder_opt.step();
            aux_opt.step();
        }
        meter.add(sums[0] * inv_b, sums[1] * inv_b, sums[2] * inv_b, sums[3] * inv_b);
        if (log_now(it, cfg.student_iters, cfg.log_every)) res.rows.push_back(meter.flush(run, it + 1));
    }
    res.toy_ap = evaluate_toy_ap(student, data.eval);
    MetricsRow last = res.rows.empty() ? MetricsRow{run, 0, 0, 0, 0, 0, std::nullopt} : res.rows.back();
    if (!res.rows.empty()) res.rows.pop_back();
    last.toy_ap = res.toy_ap;
    res.rows.push_back(last);
    return res;
}

std::vector<Tensor> variant_masks(AttentionVariant variant, const FlatPyramid& teacher,
                                  std::span<const Instance> conditions, std::size_t heads,
                                  std::size_t image_size) {
    const std::size_t L = teacher.length();
    if (L == 0) throw DimensionError("variant_masks: empty pyramid");
    std::vector<double> row(L, 1.0);
    const auto centers = cell_centers(teacher, image_size);
    switch (variant) {
        case AttentionVariant::icd:
            throw ContractError("variant_masks: icd masks are learned, not fixed");
        case AttentionVariant::none:
            break;
        case AttentionVariant::foreground:
            for (std::size_t l = 0; l < L; ++l) {
                const bool inside = std::any_of(conditions.begin(), conditions.end(), [&](const Instance& y) {
                    return y.is_real && centers[l].x >= y.box.x1() && centers[l].x <= y.box.x2() &&
                           centers[l].y >= y.box.y1() && centers[l].y <= y.box.y2();
                });
                row[l] = inside ? 1.0 : 0.0;
            }
            break;
        case AttentionVariant::fine_grained: {
            // Each cell carries a square anchor of side 2·stride; a cell belongs to an
            // instance when its anchor IoU reaches half of that instance's best IoU.
            std::fill(row.begin(), row.end(), 0.0);
            std::vector<Box> anchors;
            for (std::size_t l = 0; l < L; ++l) {
                const double side = 2.0 * static_cast<double>(teacher.geometry[teacher.index[l].level].stride) /
                                    static_cast<double>(image_size);
                anchors.push_back({centers[l].x, centers[l].y, side, side});
            }
            for (const auto& y : conditions) {
                if (!y.is_real) continue;
                std::vector<double> ious(L);
                for (std::size_t l = 0; l < L; ++l) ious[l] = iou(anchors[l], y.box);
                const double best = *std::max_element(ious.begin(), ious.end());
                if (!(best > 0.0)) continue;
                for (std::size_t l = 0; l < L; ++l) {
                    if (ious[l] >= 0.5 * best) row[l] = 1.0;
                }
            }
            break;
        }
        case AttentionVariant::activation: {
            const std::size_t D = teacher.features.size(1);
            const auto a = teacher.features.data();
            double hi = -INFINITY;
            for (std::size_t l = 0; l < L; ++l) {
                double m = 0.0;
                for (std::size_t c = 0; c < D; ++c) m += std::fabs(a[l * D + c]);
                row[l] = m / static_cast<double>(D);
                hi = std::max(hi, row[l]);
            }
            for (double& v : row) v = std::exp(v - hi);
            break;
        }
    }
    row = normalized_or_uniform(std::move(row));
    const std::size_t n = conditions.size();
    std::vector<double> full;
    full.reserve(n * L);
    for (std::size_t i = 0; i < n; ++i) full.insert(full.end(), row.begin(), row.end());
    std::vector<Tensor> out;
    for (std::size_t j = 0; j < heads; ++j) out.push_back(Tensor::from({n, L}, full));
    return out;
}

AblationKind parse_ablation(std::string_view name) {
    for (auto k : {AblationKind::attention, AblationKind::heads, AblationKind::aux, AblationKind::lambda,
                   AblationKind::cascade}) {
        if (ablation_name(k) == name) return k;
    }
    throw ConfigError("unknown ablation '" + std::string(name) + "'");
}

std::string_view ablation_name(AblationKind kind) {
    switch (kind) {
        case AblationKind::attention: return "attention";
        case AblationKind::heads: return "heads";
        case AblationKind::aux: return "aux";
        case AblationKind::lambda: return "lambda";
        case AblationKind::cascade: return "cascade";
    }
    return "?";
}

std::vector<AblationSetting> ablation_settings(AblationKind kind, const ExperimentConfig& base) {
    std::vector<AblationSetting> out;
    auto with = [&](std::string label, auto&& edit) {
        ExperimentConfig c = base;
        edit(c);
        out.push_back({std::move(label), std::move(c)});
    };
    switch (kind) {
        case AblationKind::attention:
            for (auto v : {AttentionVariant::icd, AttentionVariant::none, AttentionVariant::foreground,
                           AttentionVariant::fine_grained, AttentionVariant::activation}) {
                with(std::string(variant_name(v)), [v](ExperimentConfig& c) { c.attention = v; });
            }
            break;
        case AblationKind::heads:
            for (std::size_t m : {1, 4, 8}) {
                with("heads=" + std::to_string(m), [m](ExperimentConfig& c) { c.heads = m; });
            }
            break;
        case AblationKind::aux:
            with("baseline", [](ExperimentConfig& c) { c.baseline = true; });
            with("identification", [](ExperimentConfig& c) {
                c.aux_identification = true;
                c.aux_localization = false;
                c.use_scale = false;
            });
            with("localization", [](ExperimentConfig& c) {
                c.aux_identification = false;
                c.aux_localization = true;
                c.use_scale = false;
            });
            with("localization+scale", [](ExperimentConfig& c) {
                c.aux_identification = false;
                c.aux_localization = true;
                c.use_scale = true;
            });
            with("identification+localization+scale", [](ExperimentConfig& c) {
                c.aux_identification = true;
                c.aux_localization = true;
                c.use_scale = true;
            });
            break;
        case AblationKind::lambda:
            for (double l : {2.0, 6.0, 12.0}) {
                char buf[32];
                std::snprintf(buf, sizeof buf, "lambda=%g", l);
                with(buf, [l](ExperimentConfig& c) { c.lambda = l; });
            }
            break;
        case AblationKind::cascade:
            for (std::size_t n : {1, 2, 4}) {
                with("cascade=" + std::to_string(n), [n](ExperimentConfig& c) { c.cascade = n; });
            }
            break;
    }
    return out;
}

double AblationResult::mean() const {
    if (toy_ap.empty()) return 0.0;
    double s = 0.0;
    for (double v : toy_ap) s += v;
    return s / static_cast<double>(toy_ap.size());
}

std::vector<AblationResult> run_ablation(AblationKind kind, const ExperimentConfig& cfg, const ToyDetector& teacher,
                                         const ExperimentData& data, const std::string& metrics,
                                         const std::function<void(const std::string&, double)>& on_run) {
    const auto settings = ablation_settings(kind, cfg);
    for (const auto& s : settings) s.cfg.validate();
    std::vector<AblationResult> results;
    for (const auto& s : settings) {
        AblationResult r{s.label, {}};
        for (std::size_t k = 0; k < cfg.ablation_seeds; ++k) {
            ExperimentConfig c = s.cfg;
            c.seed = cfg.seed + k;
            const std::string run = std::string(ablation_name(kind)) + ":" + s.label + ":seed" + std::to_string(c.seed);
            const StudentResult sr = distill_student(c, teacher, data, run);
            if (!metrics.empty()) append_metrics(metrics, sr.rows);
            r.toy_ap.push_back(sr.toy_ap);
            if (on_run) on_run(run, sr.toy_ap);
        }
        results.push_back(std::move(r));
    }
    return results;
}

void write_ablation_csv(const std::string& path, const std::vector<AblationResult>& results) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write ablation table '" + path + "'");
    out << "setting,seeds,mean_toy_ap,toy_ap_per_seed\n";
    char buf[64];
    for (const auto& r : results) {
        std::snprintf(buf, sizeof buf, "%.10g", r.mean());
        out << r.label << ',' << r.toy_ap.size() << ',' << buf << ',';
        for (std::size_t i = 0; i < r.toy_ap.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%.10g", r.toy_ap[i]);
            out << (i ? ";" : "") << buf;
        }
        out << '\n';
    }
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace icd
