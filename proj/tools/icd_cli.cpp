#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "icd/harness/checkpoint.hpp"
#include "icd/harness/checks.hpp"
#include "icd/harness/config.hpp"
#include "icd/harness/eval.hpp"
#include "icd/harness/heatmap.hpp"
#include "icd/harness/scene.hpp"
#include "icd/harness/train.hpp"

namespace fs = std::filesystem;
using namespace icd;

namespace {

struct Globals {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir = "out";
};

ExperimentConfig resolve_config(const Globals& g) {
    std::vector<std::string> defaulted;
    ExperimentConfig cfg;
    if (g.config_path.empty()) {
        defaulted = config_keys();
    } else {
        cfg = load_config(g.config_path, &defaulted);
    }
    if (g.seed) {
        cfg.seed = *g.seed;
        std::erase(defaulted, "seed");
    }
    if (!defaulted.empty()) {
        std::cerr << "config: " << defaulted.size() << " key(s) use defaults:";
        for (const auto& k : defaulted) std::cerr << ' ' << k;
        std::cerr << '\n';
    }
    cfg.validate();
    fs::create_directories(g.out_dir);
    return cfg;
}

std::string metrics_path(const Globals& g) { return (fs::path(g.out_dir) / "metrics.csv").string(); }

void print_row(const MetricsRow& r) { std::cerr << format_metrics_row(r) << '\n'; }

void save_decoder(const std::string& path, const StudentResult& r) {
    std::vector<NamedTensor> ts;
    for (const auto& p : r.decoder->params().params()) ts.push_back({"decoder/" + p.name, p.tensor});
    for (const auto& p : r.aux->params().params()) ts.push_back({"aux/" + p.name, p.tensor});
    save_checkpoint(path, ts);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_gen_data(const Globals& g, std::size_t preview) {
    const ExperimentConfig cfg = resolve_config(g);
    const ExperimentData data = make_data(cfg);
    save_checkpoint((fs::path(g.out_dir) / "stats.icdc").string(), stats_tensors(data.stats));
    const fs::path dir = fs::path(g.out_dir) / "scenes";
    fs::create_directories(dir);
    for (std::size_t i = 0; i < std::min(preview, data.train.size()); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "scene_%04zu.ppm", i);
        write_scene_ppm(data.train[i], (dir / name).string());
    }
    std::cout << "train scenes " << data.train.size() << ", eval scenes " << data.eval.size() << ", instances "
              << data.stats.total << '\n';
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
        std::printf("class %zu: count %zu, width %.2f±%.2f px, height %.2f±%.2f px\n", c, data.stats.class_freq[c],
                    data.stats.width_px[c].mean, data.stats.width_px[c].std, data.stats.height_px[c].mean,
                    data.stats.height_px[c].std);
    }
    return 0;
}

int cmd_train_teacher(const Globals& g) {
    const ExperimentConfig cfg = resolve_config(g);
    const auto t0 = std::chrono::steady_clock::now();
    const ExperimentData data = make_data(cfg);
    const TeacherResult r = train_teacher(cfg, data);
    for (const auto& row : r.rows) print_row(row);
    append_metrics(metrics_path(g), r.rows);
    const std::string path = (fs::path(g.out_dir) / "teacher.icdc").string();
    save_detector(path, *r.detector);
    std::printf("teacher toy-AP %.4f (%.1f s), saved %s\n", r.toy_ap, seconds_since(t0), path.c_str());
    return 0;
}

int cmd_distill(const Globals& g, const std::string& teacher_path) {
    const ExperimentConfig cfg = resolve_config(g);
    const auto t0 = std::chrono::steady_clock::now();
    const auto teacher = load_detector(teacher_path, Group::teacher);
    const ExperimentData data = make_data(cfg);
    const StudentResult r = distill_student(cfg, *teacher, data, cfg.baseline ? "baseline" : "student");
    for (const auto& row : r.rows) print_row(row);
    append_metrics(metrics_path(g), r.rows);
    save_detector((fs::path(g.out_dir) / "student.icdc").string(), *r.student);
    if (!cfg.baseline) save_decoder((fs::path(g.out_dir) / "decoder.icdc").string(), r);
    std::printf("student toy-AP %.4f (%.1f s, %zu tensors inherited)\n", r.toy_ap, seconds_since(t0), r.inherited);
    return 0;
}

int cmd_ablate(const Globals& g, const std::string& kind_name, const std::string& teacher_path) {
    const AblationKind kind = parse_ablation(kind_name);
    const ExperimentConfig cfg = resolve_config(g);
    const auto teacher = load_detector(teacher_path, Group::teacher);
    const ExperimentData data = make_data(cfg);
    const auto results = run_ablation(kind, cfg, *teacher, data, metrics_path(g), [](const std::string& run, double ap) {
        std::fprintf(stderr, "%s toy-AP %.4f\n", run.c_str(), ap);
    });
    const std::string table = (fs::path(g.out_dir) / ("ablate_" + kind_name + ".csv")).string();
    write_ablation_csv(table, results);
    for (const auto& r : results) std::printf("%-36s mean toy-AP %.4f over %zu seed(s)\n", r.label.c_str(), r.mean(), r.toy_ap.size());
    std::printf("wrote %s\n", table.c_str());
    return 0;
}

int cmd_export_attn(const Globals& g, const std::string& teacher_path, const std::string& decoder_path,
                    std::size_t scene_index, std::size_t instance, std::size_t head) {
    const ExperimentConfig cfg = resolve_config(g);
    const auto teacher = load_detector(teacher_path, Group::teacher);
    Rng init(0);
    InstanceDecoder decoder(cfg.decoder(), init);
    restore_group(decoder.params(), load_checkpoint(decoder_path), "decoder/");

    const Scene scene = generate_scene(scene_config(cfg), cfg.eval_seed + scene_index);
    if (instance >= scene.instances.size()) {
        throw std::out_of_range("scene " + std::to_string(scene_index) + " has " +
                                std::to_string(scene.instances.size()) + " instance(s)");
    }
    const FlatPyramid flat =
        flatten_pyramid(teacher->backbone_forward(scene.image), cfg.effective_pos_dim(), cfg.temperature);
    Rng rng(derive_seed(cfg.seed, 40));
    std::vector<EncodedInstance> enc;
    for (const auto& y : scene.instances) enc.push_back(encode_instance(y, cfg.encoding(), rng));
    const DecoderOutput out = decoder.forward(flat, encoding_matrix(enc));
    const std::string dir = (fs::path(g.out_dir) / "attn").string();
    for (const auto& p : export_attention(out.knowledge, flat.geometry, instance, head, dir)) std::cout << p << '\n';
    return 0;
}

int cmd_gradcheck(const Globals& g) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t seed = g.seed.value_or(3);
    bool ok = true;
    run_gradcheck_suite(seed, [&](const GradCheckReport& r) {
        ok = ok && r.passed();
        std::printf("%-4s %-28s max rel err %.3e%s%s\n", r.passed() ? "ok" : "FAIL", r.label.c_str(), r.max_error(),
                    r.aborted ? " aborted: " : "", r.diagnostic.c_str());
    });
    std::printf("gradcheck %s in %.1f s\n", ok ? "passed" : "FAILED", seconds_since(t0));
    return ok ? 0 : 1;
}

int cmd_routing(const Globals& g) {
    const RoutingAudit a = run_routing_audit(g.seed.value_or(3));
    std::cout << "deployed graph:\n" << a.deployed.to_string() << "mask-detach removed:\n" << a.mutated.to_string();
    std::cout << "routing " << (a.deployed.passed() ? "clean" : "LEAKS") << "; mutation "
              << (a.mutated.passed() ? "NOT detected" : "detected") << '\n';
    return a.passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Instance-conditional distillation toolkit"};
    app.require_subcommand(1);
    Globals g;
    std::uint64_t seed = 0;
    app.add_option("--config", g.config_path, "key = value config file")->check(CLI::ExistingFile);
    auto* seed_opt = app.add_option("--seed", seed, "override the experiment seed");
    app.add_option("--out-dir", g.out_dir, "output directory")->capture_default_str();

    std::size_t preview = 4;
    auto* gen = app.add_subcommand("gen-data", "generate scenes and dataset statistics");
    gen->add_option("--preview", preview, "scenes written as PPM")->capture_default_str();

    app.add_subcommand("train-teacher", "train the teacher detector");

    std::string teacher_path;
    auto* distill = app.add_subcommand("distill", "distill a student from a teacher checkpoint");
    distill->add_option("--teacher", teacher_path, "teacher checkpoint (default <out-dir>/teacher.icdc)");

    std::string kind;
    auto* ablate = app.add_subcommand("ablate", "run an ablation sweep");
    ablate->add_option("kind", kind, "attention|heads|aux|lambda|cascade")
        ->required()
        ->check(CLI::IsMember({"attention", "heads", "aux", "lambda", "cascade"}));
    ablate->add_option("--teacher", teacher_path, "teacher checkpoint (default <out-dir>/teacher.icdc)");

    std::string decoder_path;
    std::size_t scene_index = 0, instance = 0, head = 0;
    auto* exp = app.add_subcommand("export-attn", "write attention heatmaps for one instance and head");
    exp->add_option("--teacher", teacher_path, "teacher checkpoint (default <out-dir>/teacher.icdc)");
    exp->add_option("--decoder", decoder_path, "decoder checkpoint (default <out-dir>/decoder.icdc)");
    exp->add_option("--scene", scene_index, "evaluation scene index")->capture_default_str();
    exp->add_option("--instance", instance, "instance index in the scene")->capture_default_str();
    exp->add_option("--head", head, "attention head")->capture_default_str();

    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    auto* routing = app.add_subcommand("routing-check", "audit gradient routing between parameter groups");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }
    if (*seed_opt) g.seed = seed;
    auto in_out = [&](const std::string& p, const char* file) {
        return p.empty() ? (fs::path(g.out_dir) / file).string() : p;
    };

    try {
        if (*gen) return cmd_gen_data(g, preview);
        if (app.got_subcommand("train-teacher")) return cmd_train_teacher(g);
        if (*distill) return cmd_distill(g, in_out(teacher_path, "teacher.icdc"));
        if (*ablate) return cmd_ablate(g, kind, in_out(teacher_path, "teacher.icdc"));
        if (*exp) {
            return cmd_export_attn(g, in_out(teacher_path, "teacher.icdc"), in_out(decoder_path, "decoder.icdc"),
                                   scene_index, instance, head);
        }
        if (*grad) return cmd_gradcheck(g);
        if (*routing) return cmd_routing(g);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
