#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "icd/decoder.hpp"
#include "icd/harness/config.hpp"
#include "icd/harness/scene.hpp"
#include "icd/losses.hpp"
#include "icd/pyramid.hpp"

namespace icd {

inline constexpr const char* kMetricsHeader =
    "run,iter,loss_det,loss_aux_idf,loss_aux_reg,loss_distill,toy_ap";

struct MetricsRow {
    std::string run;
    std::size_t iter = 0;
    double loss_det = 0.0, loss_aux_idf = 0.0, loss_aux_reg = 0.0, loss_distill = 0.0;
    std::optional<double> toy_ap;  // only on evaluation rows
};

std::string format_metrics_row(const MetricsRow& row);
// Appends rows, writing the header first when the file is new or empty.
void append_metrics(const std::string& path, const std::vector<MetricsRow>& rows);

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Splitmix-style derivation of independent stream seeds from one seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

struct ExperimentData {
    std::vector<Scene> train;
    std::vector<Scene> eval;
    DatasetStats stats;
};

ExperimentData make_data(const ExperimentConfig& cfg);

struct TeacherResult {
    std::unique_ptr<ToyDetector> detector;
    std::vector<MetricsRow> rows;
    double toy_ap = 0.0;
};

// Dense detector trained with det_loss alone for cfg.teacher_iters.
TeacherResult train_teacher(const ExperimentConfig& cfg, const ExperimentData& data,
                            const std::string& run = "teacher");

struct StudentResult {
    std::unique_ptr<ToyDetector> student;
    std::unique_ptr<InstanceDecoder> decoder;
    std::unique_ptr<AuxHeads> aux;
    std::vector<MetricsRow> rows;
    double toy_ap = 0.0;
    std::size_t inherited = 0;
};

/// Joint loop: det + aux every iteration, λ·distill after the warm-up.
/// Student parameters step on det and distill gradients; decoder and aux
/// parameters step on aux gradients. With cfg.baseline only det is used.
StudentResult distill_student(const ExperimentConfig& cfg, const ToyDetector& teacher,
                              const ExperimentData& data, const std::string& run = "student");

// Fixed masks of the non-learned variants, one [N×L] matrix per head.
// Every row sums to 1.
std::vector<Tensor> variant_masks(AttentionVariant variant, const FlatPyramid& teacher,
                                  std::span<const Instance> conditions, std::size_t heads,
                                  std::size_t image_size);

enum class AblationKind { attention, heads, aux, lambda, cascade };
AblationKind parse_ablation(std::string_view name);
std::string_view ablation_name(AblationKind kind);

struct AblationSetting {
    std::string label;
    ExperimentConfig cfg;
};
std::vector<AblationSetting> ablation_settings(AblationKind kind, const ExperimentConfig& base);

struct AblationResult {
    std::string label;
    std::vector<double> toy_ap;  // one per seed
    double mean() const;
};

// Runs every setting over cfg.ablation_seeds shared seeds. Per-run logs go
// to `metrics` (if non-empty); `on_run` sees each finished run.
std::vector<AblationResult> run_ablation(
    AblationKind kind, const ExperimentConfig& cfg, const ToyDetector& teacher, const ExperimentData& data,
    const std::string& metrics = "",
    const std::function<void(const std::string&, double)>& on_run = {});

// `setting,seeds,mean_toy_ap,toy_ap_per_seed` table.
void write_ablation_csv(const std::string& path, const std::vector<AblationResult>& results);

}  // namespace icd
