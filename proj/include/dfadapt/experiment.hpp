#ifndef DFADAPT_EXPERIMENT_HPP
#define DFADAPT_EXPERIMENT_HPP

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "dfadapt/adapt.hpp"
#include "dfadapt/datagen.hpp"

namespace dfadapt {

struct DomainConfig {
    DomainSpec spec;
    GenConfig gen;
};

// Parsed experiment description. JSON keys mirror the struct fields; unknown
// keys are rejected and omitted keys take the defaults above.
struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::vector<std::uint64_t> adaptation_seeds; // empty -> just `seed`
    std::string out;
    std::vector<DomainConfig> domains;
    std::vector<std::pair<std::string, std::string>> pairs; // source -> target
    std::vector<Method> methods = {Method::FT, Method::KD, Method::FReTAL};
    TeacherConfig teacher;
    AdaptationConfig adaptation;
    int threads = 4;
};

ExperimentConfig parse_config_json(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);

const DomainConfig& find_domain(const ExperimentConfig& cfg, const std::string& name);

// Deterministic per-domain dataset as described by the config.
DomainDataset materialize_domain(const ExperimentConfig& cfg, const std::string& name);

// Teacher for a domain, cached as a checkpoint under <out>/teachers/.
// `cached` reports whether the checkpoint was reused.
Model get_or_train_teacher(const ExperimentConfig& cfg, const std::string& domain,
                           const DomainDataset& dataset, bool* cached = nullptr);

struct RunSummary {
    std::string source, target;
    Method method = Method::FT;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    double source_f1 = 0.0, target_f1 = 0.0, avg_f1 = 0.0;
};

// Full grid: per (pair, method, adaptation seed) trains/loads the teacher,
// adapts, evaluates on both test splits, and writes checkpoints, traces,
// reports, per-run plots and summary tables under cfg.out. Failed cells are
// recorded with an error status; remaining cells continue.
std::vector<RunSummary> run_experiment(const ExperimentConfig& cfg);

// Teachers for every configured domain evaluated on every domain's test
// split; writes <out>/zero_shot.csv.
Eigen::MatrixXd run_zero_shot(const ExperimentConfig& cfg);

// Threshold checks over the artifacts in an output directory (summary.csv,
// optional zero_shot.csv). Returns false and fills `details` on failure.
struct CheckThresholds {
    double ft_margin = 0.03;       // fretal avg must beat ft avg by this
    double diag_min = 0.95;        // zero-shot diagonal floor
    double offdiag_gap = 0.20;     // diagonal minus off-diagonal floor
};
bool check_reports(const std::string& out_dir, const CheckThresholds& thresholds,
                   std::string* details);

// Default artifact root: $DFADAPT_OUT_ROOT if set, else "runs".
std::string default_out_root();

// Line plot of per-epoch losses and validation F1 as a static SVG.
void write_trace_svg(const TrainingTrace& trace, Method method, const std::string& path);

} // namespace dfadapt

#endif
