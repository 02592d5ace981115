#ifndef DFADAPT_ADAPT_HPP
#define DFADAPT_ADAPT_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "dfadapt/backbone.hpp"
#include "dfadapt/datagen.hpp"
#include "dfadapt/feature_store.hpp"
#include "dfadapt/losses.hpp"

namespace dfadapt {

enum class Method { FReTAL, KD, FT };

const char* method_name(Method m);
Method method_from_name(const std::string& name);

enum class StoreRefresh { PerEpoch, PerBatch };

// Source-domain training of the teacher. The optimizer settings here are
// independent of the adaptation ones: the teacher trains from random
// initialization at this scale, which wants a gentler learning rate.
struct TeacherConfig {
    double lr = 0.02;
    double momentum = 0.9;
    int max_epochs = 40;
    int patience = 8;
    int batch_size = 32;
    std::uint64_t seed = 0;
    bool cutmix_enabled = true;
    double cutmix_prob = 0.5;
    double cutmix_alpha = 1.0;
    double min_source_f1 = 0.90; // below this the teacher is rejected
    int threads = 4;
};

struct AdaptationConfig {
    BinSpec bins;      // lambda_a 0.5, lambda_b 1.0, step 0.1
    LossConfig loss;   // T = 20, rho = (1, 1, 1)
    double lr = 0.05;
    double momentum = 0.1;
    int max_epochs = 100;
    int patience = 5;
    int batch_size = 32;
    std::uint64_t seed = 0;
    Method method = Method::FReTAL;
    StoreRefresh store_refresh = StoreRefresh::PerEpoch;
    bool cutmix_enabled = true;
    double cutmix_prob = 0.5;
    double cutmix_alpha = 1.0;
    // Default bins student samples by the student's own confidence; the
    // alternative keeps bin membership pinned to the teacher's confidences.
    bool bin_by_teacher_confidence = false;
    // Per-sample norm cap on the feature gradient injected by the storage
    // loss; 0 disables. Keeps sparse cells from destabilizing training.
    double fsl_grad_clip = 0.25;
    // Global L2 clamp on each SGD step's gradient; 0 disables.
    double max_grad_norm = 1.5;
    int adapt_groups = 10;
    int threads = 4;

    // Scaling factors actually applied: FT -> (0,0,1), KD -> (0,1,0).
    LossConfig effective_loss() const;
    void validate() const;
};

struct EpochRecord {
    int epoch = 0;
    // Loss decomposition over the full adaptation set, measured at the start
    // of the epoch (before that epoch's updates). Terms a method does not use
    // are NaN and omitted from the CSV.
    double fsl = 0.0, kd = 0.0, ce = 0.0, total = 0.0;
    double val_f1 = 0.0; // target validation F1 after the epoch's updates
    double seconds = 0.0;
};

struct TrainingTrace {
    std::vector<EpochRecord> epochs;
    std::string stop_reason; // "patience" or "max-epochs"
    int best_epoch = -1;
    double best_val_f1 = 0.0;
    long source_audit_count = 0; // non-target samples seen; must be 0
    std::string teacher_hash_before;
    std::string teacher_hash_after;
};

// Stops once the best value has not improved by more than 1e-6 for
// `patience` consecutive epochs.
class EarlyStopper {
public:
    explicit EarlyStopper(int patience);
    // Returns true if training should stop after this observation.
    bool record(double metric);
    double best() const { return best_; }
    int stale_epochs() const { return stale_; }

private:
    int patience_;
    int stale_ = 0;
    double best_ = -1.0;
};

struct AdaptResult {
    Model student;
    TrainingTrace trace;
};

// Cross-entropy training (with CutMix) on the source teacher-train split,
// early-stopped on source validation F1. Returns a frozen model; throws
// ProtocolError if the validation F1 stays below cfg.min_source_f1.
Model train_teacher(const DomainDataset& source, const TeacherConfig& cfg);

// Full adaptation on the target's 10-group adapt split: student initialized
// from the teacher, teacher store built once, per-epoch student refresh,
// early stopping on target validation F1. Only target-domain samples are
// touched; the loader audits this.
AdaptResult adapt_student(const Model& teacher, const DomainDataset& target,
                          const AdaptationConfig& cfg);

void write_trace_csv(const TrainingTrace& trace, Method method, const std::string& path);

} // namespace dfadapt

#endif
