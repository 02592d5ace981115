#ifndef DFADAPT_LOSSES_HPP
#define DFADAPT_LOSSES_HPP

#include <Eigen/Dense>
#include <vector>

#include "dfadapt/feature_store.hpp"

namespace dfadapt {

// Temperature and the scaling factors for the feature-storage, distillation
// and cross-entropy terms.
struct LossConfig {
    double temperature = 20.0;
    double rho_fsl = 1.0;
    double rho_kd = 1.0;
    double rho_ce = 1.0;

    void validate() const;
};

struct LossBreakdown {
    double fsl = 0.0;
    double kd = 0.0;
    double ce = 0.0;
    double total = 0.0;
};

// Numerically stable temperature softmax (max subtraction before exp).
Eigen::VectorXd softmax_t(const Eigen::VectorXd& logits, double temperature);

// Batch-mean cross-entropy between softened teacher and student
// distributions. Teacher logits are constants: no gradient flows to them.
// Logit matrices are batch-row-major (one row per sample).
double kd_loss(const Eigen::MatrixXd& teacher_logits, const Eigen::MatrixXd& student_logits,
               double temperature);
double kd_loss_grad(const Eigen::MatrixXd& teacher_logits, const Eigen::MatrixXd& student_logits,
                    double temperature, Eigen::MatrixXd& dstudent_logits);

// Batch-mean NLL of the true class at temperature 1.
double ce_loss(const Eigen::MatrixXd& logits, const std::vector<int>& labels);
double ce_loss_grad(const Eigen::MatrixXd& logits, const std::vector<int>& labels,
                    Eigen::MatrixXd& dlogits);
// Soft-target variant (CutMix labels); each target row is a distribution.
double ce_loss_soft(const Eigen::MatrixXd& logits, const Eigen::MatrixXd& targets);
double ce_loss_soft_grad(const Eigen::MatrixXd& logits, const Eigen::MatrixXd& targets,
                         Eigen::MatrixXd& dlogits);

// Sum over (bin, class) cells of squared Euclidean distance between the two
// stores' aggregates. Cells empty in either store contribute zero.
double fsl_loss(const FeatureStore& student_store, const FeatureStore& teacher_store);

// Differentiable batch-side feature-storage loss: bins the batch's feature
// rows by the given confidences and ground-truth labels, takes per-cell means
// and measures squared distance to the teacher store aggregates. Bin
// assignment is treated as constant under differentiation.
double fsl_batch_loss(const Eigen::MatrixXd& features, const std::vector<double>& confidences,
                      const std::vector<int>& labels, const BinSpec& spec,
                      const FeatureStore& teacher_store);
double fsl_batch_loss_grad(const Eigen::MatrixXd& features, const std::vector<double>& confidences,
                           const std::vector<int>& labels, const BinSpec& spec,
                           const FeatureStore& teacher_store, Eigen::MatrixXd& dfeatures);

// Store-side variant for the per-epoch refresh cadence: the loss value is
// fsl_loss(student_store, teacher_store) over the full refreshed store, and
// each batch sample receives the gradient of that value through its cell's
// mean, 2 * (agg_s - agg_t) / count. Exact at the refresh point.
double fsl_store_grad(const FeatureStore& student_store, const FeatureStore& teacher_store,
                      const std::vector<double>& confidences, const std::vector<int>& labels,
                      Eigen::MatrixXd& dfeatures);

// Combined objective on a batch of student outputs. Terms with a zero scaling
// factor are skipped; the total is the exact weighted sum of the computed
// terms, so degenerate weights reproduce the KD-only and fine-tuning paths
// bit-for-bit.
struct FretalGrads {
    Eigen::MatrixXd dlogits;   // gradient of total w.r.t. student logits
    Eigen::MatrixXd dfeatures; // gradient of total w.r.t. student features
};

LossBreakdown fretal_loss(const Eigen::MatrixXd& teacher_logits,
                          const Eigen::MatrixXd& student_logits,
                          const Eigen::MatrixXd& student_features,
                          const std::vector<double>& student_confidences,
                          const std::vector<int>& labels, const FeatureStore& teacher_store,
                          const LossConfig& cfg, FretalGrads* grads = nullptr);

// Convenience evaluation on a batch of samples: runs both models forward and
// assembles the breakdown (no gradients). Used for traces and reports.
LossBreakdown fretal_eval(const SampleRefs& batch, const Model& teacher, const Model& student,
                          const FeatureStore& teacher_store, const LossConfig& cfg,
                          int threads = 1);

double entropy(const Eigen::VectorXd& probs);

} // namespace dfadapt

#endif
