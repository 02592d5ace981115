#ifndef DFADAPT_EVAL_HPP
#define DFADAPT_EVAL_HPP

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "dfadapt/backbone.hpp"
#include "dfadapt/datagen.hpp"

namespace dfadapt {

// F1 counts the "fake" class as positive; F1 = 0 when 2TP + FP + FN = 0.
struct Confusion {
    long tp = 0, fp = 0, tn = 0, fn = 0;

    long total() const { return tp + fp + tn + fn; }
    double accuracy() const { return total() ? static_cast<double>(tp + tn) / total() : 0.0; }
    double f1() const {
        long denom = 2 * tp + fp + fn;
        return denom ? 2.0 * tp / static_cast<double>(denom) : 0.0;
    }
};

double f1_score(const std::vector<int>& predictions, const std::vector<int>& labels);

struct EvalReport {
    std::string checkpoint_hash;
    std::string domain;
    Split split = Split::Test;
    Confusion confusion;
    double f1 = 0.0;
    double accuracy = 0.0;
    long samples = 0;
};

// Frame-level evaluation: one prediction per frame via argmax of logits.
// group_vote enables per-group majority voting instead (off by default).
EvalReport evaluate_model(const Model& model, const DomainDataset& dataset, Split split,
                          int threads = 1, bool group_vote = false);

// entry (i, j) = F1 of teachers[i] on domains[j]'s test split.
Eigen::MatrixXd zero_shot_matrix(const std::vector<const Model*>& teachers,
                                 const std::vector<const DomainDataset*>& domains,
                                 int threads = 1);

} // namespace dfadapt

#endif
