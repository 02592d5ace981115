#ifndef DFADAPT_FEATURE_STORE_HPP
#define DFADAPT_FEATURE_STORE_HPP

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "dfadapt/backbone.hpp"
#include "dfadapt/image.hpp"

namespace dfadapt {

// Confidence bins [lambda_a + k*step, lambda_a + (k+1)*step), last bin closed
// at lambda_b. Confidences below lambda_a are excluded from storage.
struct BinSpec {
    double lambda_a = 0.5;
    double lambda_b = 1.0;
    double step = 0.1;

    int num_bins() const;
    void validate() const;
    bool operator==(const BinSpec&) const = default;
};

std::optional<int> assign_bin(double confidence, const BinSpec& spec);

// Per (bin, class) running sums of feature vectors. aggregate() is the mean;
// a cell with count 0 is empty.
class FeatureStore {
public:
    FeatureStore() = default;
    FeatureStore(const BinSpec& spec, int feature_dim);

    const BinSpec& spec() const { return spec_; }
    int feature_dim() const { return feature_dim_; }

    void accumulate(const Eigen::VectorXd& features, double confidence, int label);

    long count(int bin, int label) const { return cells_[index(bin, label)].count; }
    long total_count() const;
    bool empty_cell(int bin, int label) const { return count(bin, label) == 0; }
    Eigen::VectorXd aggregate(int bin, int label) const;
    const Eigen::VectorXd& sum(int bin, int label) const { return cells_[index(bin, label)].sum; }

    // Human-readable JSON (bin edges, counts, aggregates) for inspection.
    std::string to_json() const;

private:
    struct Cell {
        Eigen::VectorXd sum;
        long count = 0;
    };
    int index(int bin, int label) const;

    BinSpec spec_;
    int feature_dim_ = 0;
    std::vector<Cell> cells_; // bin-major, 2 classes per bin
};

// One deterministic forward pass over the dataset; confidence is the model's
// own max softmax probability at temperature 1, class is the ground truth.
FeatureStore build_store(const Model& model, const SampleRefs& dataset, const BinSpec& spec,
                         int threads = 1);
FeatureStore build_store(const Model& model, const std::vector<Sample>& dataset,
                         const BinSpec& spec, int threads = 1);

// Same as build_store on the current student parameters; the teacher store is
// built once and never refreshed.
inline FeatureStore refresh_student_store(const Model& student, const SampleRefs& dataset,
                                          const BinSpec& spec, int threads = 1) {
    return build_store(student, dataset, spec, threads);
}

} // namespace dfadapt

#endif
