#include "dfadapt/feature_store.hpp"

#include <cmath>
#include <sstream>

#include "dfadapt/errors.hpp"
#include "dfadapt/losses.hpp"
#include "dfadapt/parallel.hpp"

namespace dfadapt {

int BinSpec::num_bins() const {
    double ratio = (lambda_b - lambda_a) / step;
    return static_cast<int>(std::lround(ratio));
}

void BinSpec::validate() const {
    if (lambda_a < 0.0 || lambda_a > 1.0 || lambda_b <= lambda_a || lambda_b > 1.0)
        throw ConfigError("BinSpec: need 0 <= lambda_a < lambda_b <= 1");
    if (step <= 0.0) throw ConfigError("BinSpec: step must be positive");
    double ratio = (lambda_b - lambda_a) / step;
    if (std::abs(ratio - std::lround(ratio)) > 1e-9 || std::lround(ratio) < 1)
        throw ConfigError("BinSpec: (lambda_b - lambda_a) / step must be a positive integer");
}

std::optional<int> assign_bin(double confidence, const BinSpec& spec) {
    if (!(confidence >= 0.0 && confidence <= 1.0))
        throw DataError("assign_bin: confidence " + std::to_string(confidence) +
                        " outside [0, 1]");
    if (confidence < spec.lambda_a) return std::nullopt;
    int n = spec.num_bins();
    if (confidence >= spec.lambda_b) return n - 1; // lambda_b itself closes the last bin
    // The small offset keeps exact edge values (0.6, 0.7, ...) in the bin
    // they open despite binary rounding of the quotient.
    int k = static_cast<int>((confidence - spec.lambda_a) / spec.step + 1e-9);
    return std::min(k, n - 1);
}

FeatureStore::FeatureStore(const BinSpec& spec, int feature_dim)
    : spec_(spec), feature_dim_(feature_dim) {
    spec_.validate();
    cells_.resize(static_cast<std::size_t>(spec_.num_bins()) * kNumClasses);
    for (auto& c : cells_) c.sum = Eigen::VectorXd::Zero(feature_dim_);
}

int FeatureStore::index(int bin, int label) const {
    return bin * kNumClasses + label;
}

void FeatureStore::accumulate(const Eigen::VectorXd& features, double confidence, int label) {
    if (features.size() != feature_dim_)
        throw DataError("FeatureStore::accumulate: feature dim " + std::to_string(features.size()) +
                        " != store dim " + std::to_string(feature_dim_));
    if (label != 0 && label != 1)
        throw DataError("FeatureStore::accumulate: label must be 0 or 1");
    auto bin = assign_bin(confidence, spec_);
    if (!bin) return;
    auto& cell = cells_[index(*bin, label)];
    cell.sum += features;
    cell.count += 1;
}

long FeatureStore::total_count() const {
    long n = 0;
    for (const auto& c : cells_) n += c.count;
    return n;
}

Eigen::VectorXd FeatureStore::aggregate(int bin, int label) const {
    const auto& cell = cells_[index(bin, label)];
    if (cell.count == 0)
        throw DataError("FeatureStore::aggregate: cell (" + std::to_string(bin) + ", " +
                        std::to_string(label) + ") is empty");
    return cell.sum / static_cast<double>(cell.count);
}

std::string FeatureStore::to_json() const {
    std::ostringstream os;
    os.precision(17);
    os << "{\"lambda_a\":" << spec_.lambda_a << ",\"lambda_b\":" << spec_.lambda_b
       << ",\"step\":" << spec_.step << ",\"feature_dim\":" << feature_dim_ << ",\"cells\":[";
    bool first = true;
    for (int k = 0; k < spec_.num_bins(); ++k) {
        for (int c = 0; c < kNumClasses; ++c) {
            if (!first) os << ",";
            first = false;
            os << "{\"bin\":" << k << ",\"lo\":" << spec_.lambda_a + k * spec_.step
               << ",\"hi\":" << spec_.lambda_a + (k + 1) * spec_.step
               << ",\"class\":" << (c == 0 ? "\"real\"" : "\"fake\"")
               << ",\"count\":" << count(k, c) << ",\"aggregate\":[";
            if (count(k, c) > 0) {
                Eigen::VectorXd agg = aggregate(k, c);
                for (Eigen::Index i = 0; i < agg.size(); ++i)
                    os << (i ? "," : "") << agg[i];
            }
            os << "]}";
        }
    }
    os << "]}";
    return os.str();
}

FeatureStore build_store(const Model& model, const SampleRefs& dataset, const BinSpec& spec,
                         int threads) {
    if (dataset.empty()) throw DataError("build_store: empty dataset");
    FeatureStore store(spec, model.feature_dim());
    std::vector<ModelOutput> outputs = forward(model, dataset, threads);
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        double conf = softmax_t(outputs[i].logits, 1.0).maxCoeff();
        store.accumulate(outputs[i].features, conf, dataset[i]->label);
    }
    return store;
}

FeatureStore build_store(const Model& model, const std::vector<Sample>& dataset,
                         const BinSpec& spec, int threads) {
    return build_store(model, make_refs(dataset), spec, threads);
}

} // namespace dfadapt
