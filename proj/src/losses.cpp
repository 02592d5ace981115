#include "dfadapt/losses.hpp"

#include <cmath>

#include "dfadapt/errors.hpp"

namespace dfadapt {

void LossConfig::validate() const {
    if (!(temperature > 0.0))
        throw ConfigError("LossConfig: temperature must be positive");
    if (rho_fsl < 0.0 || rho_kd < 0.0 || rho_ce < 0.0)
        throw ConfigError("LossConfig: scaling factors must be non-negative");
}

namespace {

void check_finite(const Eigen::VectorXd& v, const char* what) {
    if (!v.allFinite()) throw DataError(std::string(what) + ": non-finite value in input");
}

Eigen::VectorXd log_softmax_t(const Eigen::VectorXd& logits, double temperature) {
    Eigen::VectorXd z = logits / temperature;
    double m = z.maxCoeff();
    Eigen::VectorXd shifted = z.array() - m;
    double lse = std::log(shifted.array().exp().sum());
    return shifted.array() - lse;
}

void check_batch_pair(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw DataError(std::string(what) + ": batch shape mismatch (" + std::to_string(a.rows()) +
                        "x" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                        std::to_string(b.cols()) + ")");
    if (a.rows() == 0) throw DataError(std::string(what) + ": empty batch");
}

} // namespace

Eigen::VectorXd softmax_t(const Eigen::VectorXd& logits, double temperature) {
    if (!(temperature > 0.0)) throw ConfigError("softmax_t: temperature must be positive");
    check_finite(logits, "softmax_t");
    Eigen::VectorXd lsm = log_softmax_t(logits, temperature);
    return lsm.array().exp();
}

double entropy(const Eigen::VectorXd& probs) {
    double h = 0.0;
    for (Eigen::Index i = 0; i < probs.size(); ++i)
        if (probs[i] > 0.0) h -= probs[i] * std::log(probs[i]);
    return h;
}

double kd_loss(const Eigen::MatrixXd& teacher_logits, const Eigen::MatrixXd& student_logits,
               double temperature) {
    check_batch_pair(teacher_logits, student_logits, "kd_loss");
    if (!(temperature > 0.0)) throw ConfigError("kd_loss: temperature must be positive");
    double acc = 0.0;
    for (Eigen::Index i = 0; i < teacher_logits.rows(); ++i) {
        Eigen::VectorXd pt = softmax_t(teacher_logits.row(i).transpose(), temperature);
        Eigen::VectorXd lsm = log_softmax_t(student_logits.row(i).transpose(), temperature);
        acc -= pt.dot(lsm);
    }
    return acc / static_cast<double>(teacher_logits.rows());
}

double kd_loss_grad(const Eigen::MatrixXd& teacher_logits, const Eigen::MatrixXd& student_logits,
                    double temperature, Eigen::MatrixXd& dstudent_logits) {
    check_batch_pair(teacher_logits, student_logits, "kd_loss");
    if (!(temperature > 0.0)) throw ConfigError("kd_loss: temperature must be positive");
    const double inv_b = 1.0 / static_cast<double>(teacher_logits.rows());
    dstudent_logits.setZero(student_logits.rows(), student_logits.cols());
    double acc = 0.0;
    for (Eigen::Index i = 0; i < teacher_logits.rows(); ++i) {
        Eigen::VectorXd pt = softmax_t(teacher_logits.row(i).transpose(), temperature);
        Eigen::VectorXd lsm = log_softmax_t(student_logits.row(i).transpose(), temperature);
        Eigen::VectorXd ps = lsm.array().exp();
        acc -= pt.dot(lsm);
        dstudent_logits.row(i) = ((ps - pt) * (inv_b / temperature)).transpose();
    }
    return acc * inv_b;
}

double ce_loss(const Eigen::MatrixXd& logits, const std::vector<int>& labels) {
    if (logits.rows() == 0) throw DataError("ce_loss: empty batch");
    if (static_cast<std::size_t>(logits.rows()) != labels.size())
        throw DataError("ce_loss: logits/labels length mismatch");
    double acc = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= logits.cols())
            throw DataError("ce_loss: label " + std::to_string(y) + " outside {0, 1} at index " +
                            std::to_string(i));
        acc -= log_softmax_t(logits.row(i).transpose(), 1.0)[y];
    }
    return acc / static_cast<double>(logits.rows());
}

double ce_loss_grad(const Eigen::MatrixXd& logits, const std::vector<int>& labels,
                    Eigen::MatrixXd& dlogits) {
    double value = ce_loss(logits, labels);
    const double inv_b = 1.0 / static_cast<double>(logits.rows());
    dlogits.setZero(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::VectorXd p = softmax_t(logits.row(i).transpose(), 1.0);
        p[labels[static_cast<std::size_t>(i)]] -= 1.0;
        dlogits.row(i) = (p * inv_b).transpose();
    }
    return value;
}

double ce_loss_soft(const Eigen::MatrixXd& logits, const Eigen::MatrixXd& targets) {
    check_batch_pair(logits, targets, "ce_loss_soft");
    double acc = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i)
        acc -= targets.row(i).dot(log_softmax_t(logits.row(i).transpose(), 1.0).transpose());
    return acc / static_cast<double>(logits.rows());
}

double ce_loss_soft_grad(const Eigen::MatrixXd& logits, const Eigen::MatrixXd& targets,
                         Eigen::MatrixXd& dlogits) {
    double value = ce_loss_soft(logits, targets);
    const double inv_b = 1.0 / static_cast<double>(logits.rows());
    dlogits.setZero(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::VectorXd p = softmax_t(logits.row(i).transpose(), 1.0);
        dlogits.row(i) = ((p - targets.row(i).transpose()) * inv_b).transpose();
    }
    return value;
}

double fsl_loss(const FeatureStore& student_store, const FeatureStore& teacher_store) {
    if (!(student_store.spec() == teacher_store.spec()) ||
        student_store.feature_dim() != teacher_store.feature_dim())
        throw DataError("fsl_loss: stores have mismatched bin spec or feature dim");
    double acc = 0.0;
    for (int k = 0; k < student_store.spec().num_bins(); ++k) {
        for (int c = 0; c < kNumClasses; ++c) {
            if (student_store.empty_cell(k, c) || teacher_store.empty_cell(k, c)) continue;
            acc += (student_store.aggregate(k, c) - teacher_store.aggregate(k, c)).squaredNorm();
        }
    }
    return acc;
}

namespace {

struct BatchCells {
    // per (bin, class): member sample indices
    std::vector<std::vector<int>> members;
    int nbins;
};

BatchCells bin_batch(const std::vector<double>& confidences, const std::vector<int>& labels,
                     const BinSpec& spec) {
    BatchCells cells;
    cells.nbins = spec.num_bins();
    cells.members.resize(static_cast<std::size_t>(cells.nbins) * kNumClasses);
    for (std::size_t i = 0; i < confidences.size(); ++i) {
        auto bin = assign_bin(confidences[i], spec);
        if (!bin) continue;
        cells.members[static_cast<std::size_t>(*bin) * kNumClasses + labels[i]].push_back(
            static_cast<int>(i));
    }
    return cells;
}

} // namespace

double fsl_batch_loss_grad(const Eigen::MatrixXd& features, const std::vector<double>& confidences,
                           const std::vector<int>& labels, const BinSpec& spec,
                           const FeatureStore& teacher_store, Eigen::MatrixXd& dfeatures) {
    if (static_cast<std::size_t>(features.rows()) != confidences.size() ||
        confidences.size() != labels.size())
        throw DataError("fsl_batch_loss: features/confidences/labels length mismatch");
    if (features.cols() != teacher_store.feature_dim())
        throw DataError("fsl_batch_loss: feature dim mismatch with teacher store");

    dfeatures.setZero(features.rows(), features.cols());
    BatchCells cells = bin_batch(confidences, labels, spec);
    double acc = 0.0;
    for (int k = 0; k < cells.nbins; ++k) {
        for (int c = 0; c < kNumClasses; ++c) {
            const auto& members = cells.members[static_cast<std::size_t>(k) * kNumClasses + c];
            if (members.empty() || teacher_store.empty_cell(k, c)) continue;
            Eigen::VectorXd mean = Eigen::VectorXd::Zero(features.cols());
            for (int i : members) mean += features.row(i).transpose();
            mean /= static_cast<double>(members.size());
            Eigen::VectorXd diff = mean - teacher_store.aggregate(k, c);
            acc += diff.squaredNorm();
            Eigen::VectorXd g = 2.0 * diff / static_cast<double>(members.size());
            for (int i : members) dfeatures.row(i) += g.transpose();
        }
    }
    return acc;
}

double fsl_store_grad(const FeatureStore& student_store, const FeatureStore& teacher_store,
                      const std::vector<double>& confidences, const std::vector<int>& labels,
                      Eigen::MatrixXd& dfeatures) {
    double value = fsl_loss(student_store, teacher_store);
    const int f = student_store.feature_dim();
    dfeatures.setZero(static_cast<Eigen::Index>(confidences.size()), f);
    for (std::size_t i = 0; i < confidences.size(); ++i) {
        auto bin = assign_bin(confidences[i], student_store.spec());
        if (!bin) continue;
        int c = labels[i];
        if (student_store.empty_cell(*bin, c) || teacher_store.empty_cell(*bin, c)) continue;
        Eigen::VectorXd g = 2.0 *
                            (student_store.aggregate(*bin, c) - teacher_store.aggregate(*bin, c)) /
                            static_cast<double>(student_store.count(*bin, c));
        dfeatures.row(static_cast<Eigen::Index>(i)) = g.transpose();
    }
    return value;
}

double fsl_batch_loss(const Eigen::MatrixXd& features, const std::vector<double>& confidences,
                      const std::vector<int>& labels, const BinSpec& spec,
                      const FeatureStore& teacher_store) {
    Eigen::MatrixXd scratch;
    return fsl_batch_loss_grad(features, confidences, labels, spec, teacher_store, scratch);
}

LossBreakdown fretal_loss(const Eigen::MatrixXd& teacher_logits,
                          const Eigen::MatrixXd& student_logits,
                          const Eigen::MatrixXd& student_features,
                          const std::vector<double>& student_confidences,
                          const std::vector<int>& labels, const FeatureStore& teacher_store,
                          const LossConfig& cfg, FretalGrads* grads) {
    cfg.validate();
    LossBreakdown out;
    if (grads) {
        grads->dlogits.setZero(student_logits.rows(), student_logits.cols());
        grads->dfeatures.setZero(student_features.rows(), student_features.cols());
    }
    Eigen::MatrixXd scratch;
    if (cfg.rho_fsl != 0.0) {
        out.fsl = grads ? fsl_batch_loss_grad(student_features, student_confidences, labels,
                                              teacher_store.spec(), teacher_store, scratch)
                        : fsl_batch_loss(student_features, student_confidences, labels,
                                         teacher_store.spec(), teacher_store);
        if (grads) grads->dfeatures += cfg.rho_fsl * scratch;
    }
    if (cfg.rho_kd != 0.0) {
        out.kd = grads ? kd_loss_grad(teacher_logits, student_logits, cfg.temperature, scratch)
                       : kd_loss(teacher_logits, student_logits, cfg.temperature);
        if (grads) grads->dlogits += cfg.rho_kd * scratch;
    }
    if (cfg.rho_ce != 0.0) {
        out.ce = grads ? ce_loss_grad(student_logits, labels, scratch)
                       : ce_loss(student_logits, labels);
        if (grads) grads->dlogits += cfg.rho_ce * scratch;
    }
    out.total = cfg.rho_fsl * out.fsl + cfg.rho_kd * out.kd + cfg.rho_ce * out.ce;
    return out;
}

LossBreakdown fretal_eval(const SampleRefs& batch, const Model& teacher, const Model& student,
                          const FeatureStore& teacher_store, const LossConfig& cfg, int threads) {
    auto touts = forward(teacher, batch, threads);
    auto souts = forward(student, batch, threads);
    const auto b = static_cast<Eigen::Index>(batch.size());
    Eigen::MatrixXd tl(b, kNumClasses), sl(b, kNumClasses), sf(b, student.feature_dim());
    std::vector<double> conf(batch.size());
    std::vector<int> labels(batch.size());
    for (Eigen::Index i = 0; i < b; ++i) {
        tl.row(i) = touts[i].logits.transpose();
        sl.row(i) = souts[i].logits.transpose();
        sf.row(i) = souts[i].features.transpose();
        conf[i] = softmax_t(souts[i].logits, 1.0).maxCoeff();
        labels[i] = batch[static_cast<std::size_t>(i)]->label;
    }
    return fretal_loss(tl, sl, sf, conf, labels, teacher_store, cfg, nullptr);
}

} // namespace dfadapt
