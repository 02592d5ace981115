#include "dfadapt/adapt.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>

#include "dfadapt/errors.hpp"
#include "dfadapt/eval.hpp"
#include "dfadapt/parallel.hpp"

namespace dfadapt {

const char* method_name(Method m) {
    switch (m) {
        case Method::FReTAL: return "fretal";
        case Method::KD: return "kd";
        case Method::FT: return "ft";
    }
    return "?";
}

Method method_from_name(const std::string& name) {
    if (name == "fretal") return Method::FReTAL;
    if (name == "kd") return Method::KD;
    if (name == "ft") return Method::FT;
    throw ConfigError("unknown method: " + name + " (expected fretal, kd or ft)");
}

LossConfig AdaptationConfig::effective_loss() const {
    LossConfig eff = loss;
    if (method == Method::FT) {
        eff.rho_fsl = 0.0;
        eff.rho_kd = 0.0;
        eff.rho_ce = 1.0;
    } else if (method == Method::KD) {
        eff.rho_fsl = 0.0;
        eff.rho_kd = 1.0;
        eff.rho_ce = 0.0;
    }
    return eff;
}

void AdaptationConfig::validate() const {
    bins.validate();
    loss.validate();
    if (!(lr > 0.0)) throw ConfigError("AdaptationConfig: lr must be positive");
    if (momentum < 0.0 || momentum >= 1.0)
        throw ConfigError("AdaptationConfig: momentum must be in [0, 1)");
    if (max_epochs < 1 || patience < 1 || batch_size < 1 || adapt_groups < 1 || threads < 1)
        throw ConfigError("AdaptationConfig: counts must be positive");
    if (cutmix_prob < 0.0 || cutmix_prob > 1.0 || !(cutmix_alpha > 0.0))
        throw ConfigError("AdaptationConfig: bad CutMix parameters");
    if (fsl_grad_clip < 0.0 || max_grad_norm < 0.0)
        throw ConfigError("AdaptationConfig: gradient clamps must be non-negative");
}

EarlyStopper::EarlyStopper(int patience) : patience_(patience) {
    if (patience < 1) throw ConfigError("EarlyStopper: patience must be >= 1");
}

bool EarlyStopper::record(double metric) {
    if (metric > best_ + 1e-6) {
        best_ = metric;
        stale_ = 0;
    } else {
        ++stale_;
    }
    return stale_ >= patience_;
}

namespace {

struct BatchPass {
    std::vector<ForwardCtx> ctxs;
    Eigen::MatrixXd logits;   // B x 2
    Eigen::MatrixXd features; // B x F
};

BatchPass forward_batch(const Model& model, const std::vector<const Image*>& images, int threads) {
    BatchPass pass;
    const auto b = static_cast<Eigen::Index>(images.size());
    pass.ctxs.resize(images.size());
    pass.logits.resize(b, kNumClasses);
    pass.features.resize(b, model.feature_dim());
    parallel_for(static_cast<int>(images.size()), threads, [&](int i) {
        auto out = model.forward_one(images[static_cast<std::size_t>(i)]->normalized(),
                                     pass.ctxs[static_cast<std::size_t>(i)]);
        pass.logits.row(i) = out.logits.transpose();
        pass.features.row(i) = out.features.transpose();
    });
    return pass;
}

// Per-sample gradients reduced in sample order, so the result is independent
// of the thread count.
void backward_batch(const Model& model, const BatchPass& pass, const Eigen::MatrixXd& dlogits,
                    const Eigen::MatrixXd& dfeatures, int threads, GradBuffer& grads) {
    const int b = static_cast<int>(pass.ctxs.size());
    std::vector<GradBuffer> per_sample(static_cast<std::size_t>(b));
    parallel_for(b, threads, [&](int i) {
        per_sample[static_cast<std::size_t>(i)] = model.zero_grads();
        Eigen::VectorXd dfeat =
            dfeatures.size() > 0 ? dfeatures.row(i).transpose() : Eigen::VectorXd();
        model.backward_one(pass.ctxs[static_cast<std::size_t>(i)],
                           dlogits.row(i).transpose(), dfeat,
                           per_sample[static_cast<std::size_t>(i)]);
    });
    for (int i = 0; i < b; ++i)
        for (std::size_t p = 0; p < grads.size(); ++p) grads[p] += per_sample[i][p];
}

std::vector<const Image*> image_ptrs(const SampleRefs& refs, const std::vector<int>& idx) {
    std::vector<const Image*> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back(&refs[static_cast<std::size_t>(i)]->image);
    return out;
}

std::vector<const Image*> image_ptrs(const std::vector<Image>& imgs) {
    std::vector<const Image*> out;
    out.reserve(imgs.size());
    for (const auto& im : imgs) out.push_back(&im);
    return out;
}

double validation_f1(const Model& model, const DomainDataset& ds, int threads) {
    return evaluate_model(model, ds, Split::Validation, threads).f1;
}

} // namespace

Model train_teacher(const DomainDataset& source, const TeacherConfig& cfg) {
    SampleRefs train = source.split_refs(Split::TeacherTrain);
    if (train.empty()) throw DataError("train_teacher: source has no teacher-train split");
    if (source.split_refs(Split::Validation).empty())
        throw DataError("train_teacher: source has no validation split");

    Model model(Architecture{}, derive_seed(cfg.seed, hash_str("teacher-init")));
    Sgd opt(model, cfg.lr, cfg.momentum);
    EarlyStopper stopper(cfg.patience);
    Model best = model;
    double best_f1 = -1.0;
    int best_epoch = -1;

    std::vector<int> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        Rng erng(derive_seed(cfg.seed, hash_str("teacher-epoch"), static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), erng);

        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::vector<int> idx(order.begin() + start,
                                 order.begin() + std::min(order.size(),
                                                          start + static_cast<std::size_t>(cfg.batch_size)));
            SampleRefs batch;
            for (int i : idx) batch.push_back(train[static_cast<std::size_t>(i)]);

            Eigen::MatrixXd targets;
            std::vector<const Image*> images;
            std::vector<Image> aug_storage;
            if (cfg.cutmix_enabled) {
                AugmentedBatch aug = cutmix(batch, cfg.cutmix_prob, cfg.cutmix_alpha, erng);
                aug_storage = std::move(aug.images);
                targets = std::move(aug.soft_labels);
                images = image_ptrs(aug_storage);
            } else {
                targets.setZero(static_cast<Eigen::Index>(batch.size()), kNumClasses);
                for (std::size_t i = 0; i < batch.size(); ++i)
                    targets(static_cast<Eigen::Index>(i), batch[i]->label) = 1.0;
                for (const auto* s : batch) images.push_back(&s->image);
            }

            BatchPass pass = forward_batch(model, images, cfg.threads);
            Eigen::MatrixXd dlogits;
            ce_loss_soft_grad(pass.logits, targets, dlogits);
            GradBuffer grads = model.zero_grads();
            backward_batch(model, pass, dlogits, Eigen::MatrixXd(), cfg.threads, grads);
            opt.step(grads);
        }

        double f1 = validation_f1(model, source, cfg.threads);
        if (std::getenv("DFADAPT_VERBOSE"))
            std::cerr << "teacher " << source.domain << " epoch " << epoch << " val_f1 " << f1
                      << "\n";
        if (f1 > best_f1) {
            best_f1 = f1;
            best = model;
            best_epoch = epoch;
        }
        if (stopper.record(f1)) break;
    }

    if (best_f1 < cfg.min_source_f1)
        throw ProtocolError("train_teacher: under-trained teacher, source validation F1 " +
                            std::to_string(best_f1) + " below required " +
                            std::to_string(cfg.min_source_f1));

    best.metadata["source_domain"] = source.domain;
    best.metadata["epoch"] = std::to_string(best_epoch);
    best.metadata["seed"] = std::to_string(cfg.seed);
    best.metadata["source_val_f1"] = std::to_string(best_f1);
    freeze(best);
    return best;
}

AdaptResult adapt_student(const Model& teacher, const DomainDataset& target,
                          const AdaptationConfig& cfg) {
    cfg.validate();
    if (teacher.trainable())
        throw ProtocolError("adapt_student: teacher must be frozen before adaptation");
    if (target.group_count(Split::Adapt) != cfg.adapt_groups)
        throw DataError("adapt_student: target adapt split has " +
                        std::to_string(target.group_count(Split::Adapt)) + " groups, expected " +
                        std::to_string(cfg.adapt_groups));

    SampleRefs adapt_set = target.split_refs(Split::Adapt);
    SampleRefs val_set = target.split_refs(Split::Validation);
    if (val_set.empty()) throw DataError("adapt_student: target has no validation split");

    // Source-data abstinence audit: every sample the loop can touch must be
    // tagged with the target domain.
    long leaked = 0;
    for (const auto* s : adapt_set)
        if (s->domain != target.domain) ++leaked;
    for (const auto* s : val_set)
        if (s->domain != target.domain) ++leaked;
    if (leaked > 0)
        throw ProtocolError("adapt_student: " + std::to_string(leaked) +
                            " non-target-domain samples in the adaptation loader");

    const LossConfig eff = cfg.effective_loss();
    const bool need_teacher = eff.rho_kd != 0.0 || eff.rho_fsl != 0.0;
    const bool need_store = eff.rho_fsl != 0.0;

    TrainingTrace trace;
    trace.source_audit_count = leaked;
    trace.teacher_hash_before = param_hash(teacher);

    // Teacher outputs on the adapt set are constants; compute them once.
    Eigen::MatrixXd teacher_logits;
    std::vector<double> teacher_conf(adapt_set.size(), 0.0);
    FeatureStore teacher_store(cfg.bins, teacher.feature_dim());
    if (need_teacher) {
        auto touts = forward(teacher, adapt_set, cfg.threads);
        teacher_logits.resize(static_cast<Eigen::Index>(adapt_set.size()), kNumClasses);
        for (std::size_t i = 0; i < adapt_set.size(); ++i) {
            teacher_logits.row(static_cast<Eigen::Index>(i)) = touts[i].logits.transpose();
            teacher_conf[i] = softmax_t(touts[i].logits, 1.0).maxCoeff();
            if (need_store)
                teacher_store.accumulate(touts[i].features, teacher_conf[i], adapt_set[i]->label);
        }
    }

    Model student(Architecture{}, 0);
    copy_weights(teacher, student);
    student.set_trainable(true);

    Sgd opt(student, cfg.lr, cfg.momentum, cfg.max_grad_norm);
    EarlyStopper stopper(cfg.patience);
    Model best = student;
    double best_f1 = -1.0;
    int best_epoch = -1;

    std::vector<int> labels(adapt_set.size());
    for (std::size_t i = 0; i < adapt_set.size(); ++i) labels[i] = adapt_set[i]->label;

    // Class-stratified batch order: shuffling real and fake indices
    // separately and interleaving keeps every mini-batch near-balanced, so a
    // few noisy batches cannot push the student into a one-class predictor.
    std::vector<int> real_idx, fake_idx;
    for (std::size_t i = 0; i < adapt_set.size(); ++i)
        (labels[i] == 1 ? fake_idx : real_idx).push_back(static_cast<int>(i));
    std::vector<int> order(adapt_set.size());

    std::string stop_reason = "max-epochs";
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();

        // Full-set forward with current parameters: epoch loss decomposition
        // (pre-update) and, when needed, the refreshed student store.
        auto souts = forward(student, adapt_set, cfg.threads);
        Eigen::MatrixXd slogits(static_cast<Eigen::Index>(adapt_set.size()), kNumClasses);
        std::vector<double> sconf(adapt_set.size());
        FeatureStore student_store(cfg.bins, student.feature_dim());
        for (std::size_t i = 0; i < adapt_set.size(); ++i) {
            slogits.row(static_cast<Eigen::Index>(i)) = souts[i].logits.transpose();
            sconf[i] = cfg.bin_by_teacher_confidence
                           ? teacher_conf[i]
                           : softmax_t(souts[i].logits, 1.0).maxCoeff();
            if (need_store) student_store.accumulate(souts[i].features, sconf[i], labels[i]);
        }

        EpochRecord rec;
        rec.epoch = epoch;
        const double nan = std::numeric_limits<double>::quiet_NaN();
        rec.fsl = eff.rho_fsl != 0.0 ? fsl_loss(student_store, teacher_store) : nan;
        rec.kd = eff.rho_kd != 0.0 ? kd_loss(teacher_logits, slogits, eff.temperature) : nan;
        rec.ce = eff.rho_ce != 0.0 ? ce_loss(slogits, labels) : nan;
        rec.total = (eff.rho_fsl != 0.0 ? eff.rho_fsl * rec.fsl : 0.0) +
                    (eff.rho_kd != 0.0 ? eff.rho_kd * rec.kd : 0.0) +
                    (eff.rho_ce != 0.0 ? eff.rho_ce * rec.ce : 0.0);

        Rng erng(derive_seed(cfg.seed, hash_str("adapt-epoch"), static_cast<std::uint64_t>(epoch)));
        std::shuffle(real_idx.begin(), real_idx.end(), erng);
        std::shuffle(fake_idx.begin(), fake_idx.end(), erng);
        {
            std::size_t r = 0, f = 0, o = 0;
            while (r < real_idx.size() || f < fake_idx.size()) {
                if (r < real_idx.size()) order[o++] = real_idx[r++];
                if (f < fake_idx.size()) order[o++] = fake_idx[f++];
            }
        }

        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::vector<int> idx(order.begin() + start,
                                 order.begin() + std::min(order.size(),
                                                          start + static_cast<std::size_t>(cfg.batch_size)));
            const auto b = static_cast<Eigen::Index>(idx.size());

            BatchPass pass = forward_batch(student, image_ptrs(adapt_set, idx), cfg.threads);

            std::vector<int> batch_labels(idx.size());
            std::vector<double> batch_conf(idx.size());
            for (std::size_t k = 0; k < idx.size(); ++k) {
                batch_labels[k] = labels[static_cast<std::size_t>(idx[k])];
                batch_conf[k] = cfg.bin_by_teacher_confidence
                                    ? teacher_conf[static_cast<std::size_t>(idx[k])]
                                    : softmax_t(pass.logits.row(static_cast<Eigen::Index>(k))
                                                    .transpose(),
                                                1.0)
                                          .maxCoeff();
            }

            Eigen::MatrixXd dlogits = Eigen::MatrixXd::Zero(b, kNumClasses);
            Eigen::MatrixXd dfeatures = Eigen::MatrixXd::Zero(b, student.feature_dim());
            Eigen::MatrixXd scratch;

            if (eff.rho_kd != 0.0) {
                Eigen::MatrixXd tl(b, kNumClasses);
                for (std::size_t k = 0; k < idx.size(); ++k)
                    tl.row(static_cast<Eigen::Index>(k)) = teacher_logits.row(idx[k]);
                kd_loss_grad(tl, pass.logits, eff.temperature, scratch);
                dlogits += eff.rho_kd * scratch;
            }
            if (eff.rho_fsl != 0.0) {
                if (cfg.store_refresh == StoreRefresh::PerEpoch)
                    fsl_store_grad(student_store, teacher_store, batch_conf, batch_labels, scratch);
                else
                    fsl_batch_loss_grad(pass.features, batch_conf, batch_labels, cfg.bins,
                                        teacher_store, scratch);
                dfeatures += eff.rho_fsl * scratch;
                // Sparse store cells can make this gradient arbitrarily large
                // (one sample may own a whole cell), which at lr 0.05 is enough
                // to kill every ReLU in one step. Clamp per-sample norms; the
                // loss value and the loss-op gradients stay exact.
                if (cfg.fsl_grad_clip > 0.0) {
                    for (Eigen::Index r = 0; r < dfeatures.rows(); ++r) {
                        double n = dfeatures.row(r).norm();
                        if (n > cfg.fsl_grad_clip) dfeatures.row(r) *= cfg.fsl_grad_clip / n;
                    }
                }
            }

            GradBuffer grads = student.zero_grads();
            backward_batch(student, pass, dlogits, eff.rho_fsl != 0.0 ? dfeatures : Eigen::MatrixXd(),
                           cfg.threads, grads);
            if (std::getenv("DFADAPT_GRADLOG")) {
                double sq = 0.0;
                for (const auto& g : grads) sq += g.squaredNorm();
                std::cerr << "kdfsl_grad_norm " << std::sqrt(sq) << "\n";
            }

            if (eff.rho_ce != 0.0) {
                SampleRefs batch;
                for (int i : idx) batch.push_back(adapt_set[static_cast<std::size_t>(i)]);
                if (cfg.cutmix_enabled && batch.size() >= 2) {
                    // CutMix feeds only the cross-entropy term; KD and the
                    // feature store always see genuine target frames.
                    AugmentedBatch aug = cutmix(batch, cfg.cutmix_prob, cfg.cutmix_alpha, erng);
                    BatchPass aug_pass = forward_batch(student, image_ptrs(aug.images), cfg.threads);
                    ce_loss_soft_grad(aug_pass.logits, aug.soft_labels, scratch);
                    GradBuffer ce_grads = student.zero_grads();
                    backward_batch(student, aug_pass, eff.rho_ce * scratch, Eigen::MatrixXd(),
                                   cfg.threads, ce_grads);
                    if (std::getenv("DFADAPT_GRADLOG")) {
                        double sq = 0.0;
                        for (const auto& g : ce_grads) sq += g.squaredNorm();
                        std::cerr << "ce_grad_norm " << std::sqrt(sq) << "\n";
                    }
                    for (std::size_t p = 0; p < grads.size(); ++p) grads[p] += ce_grads[p];
                } else {
                    ce_loss_grad(pass.logits, batch_labels, scratch);
                    backward_batch(student, pass, eff.rho_ce * scratch, Eigen::MatrixXd(),
                                   cfg.threads, grads);
                }
            }
            opt.step(grads);
        }

        rec.val_f1 = validation_f1(student, target, cfg.threads);
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        trace.epochs.push_back(rec);

        if (rec.val_f1 > best_f1) {
            best_f1 = rec.val_f1;
            best = student;
            best_epoch = epoch;
        }
        if (stopper.record(rec.val_f1)) {
            stop_reason = "patience";
            break;
        }
    }

    trace.stop_reason = stop_reason;
    trace.best_epoch = best_epoch;
    trace.best_val_f1 = best_f1;
    trace.teacher_hash_after = param_hash(teacher);

    best.metadata["target_domain"] = target.domain;
    best.metadata["method"] = method_name(cfg.method);
    best.metadata["epoch"] = std::to_string(best_epoch);
    best.metadata["seed"] = std::to_string(cfg.seed);
    best.metadata["teacher_hash"] = trace.teacher_hash_before;
    return {std::move(best), std::move(trace)};
}

void write_trace_csv(const TrainingTrace& trace, Method method, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("write_trace_csv: cannot open " + path);
    os.precision(12);
    os << "epoch,fsl,kd,ce,total,val_f1,seconds\n";
    auto field = [&os](double v) {
        if (std::isnan(v)) return; // method does not use this term
        os << v;
    };
    for (const auto& r : trace.epochs) {
        os << r.epoch << ",";
        field(r.fsl);
        os << ",";
        field(r.kd);
        os << ",";
        field(r.ce);
        os << "," << r.total << "," << r.val_f1 << "," << r.seconds << "\n";
    }
    os << "# stop_reason=" << trace.stop_reason << " best_epoch=" << trace.best_epoch
       << " best_val_f1=" << trace.best_val_f1 << " method=" << method_name(method)
       << " source_audit_count=" << trace.source_audit_count << "\n";
}

} // namespace dfadapt
