#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <vector>

#include "dfadapt/errors.hpp"
#include "dfadapt/losses.hpp"
#include "doctest.h"

using namespace dfadapt;

namespace {

// Central finite difference at h = 1e-5; tolerance scaled for O(h^2) error.
constexpr double kFdH = 1e-5;
constexpr double kFdTol = 1e-7;

Eigen::MatrixXd rand_mat(int r, int c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    Eigen::MatrixXd m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = u(rng);
    return m;
}

FeatureStore make_teacher_store(const BinSpec& spec, int dim, std::uint64_t seed) {
    FeatureStore store(spec, dim);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::uniform_real_distribution<double> conf(0.5, 1.0);
    for (int i = 0; i < 40; ++i) {
        Eigen::VectorXd f(dim);
        for (int j = 0; j < dim; ++j) f(j) = u(rng);
        store.accumulate(f, conf(rng), i % 2);
    }
    return store;
}

} // namespace

TEST_CASE("temperature softmax matches hand-computed example") {
    Eigen::VectorXd logits(2);
    logits << 2.0, 0.0;
    Eigen::VectorXd p = softmax_t(logits, 20.0);
    // exp(0.1) / (exp(0.1) + 1)
    CHECK(p(0) == doctest::Approx(0.52498).epsilon(1e-4));
    CHECK(p(1) == doctest::Approx(0.47502).epsilon(1e-4));
    CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("softmax is invariant to logit shifts and stable for large logits") {
    Eigen::VectorXd logits(2);
    logits << 3.0, -1.0;
    Eigen::VectorXd base = softmax_t(logits, 2.0);
    Eigen::VectorXd shifted = softmax_t(logits.array() + 1000.0, 2.0);
    CHECK((base - shifted).cwiseAbs().maxCoeff() < 1e-12);

    Eigen::VectorXd huge(2);
    huge << 800.0, 0.0;
    Eigen::VectorXd p = softmax_t(huge, 1.0);
    CHECK(std::isfinite(p(0)));
    CHECK(p(0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("higher temperature softens the distribution") {
    Eigen::VectorXd logits(2);
    logits << 2.0, -1.0;
    double prev = entropy(softmax_t(logits, 1.0));
    for (double t : {2.0, 5.0, 20.0}) {
        double h = entropy(softmax_t(logits, t));
        CHECK(h > prev);
        prev = h;
    }
    CHECK(prev < std::log(2.0) + 1e-12);
}

TEST_CASE("distillation loss matches hand-computed examples") {
    // Teacher saturated to [1, 0], student at [0.9, 0.1]: -ln 0.9.
    Eigen::MatrixXd t(1, 2), s(1, 2);
    t << 800.0, 0.0;
    s << std::log(9.0), 0.0;
    CHECK(kd_loss(t, s, 1.0) == doctest::Approx(0.10536).epsilon(1e-4));

    // Identical flat logits: the entropy floor ln 2.
    Eigen::MatrixXd z = Eigen::MatrixXd::Zero(1, 2);
    CHECK(kd_loss(z, z, 20.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("distillation loss is floored by the softened teacher entropy") {
    Eigen::MatrixXd t = rand_mat(6, 2, 101);
    double temperature = 20.0;
    double floor = 0.0;
    for (int i = 0; i < t.rows(); ++i) floor += entropy(softmax_t(t.row(i), temperature));
    floor /= t.rows();
    // Minimum over students is attained at student == teacher.
    CHECK(kd_loss(t, t, temperature) == doctest::Approx(floor).epsilon(1e-12));
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Eigen::MatrixXd s = rand_mat(6, 2, 200 + seed);
        CHECK(kd_loss(t, s, temperature) >= floor - 1e-12);
    }
}

TEST_CASE("distillation gradient matches finite differences") {
    Eigen::MatrixXd t = rand_mat(4, 2, 7);
    Eigen::MatrixXd s = rand_mat(4, 2, 8);
    Eigen::MatrixXd ds;
    double base = kd_loss_grad(t, s, 20.0, ds);
    CHECK(base == doctest::Approx(kd_loss(t, s, 20.0)).epsilon(1e-12));
    for (int i = 0; i < s.rows(); ++i) {
        for (int j = 0; j < s.cols(); ++j) {
            Eigen::MatrixXd sp = s, sm = s;
            sp(i, j) += kFdH;
            sm(i, j) -= kFdH;
            double fd = (kd_loss(t, sp, 20.0) - kd_loss(t, sm, 20.0)) / (2 * kFdH);
            CHECK(std::abs(ds(i, j) - fd) < kFdTol);
        }
    }
}

TEST_CASE("cross-entropy matches hand-computed example and is stable") {
    Eigen::MatrixXd logits(1, 2);
    logits << -5.0, 5.0;
    std::vector<int> label0 = {0};
    // log(1 + e^10)
    CHECK(ce_loss(logits, label0) == doctest::Approx(10.0000454).epsilon(1e-6));
    std::vector<int> label1 = {1};
    CHECK(ce_loss(logits, label1) == doctest::Approx(std::log1p(std::exp(-10.0))).epsilon(1e-9));
}

TEST_CASE("cross-entropy gradient matches finite differences") {
    Eigen::MatrixXd logits = rand_mat(5, 2, 21);
    std::vector<int> labels = {0, 1, 1, 0, 1};
    Eigen::MatrixXd d;
    double base = ce_loss_grad(logits, labels, d);
    CHECK(base == doctest::Approx(ce_loss(logits, labels)).epsilon(1e-12));
    for (int i = 0; i < logits.rows(); ++i) {
        for (int j = 0; j < logits.cols(); ++j) {
            Eigen::MatrixXd lp = logits, lm = logits;
            lp(i, j) += kFdH;
            lm(i, j) -= kFdH;
            double fd = (ce_loss(lp, labels) - ce_loss(lm, labels)) / (2 * kFdH);
            CHECK(std::abs(d(i, j) - fd) < kFdTol);
        }
    }
}

TEST_CASE("soft-target cross-entropy reduces to hard labels on one-hot rows") {
    Eigen::MatrixXd logits = rand_mat(4, 2, 33);
    std::vector<int> labels = {1, 0, 0, 1};
    Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(4, 2);
    for (int i = 0; i < 4; ++i) onehot(i, labels[i]) = 1.0;
    CHECK(ce_loss_soft(logits, onehot) == doctest::Approx(ce_loss(logits, labels)).epsilon(1e-12));

    Eigen::MatrixXd dh, dsoft;
    ce_loss_grad(logits, labels, dh);
    ce_loss_soft_grad(logits, onehot, dsoft);
    CHECK((dh - dsoft).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("soft-target cross-entropy gradient matches finite differences") {
    Eigen::MatrixXd logits = rand_mat(3, 2, 44);
    Eigen::MatrixXd targets(3, 2);
    targets << 0.7, 0.3, 0.1, 0.9, 0.5, 0.5;
    Eigen::MatrixXd d;
    ce_loss_soft_grad(logits, targets, d);
    for (int i = 0; i < logits.rows(); ++i) {
        for (int j = 0; j < logits.cols(); ++j) {
            Eigen::MatrixXd lp = logits, lm = logits;
            lp(i, j) += kFdH;
            lm(i, j) -= kFdH;
            double fd = (ce_loss_soft(lp, targets) - ce_loss_soft(lm, targets)) / (2 * kFdH);
            CHECK(std::abs(d(i, j) - fd) < kFdTol);
        }
    }
}

TEST_CASE("feature-storage batch loss ignores low-confidence rows and empty cells") {
    BinSpec spec;
    FeatureStore teacher = make_teacher_store(spec, 3, 5);
    Eigen::MatrixXd features = rand_mat(4, 3, 55);
    std::vector<int> labels = {0, 1, 0, 1};
    // All below lambda_a: nothing stored, loss over matched cells is zero.
    std::vector<double> low = {0.2, 0.3, 0.45, 0.49};
    CHECK(fsl_batch_loss(features, low, labels, spec, teacher) == 0.0);

    // A cell the teacher never populated contributes zero even when the
    // student populates it.
    FeatureStore empty_teacher(spec, 3);
    std::vector<double> conf = {0.55, 0.75, 0.95, 1.0};
    CHECK(fsl_batch_loss(features, conf, labels, spec, empty_teacher) == 0.0);
}

TEST_CASE("feature-storage batch loss matches a hand-built cell computation") {
    BinSpec spec;
    FeatureStore teacher(spec, 2);
    Eigen::Vector2d ta(1.0, 2.0), tb(3.0, -1.0);
    teacher.accumulate(ta, 0.55, 0);
    teacher.accumulate(tb, 0.57, 0); // same cell (bin 0, class 0): mean (2, 0.5)
    Eigen::MatrixXd features(2, 2);
    features << 4.0, 1.0, 0.0, 0.0;
    std::vector<double> conf = {0.52, 0.58};
    std::vector<int> labels = {0, 0};
    // Student cell mean (2, 0.5) equals the teacher aggregate: loss 0.
    CHECK(fsl_batch_loss(features, conf, labels, spec, teacher) ==
          doctest::Approx(0.0).epsilon(1e-12));

    features(1, 0) = 2.0; // student mean becomes (3, 0.5): squared distance 1
    CHECK(fsl_batch_loss(features, conf, labels, spec, teacher) ==
          doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("feature-storage gradient matches finite differences") {
    BinSpec spec;
    FeatureStore teacher = make_teacher_store(spec, 3, 9);
    Eigen::MatrixXd features = rand_mat(6, 3, 66);
    std::vector<double> conf = {0.55, 0.62, 0.40, 0.95, 1.0, 0.55};
    std::vector<int> labels = {0, 1, 0, 1, 0, 0};
    Eigen::MatrixXd d;
    double base = fsl_batch_loss_grad(features, conf, labels, spec, teacher, d);
    CHECK(base == doctest::Approx(fsl_batch_loss(features, conf, labels, spec, teacher))
                      .epsilon(1e-12));
    for (int i = 0; i < features.rows(); ++i) {
        for (int j = 0; j < features.cols(); ++j) {
            Eigen::MatrixXd fp = features, fm = features;
            fp(i, j) += kFdH;
            fm(i, j) -= kFdH;
            double fd = (fsl_batch_loss(fp, conf, labels, spec, teacher) -
                         fsl_batch_loss(fm, conf, labels, spec, teacher)) /
                        (2 * kFdH);
            CHECK(std::abs(d(i, j) - fd) < kFdTol);
        }
    }
    // Excluded row receives no gradient.
    CHECK(d.row(2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("store-side gradient is the exact cell-mean derivative at the refresh point") {
    BinSpec spec;
    FeatureStore teacher = make_teacher_store(spec, 3, 12);
    Eigen::MatrixXd features = rand_mat(5, 3, 77);
    std::vector<double> conf = {0.55, 0.55, 0.72, 0.95, 0.30};
    std::vector<int> labels = {0, 0, 1, 1, 0};
    FeatureStore student(spec, 3);
    for (int i = 0; i < 5; ++i) student.accumulate(features.row(i), conf[i], labels[i]);

    Eigen::MatrixXd d;
    double loss = fsl_store_grad(student, teacher, conf, labels, d);
    CHECK(loss == doctest::Approx(fsl_loss(student, teacher)).epsilon(1e-12));
    // At the refresh point the store-side value and gradient agree with the
    // differentiable batch-side formulation.
    Eigen::MatrixXd dbatch;
    double batch = fsl_batch_loss_grad(features, conf, labels, spec, teacher, dbatch);
    CHECK(loss == doctest::Approx(batch).epsilon(1e-12));
    CHECK((d - dbatch).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("combined objective is the exact weighted sum and honors zero weights") {
    BinSpec spec;
    FeatureStore teacher = make_teacher_store(spec, 4, 14);
    Eigen::MatrixXd tl = rand_mat(6, 2, 1);
    Eigen::MatrixXd sl = rand_mat(6, 2, 2);
    Eigen::MatrixXd sf = rand_mat(6, 4, 3);
    std::vector<double> conf(6);
    for (int i = 0; i < 6; ++i) conf[i] = softmax_t(sl.row(i), 1.0).maxCoeff();
    std::vector<int> labels = {0, 1, 0, 1, 1, 0};

    LossConfig cfg; // T = 20, all weights 1
    FretalGrads grads;
    LossBreakdown b = fretal_loss(tl, sl, sf, conf, labels, teacher, cfg, &grads);
    CHECK(b.kd == doctest::Approx(kd_loss(tl, sl, cfg.temperature)).epsilon(1e-12));
    CHECK(b.ce == doctest::Approx(ce_loss(sl, labels)).epsilon(1e-12));
    CHECK(b.fsl == doctest::Approx(fsl_batch_loss(sf, conf, labels, spec, teacher)).epsilon(1e-12));
    CHECK(b.total == doctest::Approx(b.fsl + b.kd + b.ce).epsilon(1e-12));

    // Degenerate weights reproduce the single-term paths bit for bit.
    LossConfig ft = cfg;
    ft.rho_fsl = 0.0;
    ft.rho_kd = 0.0;
    FretalGrads ft_grads;
    LossBreakdown bft = fretal_loss(tl, sl, sf, conf, labels, teacher, ft, &ft_grads);
    CHECK(bft.total == b.ce);
    Eigen::MatrixXd dce;
    ce_loss_grad(sl, labels, dce);
    CHECK((ft_grads.dlogits - dce).cwiseAbs().maxCoeff() == 0.0);

    LossConfig kd = cfg;
    kd.rho_fsl = 0.0;
    kd.rho_ce = 0.0;
    LossBreakdown bkd = fretal_loss(tl, sl, sf, conf, labels, teacher, kd);
    CHECK(bkd.total == kd_loss(tl, sl, cfg.temperature));
}

TEST_CASE("combined objective gradients match finite differences") {
    BinSpec spec;
    FeatureStore teacher = make_teacher_store(spec, 3, 18);
    Eigen::MatrixXd tl = rand_mat(4, 2, 4);
    Eigen::MatrixXd sl = rand_mat(4, 2, 5);
    Eigen::MatrixXd sf = rand_mat(4, 3, 6);
    std::vector<double> conf = {0.62, 0.55, 0.91, 1.0};
    std::vector<int> labels = {1, 0, 1, 0};
    LossConfig cfg;

    FretalGrads grads;
    fretal_loss(tl, sl, sf, conf, labels, teacher, cfg, &grads);
    // Confidences are held fixed: bin assignment is constant under the
    // perturbation, matching the loss's stated differentiation contract.
    auto eval_logits = [&](const Eigen::MatrixXd& l) {
        return fretal_loss(tl, l, sf, conf, labels, teacher, cfg).total;
    };
    auto eval_features = [&](const Eigen::MatrixXd& f) {
        return fretal_loss(tl, sl, f, conf, labels, teacher, cfg).total;
    };
    for (int i = 0; i < sl.rows(); ++i) {
        for (int j = 0; j < 2; ++j) {
            Eigen::MatrixXd lp = sl, lm = sl;
            lp(i, j) += kFdH;
            lm(i, j) -= kFdH;
            double fd = (eval_logits(lp) - eval_logits(lm)) / (2 * kFdH);
            CHECK(std::abs(grads.dlogits(i, j) - fd) < kFdTol);
        }
        for (int j = 0; j < 3; ++j) {
            Eigen::MatrixXd fp = sf, fm = sf;
            fp(i, j) += kFdH;
            fm(i, j) -= kFdH;
            double fd = (eval_features(fp) - eval_features(fm)) / (2 * kFdH);
            CHECK(std::abs(grads.dfeatures(i, j) - fd) < kFdTol);
        }
    }
}

TEST_CASE("loss configuration validation") {
    LossConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.temperature = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.temperature = 20.0;
    cfg.rho_kd = -1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("entropy basics") {
    Eigen::VectorXd uniform(2);
    uniform << 0.5, 0.5;
    CHECK(entropy(uniform) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    Eigen::VectorXd onehot(2);
    onehot << 1.0, 0.0;
    CHECK(entropy(onehot) == doctest::Approx(0.0).epsilon(1e-12));
}
