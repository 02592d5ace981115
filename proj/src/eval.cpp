#include "dfadapt/eval.hpp"

#include <map>

#include "dfadapt/errors.hpp"
#include "dfadapt/losses.hpp"

namespace dfadapt {

double f1_score(const std::vector<int>& predictions, const std::vector<int>& labels) {
    if (predictions.empty()) throw DataError("f1_score: empty input");
    if (predictions.size() != labels.size())
        throw DataError("f1_score: predictions/labels length mismatch");
    Confusion c;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        if (predictions[i] == 1)
            labels[i] == 1 ? ++c.tp : ++c.fp;
        else
            labels[i] == 1 ? ++c.fn : ++c.tn;
    }
    return c.f1();
}

EvalReport evaluate_model(const Model& model, const DomainDataset& dataset, Split split,
                          int threads, bool group_vote) {
    SampleRefs samples = dataset.split_refs(split);
    if (samples.empty())
        throw DataError("evaluate_model: split '" + std::string(split_name(split)) +
                        "' of domain '" + dataset.domain + "' is empty");
    auto outputs = forward(model, samples, threads);

    EvalReport report;
    report.checkpoint_hash = param_hash(model);
    report.domain = dataset.domain;
    report.split = split;
    report.samples = static_cast<long>(samples.size());

    if (!group_vote) {
        for (std::size_t i = 0; i < samples.size(); ++i) {
            int pred = outputs[i].logits[1] > outputs[i].logits[0] ? 1 : 0;
            if (pred == 1)
                samples[i]->label == 1 ? ++report.confusion.tp : ++report.confusion.fp;
            else
                samples[i]->label == 1 ? ++report.confusion.fn : ++report.confusion.tn;
        }
    } else {
        std::map<int, std::pair<int, int>> votes; // group -> (fake votes, total)
        std::map<int, int> group_label;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            int pred = outputs[i].logits[1] > outputs[i].logits[0] ? 1 : 0;
            auto& v = votes[samples[i]->group_id];
            v.first += pred;
            v.second += 1;
            group_label[samples[i]->group_id] = samples[i]->label;
        }
        for (const auto& [gid, v] : votes) {
            int pred = 2 * v.first >= v.second ? 1 : 0;
            if (pred == 1)
                group_label[gid] == 1 ? ++report.confusion.tp : ++report.confusion.fp;
            else
                group_label[gid] == 1 ? ++report.confusion.fn : ++report.confusion.tn;
        }
        // Voting scores one unit per group, not per frame.
        report.samples = static_cast<long>(votes.size());
    }
    report.f1 = report.confusion.f1();
    report.accuracy = report.confusion.accuracy();
    return report;
}

Eigen::MatrixXd zero_shot_matrix(const std::vector<const Model*>& teachers,
                                 const std::vector<const DomainDataset*>& domains, int threads) {
    if (teachers.empty() || domains.empty())
        throw DataError("zero_shot_matrix: need at least one teacher and one domain");
    Eigen::MatrixXd m(teachers.size(), domains.size());
    for (std::size_t i = 0; i < teachers.size(); ++i)
        for (std::size_t j = 0; j < domains.size(); ++j)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                evaluate_model(*teachers[i], *domains[j], Split::Test, threads).f1;
    return m;
}

} // namespace dfadapt
