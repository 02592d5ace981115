#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "dfadapt/errors.hpp"
#include "dfadapt/eval.hpp"
#include "dfadapt/experiment.hpp"

namespace fs = std::filesystem;
using namespace dfadapt;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool config_required = true) {
    auto* c = cmd->add_option("--config", opts.config_path, "experiment config JSON");
    if (config_required) c->required();
    cmd->add_option("--out", opts.out, "output directory (default: $DFADAPT_OUT_ROOT or ./runs)");
    cmd->add_option("--seed", opts.seed, "override the config seed")
        ->each([&opts](const std::string&) { opts.seed_set = true; });
}

ExperimentConfig load(const CommonOpts& opts) {
    ExperimentConfig cfg = load_config(opts.config_path);
    if (opts.seed_set) {
        cfg.seed = opts.seed;
        cfg.teacher.seed = opts.seed;
        cfg.adaptation.seed = opts.seed;
    }
    if (!opts.out.empty()) cfg.out = opts.out;
    return cfg;
}

void print_report(const EvalReport& r) {
    std::cout << "{\"domain\": \"" << r.domain << "\", \"split\": \"" << split_name(r.split)
              << "\", \"checkpoint_hash\": \"" << r.checkpoint_hash
              << "\", \"tp\": " << r.confusion.tp << ", \"fp\": " << r.confusion.fp
              << ", \"tn\": " << r.confusion.tn << ", \"fn\": " << r.confusion.fn
              << ", \"accuracy\": " << r.accuracy << ", \"f1\": " << r.f1 << "}\n";
}

DomainDataset dataset_for(const ExperimentConfig& cfg, const std::string& domain,
                          const std::string& data_root) {
    if (data_root.empty()) return materialize_domain(cfg, domain);
    auto all = ingest_frames(data_root, (fs::path(data_root) / "manifest.csv").string());
    for (auto& d : all)
        if (d.domain == domain) return std::move(d);
    throw DataError("domain '" + domain + "' not found under " + data_root);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Teacher-student domain adaptation for real/fake image classifiers"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string domain, source, target, method_s = "fretal", checkpoint, split_s = "test";
    std::string data_root, manifest, teacher_path, report_dir;
    bool do_check = false, group_vote = false;
    CheckThresholds thresholds;

    auto* gen = app.add_subcommand("generate-data", "render configured domains as a PNG tree");
    add_common(gen, opts);
    gen->add_option("--domain", domain, "only this domain (default: all)");

    auto* ing = app.add_subcommand("ingest", "validate and summarize an ingested dataset tree");
    ing->add_option("--data", data_root, "dataset root")->required();
    ing->add_option("--manifest", manifest, "manifest path (default: <data>/manifest.csv)");

    auto* tt = app.add_subcommand("train-teacher", "train and freeze a source-domain teacher");
    add_common(tt, opts);
    tt->add_option("--domain", domain, "source domain")->required();
    tt->add_option("--data", data_root, "ingest from this tree instead of generating");

    auto* ad = app.add_subcommand("adapt", "adapt a student to a target domain");
    add_common(ad, opts);
    ad->add_option("--source", source, "source domain")->required();
    ad->add_option("--target", target, "target domain")->required();
    ad->add_option("--method", method_s, "fretal | kd | ft");
    ad->add_option("--teacher", teacher_path, "teacher checkpoint (default: train or reuse)");
    ad->add_option("--data", data_root, "ingest from this tree instead of generating");

    auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint on a domain split");
    add_common(ev, opts);
    ev->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    ev->add_option("--domain", domain, "domain to evaluate on")->required();
    ev->add_option("--split", split_s, "teacher-train | adapt | validation | test");
    ev->add_flag("--group-vote", group_vote, "majority vote per group instead of per frame");
    ev->add_option("--data", data_root, "ingest from this tree instead of generating");

    auto* zs = app.add_subcommand("zero-shot", "teacher-vs-domain F1 matrix");
    add_common(zs, opts);

    auto* rx = app.add_subcommand("run-experiment", "full (source, target, method) grid");
    add_common(rx, opts);

    auto* rp = app.add_subcommand("report", "summarize or threshold-check an output directory");
    rp->add_option("--dir", report_dir, "experiment output directory")->required();
    rp->add_flag("--check", do_check, "verify adaptation and zero-shot thresholds");
    rp->add_option("--ft-margin", thresholds.ft_margin, "required avg-F1 margin over ft");
    rp->add_option("--diag-min", thresholds.diag_min, "zero-shot diagonal floor");
    rp->add_option("--offdiag-gap", thresholds.offdiag_gap, "required diagonal/off-diagonal gap");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            ExperimentConfig cfg = load(opts);
            fs::path root = fs::path(cfg.out) / "data";
            for (const auto& d : cfg.domains) {
                if (!domain.empty() && d.spec.name != domain) continue;
                DomainDataset ds = materialize_domain(cfg, d.spec.name);
                write_dataset(ds, root.string());
                std::cout << "wrote " << ds.sample_count() << " frames for domain " << d.spec.name
                          << " under " << root.string() << "\n";
            }
        } else if (ing->parsed()) {
            if (manifest.empty()) manifest = (fs::path(data_root) / "manifest.csv").string();
            auto all = ingest_frames(data_root, manifest);
            for (const auto& d : all)
                std::cout << "domain " << d.domain << ": " << d.groups.size() << " groups, "
                          << d.sample_count() << " frames\n";
        } else if (tt->parsed()) {
            ExperimentConfig cfg = load(opts);
            DomainDataset ds = dataset_for(cfg, domain, data_root);
            bool cached = false;
            Model teacher = get_or_train_teacher(cfg, domain, ds, &cached);
            std::cout << (cached ? "cached" : "trained") << " teacher for " << domain
                      << ", source validation F1 " << teacher.metadata.at("source_val_f1")
                      << ", checkpoint hash " << param_hash(teacher) << "\n";
        } else if (ad->parsed()) {
            ExperimentConfig cfg = load(opts);
            DomainDataset tgt_ds = dataset_for(cfg, target, data_root);
            Model teacher = teacher_path.empty()
                                ? get_or_train_teacher(cfg, source,
                                                       dataset_for(cfg, source, data_root))
                                : load_checkpoint(teacher_path);
            AdaptationConfig ac = cfg.adaptation;
            ac.method = method_from_name(method_s);
            AdaptResult result = adapt_student(teacher, tgt_ds, ac);

            fs::path rdir = fs::path(cfg.out) / "adaptations" /
                            (source + "-to-" + target + "-" + method_s);
            fs::create_directories(rdir);
            save_checkpoint(result.student, (rdir / "student.ckpt").string());
            write_trace_csv(result.trace, ac.method, (rdir / "trace.csv").string());
            write_trace_svg(result.trace, ac.method, (rdir / "trace.svg").string());
            std::cout << "adaptation finished: stop reason " << result.trace.stop_reason
                      << ", best epoch " << result.trace.best_epoch << ", best target val F1 "
                      << result.trace.best_val_f1 << "\n";
            print_report(evaluate_model(result.student, tgt_ds, Split::Test, cfg.threads));
        } else if (ev->parsed()) {
            ExperimentConfig cfg = load(opts);
            DomainDataset ds = dataset_for(cfg, domain, data_root);
            Model model = load_checkpoint(checkpoint);
            print_report(
                evaluate_model(model, ds, split_from_name(split_s), cfg.threads, group_vote));
        } else if (zs->parsed()) {
            ExperimentConfig cfg = load(opts);
            Eigen::MatrixXd m = run_zero_shot(cfg);
            std::cout << "zero-shot F1 matrix (rows: teachers, cols: domains):\n" << m << "\n";
        } else if (rx->parsed()) {
            ExperimentConfig cfg = load(opts);
            auto summaries = run_experiment(cfg);
            int failures = 0;
            for (const auto& r : summaries)
                if (!r.ok) ++failures;
            std::cout << "wrote " << (fs::path(cfg.out) / "summary.csv").string() << " ("
                      << summaries.size() << " runs, " << failures << " failed)\n";
        } else if (rp->parsed()) {
            std::string details;
            if (do_check) {
                bool ok = check_reports(report_dir, thresholds, &details);
                std::cout << details;
                if (!ok) {
                    std::cerr << "report --check: thresholds not met\n";
                    return 4;
                }
            } else {
                std::ifstream is(fs::path(report_dir) / "summary.txt");
                if (!is) throw DataError("report: no summary.txt in " + report_dir);
                std::cout << is.rdbuf();
            }
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const ProtocolError& e) {
        std::cerr << "protocol error: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
