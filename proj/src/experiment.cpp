#include "dfadapt/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "dfadapt/errors.hpp"
#include "dfadapt/eval.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dfadapt {

namespace {

void check_keys(const json& j, const std::vector<std::string>& allowed, const std::string& ctx) {
    if (!j.is_object()) throw ConfigError("config: " + ctx + " must be an object");
    for (const auto& [key, _] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw ConfigError("config: unknown key '" + key + "' in " + ctx);
    }
}

template <typename T>
void get_to(const json& j, const char* key, T& out) {
    if (j.contains(key)) {
        try {
            j.at(key).get_to(out);
        } catch (const json::exception& e) {
            throw ConfigError("config: bad value for '" + std::string(key) + "': " + e.what());
        }
    }
}

DomainConfig parse_domain(const json& j) {
    check_keys(j,
               {"name", "preset", "n_groups", "clips_per_group", "frames_per_clip", "jpeg_quality",
                "grid_strength", "grid_period", "seam_strength", "seam_width", "color_shift",
                "shared_artifact"},
               "domains[]");
    if (!j.contains("name")) throw ConfigError("config: domain entry missing 'name'");
    DomainConfig d;
    std::string preset = j.value("preset", j.at("name").get<std::string>());
    d.spec = preset_domain(preset);
    d.spec.name = j.at("name").get<std::string>();
    get_to(j, "jpeg_quality", d.spec.jpeg_quality);
    get_to(j, "grid_strength", d.spec.grid_strength);
    get_to(j, "grid_period", d.spec.grid_period);
    get_to(j, "seam_strength", d.spec.seam_strength);
    get_to(j, "seam_width", d.spec.seam_width);
    get_to(j, "shared_artifact", d.spec.shared_artifact);
    if (j.contains("color_shift")) {
        auto v = j.at("color_shift").get<std::vector<double>>();
        if (v.size() != 3) throw ConfigError("config: color_shift must have 3 entries");
        d.spec.color_shift = Eigen::Vector3d(v[0], v[1], v[2]);
    }
    get_to(j, "n_groups", d.gen.n_groups);
    get_to(j, "clips_per_group", d.gen.clips_per_group);
    get_to(j, "frames_per_clip", d.gen.frames_per_clip);
    return d;
}

void parse_teacher(const json& j, TeacherConfig& t) {
    check_keys(j,
               {"lr", "momentum", "max_epochs", "patience", "batch_size", "cutmix", "cutmix_prob",
                "cutmix_alpha", "min_source_f1"},
               "teacher");
    get_to(j, "lr", t.lr);
    get_to(j, "momentum", t.momentum);
    get_to(j, "max_epochs", t.max_epochs);
    get_to(j, "patience", t.patience);
    get_to(j, "batch_size", t.batch_size);
    get_to(j, "cutmix", t.cutmix_enabled);
    get_to(j, "cutmix_prob", t.cutmix_prob);
    get_to(j, "cutmix_alpha", t.cutmix_alpha);
    get_to(j, "min_source_f1", t.min_source_f1);
}

void parse_adaptation(const json& j, AdaptationConfig& a) {
    check_keys(j,
               {"lambda_a", "lambda_b", "step", "temperature", "rho_fsl", "rho_kd", "rho_ce", "lr",
                "momentum", "max_epochs", "patience", "batch_size", "cutmix", "cutmix_prob",
                "cutmix_alpha", "store_refresh", "bin_by_teacher_confidence", "fsl_grad_clip", "max_grad_norm", "adapt_groups"},
               "adaptation");
    get_to(j, "lambda_a", a.bins.lambda_a);
    get_to(j, "lambda_b", a.bins.lambda_b);
    get_to(j, "step", a.bins.step);
    get_to(j, "temperature", a.loss.temperature);
    get_to(j, "rho_fsl", a.loss.rho_fsl);
    get_to(j, "rho_kd", a.loss.rho_kd);
    get_to(j, "rho_ce", a.loss.rho_ce);
    get_to(j, "lr", a.lr);
    get_to(j, "momentum", a.momentum);
    get_to(j, "max_epochs", a.max_epochs);
    get_to(j, "patience", a.patience);
    get_to(j, "batch_size", a.batch_size);
    get_to(j, "cutmix", a.cutmix_enabled);
    get_to(j, "cutmix_prob", a.cutmix_prob);
    get_to(j, "cutmix_alpha", a.cutmix_alpha);
    get_to(j, "bin_by_teacher_confidence", a.bin_by_teacher_confidence);
    get_to(j, "fsl_grad_clip", a.fsl_grad_clip);
    get_to(j, "max_grad_norm", a.max_grad_norm);
    get_to(j, "adapt_groups", a.adapt_groups);
    if (j.contains("store_refresh")) {
        std::string s = j.at("store_refresh").get<std::string>();
        if (s == "per-epoch") a.store_refresh = StoreRefresh::PerEpoch;
        else if (s == "per-batch") a.store_refresh = StoreRefresh::PerBatch;
        else throw ConfigError("config: store_refresh must be 'per-epoch' or 'per-batch'");
    }
}

} // namespace

std::string default_out_root() {
    if (const char* env = std::getenv("DFADAPT_OUT_ROOT"); env && *env) return env;
    return "runs";
}

ExperimentConfig parse_config_json(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    check_keys(j,
               {"seed", "adaptation_seeds", "out", "domains", "pairs", "methods", "teacher",
                "adaptation", "threads"},
               "top level");

    ExperimentConfig cfg;
    get_to(j, "seed", cfg.seed);
    get_to(j, "adaptation_seeds", cfg.adaptation_seeds);
    get_to(j, "out", cfg.out);
    get_to(j, "threads", cfg.threads);

    if (j.contains("domains"))
        for (const auto& dj : j.at("domains")) cfg.domains.push_back(parse_domain(dj));
    if (j.contains("pairs")) {
        for (const auto& pj : j.at("pairs")) {
            auto v = pj.get<std::vector<std::string>>();
            if (v.size() != 2) throw ConfigError("config: each pair must be [source, target]");
            cfg.pairs.emplace_back(v[0], v[1]);
        }
    }
    if (j.contains("methods")) {
        cfg.methods.clear();
        for (const auto& mj : j.at("methods"))
            cfg.methods.push_back(method_from_name(mj.get<std::string>()));
    }
    if (j.contains("teacher")) parse_teacher(j.at("teacher"), cfg.teacher);
    if (j.contains("adaptation")) parse_adaptation(j.at("adaptation"), cfg.adaptation);

    cfg.teacher.seed = cfg.seed;
    cfg.teacher.threads = cfg.threads;
    cfg.adaptation.seed = cfg.seed;
    cfg.adaptation.threads = cfg.threads;
    cfg.adaptation.validate();

    for (const auto& [src, tgt] : cfg.pairs) {
        find_domain(cfg, src);
        find_domain(cfg, tgt);
    }
    if (cfg.out.empty()) cfg.out = default_out_root() + "/experiment";
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_config_json(buf.str());
}

const DomainConfig& find_domain(const ExperimentConfig& cfg, const std::string& name) {
    for (const auto& d : cfg.domains)
        if (d.spec.name == name) return d;
    throw ConfigError("config: domain '" + name + "' is not defined");
}

DomainDataset materialize_domain(const ExperimentConfig& cfg, const std::string& name) {
    DomainConfig d = find_domain(cfg, name);
    d.gen.seed = cfg.seed;
    return generate_domain(d.spec, d.gen);
}

Model get_or_train_teacher(const ExperimentConfig& cfg, const std::string& domain,
                           const DomainDataset& dataset, bool* cached) {
    fs::path dir = fs::path(cfg.out) / "teachers";
    fs::create_directories(dir);
    fs::path ckpt = dir / (domain + "-seed" + std::to_string(cfg.seed) + ".ckpt");
    if (fs::exists(ckpt)) {
        Model m = load_checkpoint(ckpt.string());
        if (m.metadata.count("source_domain") && m.metadata.at("source_domain") == domain &&
            !m.trainable()) {
            if (cached) *cached = true;
            return m;
        }
    }
    if (cached) *cached = false;
    TeacherConfig tc = cfg.teacher;
    tc.seed = derive_seed(cfg.seed, hash_str("teacher"), hash_str(domain));
    Model teacher = train_teacher(dataset, tc);
    save_checkpoint(teacher, ckpt.string());
    return teacher;
}

namespace {

std::string run_dir_name(const RunSummary& r) {
    return r.source + "-to-" + r.target + "-" + method_name(r.method) + "-seed" +
           std::to_string(r.seed);
}

void write_report_json(const EvalReport& r, const std::string& which, std::ostream& os) {
    os << "  \"" << which << "\": {\"domain\": \"" << r.domain << "\", \"split\": \""
       << split_name(r.split) << "\", \"checkpoint_hash\": \"" << r.checkpoint_hash
       << "\", \"tp\": " << r.confusion.tp << ", \"fp\": " << r.confusion.fp
       << ", \"tn\": " << r.confusion.tn << ", \"fn\": " << r.confusion.fn
       << ", \"accuracy\": " << r.accuracy << ", \"f1\": " << r.f1 << "}";
}

std::string fmt_f1(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

} // namespace

std::vector<RunSummary> run_experiment(const ExperimentConfig& cfg) {
    if (cfg.pairs.empty()) throw ConfigError("run_experiment: no pairs configured");
    if (cfg.methods.empty()) throw ConfigError("run_experiment: no methods configured");
    fs::create_directories(cfg.out);

    std::vector<std::uint64_t> seeds =
        cfg.adaptation_seeds.empty() ? std::vector<std::uint64_t>{cfg.seed} : cfg.adaptation_seeds;

    // Materialize each referenced domain once.
    std::map<std::string, DomainDataset> data;
    for (const auto& [src, tgt] : cfg.pairs) {
        for (const auto& name : {src, tgt})
            if (!data.count(name)) data.emplace(name, materialize_domain(cfg, name));
    }

    std::map<std::string, Model> teachers;
    std::map<std::string, bool> teacher_cached;
    std::vector<RunSummary> summaries;
    std::ostringstream status_log;

    for (const auto& [src, tgt] : cfg.pairs) {
        if (!teachers.count(src)) {
            bool cached = false;
            teachers.emplace(src, get_or_train_teacher(cfg, src, data.at(src), &cached));
            teacher_cached[src] = cached;
        }
        for (Method method : cfg.methods) {
            for (std::uint64_t seed : seeds) {
                RunSummary rs;
                rs.source = src;
                rs.target = tgt;
                rs.method = method;
                rs.seed = seed;
                fs::path rdir = fs::path(cfg.out) / "adaptations" / run_dir_name(rs);
                try {
                    AdaptationConfig ac = cfg.adaptation;
                    ac.method = method;
                    ac.seed = derive_seed(seed, hash_str(src + "->" + tgt),
                                          hash_str(method_name(method)));
                    AdaptResult result = adapt_student(teachers.at(src), data.at(tgt), ac);

                    fs::create_directories(rdir);
                    save_checkpoint(result.student, (rdir / "student.ckpt").string());
                    write_trace_csv(result.trace, method, (rdir / "trace.csv").string());
                    write_trace_svg(result.trace, method, (rdir / "trace.svg").string());

                    EvalReport src_rep =
                        evaluate_model(result.student, data.at(src), Split::Test, cfg.threads);
                    EvalReport tgt_rep =
                        evaluate_model(result.student, data.at(tgt), Split::Test, cfg.threads);
                    std::ofstream rep(rdir / "report.json");
                    rep << "{\n";
                    write_report_json(src_rep, "source", rep);
                    rep << ",\n";
                    write_report_json(tgt_rep, "target", rep);
                    rep << ",\n  \"avg_f1\": " << (src_rep.f1 + tgt_rep.f1) / 2.0 << "\n}\n";

                    rs.ok = true;
                    rs.source_f1 = src_rep.f1;
                    rs.target_f1 = tgt_rep.f1;
                    rs.avg_f1 = (src_rep.f1 + tgt_rep.f1) / 2.0;
                } catch (const std::exception& e) {
                    rs.ok = false;
                    rs.error = e.what();
                    status_log << "ERROR " << run_dir_name(rs) << ": " << e.what() << "\n";
                }
                summaries.push_back(rs);
            }
        }
    }

    // Summary table; deterministic content only (no timings, no cache flags).
    std::ofstream csv(fs::path(cfg.out) / "summary.csv");
    csv << "source,target,method,seed,status,source_f1,target_f1,avg_f1\n";
    for (const auto& r : summaries) {
        csv << r.source << "," << r.target << "," << method_name(r.method) << "," << r.seed << ","
            << (r.ok ? "ok" : "error");
        if (r.ok)
            csv << "," << fmt_f1(r.source_f1) << "," << fmt_f1(r.target_f1) << ","
                << fmt_f1(r.avg_f1);
        else
            csv << ",,,";
        csv << "\n";
    }
    // Mean rows over adaptation seeds, per (pair, method).
    if (seeds.size() > 1) {
        for (const auto& [src, tgt] : cfg.pairs) {
            for (Method method : cfg.methods) {
                double s = 0, t = 0, a = 0;
                int n = 0;
                for (const auto& r : summaries)
                    if (r.ok && r.source == src && r.target == tgt && r.method == method) {
                        s += r.source_f1;
                        t += r.target_f1;
                        a += r.avg_f1;
                        ++n;
                    }
                if (n > 0)
                    csv << src << "," << tgt << "," << method_name(method) << ",mean,ok,"
                        << fmt_f1(s / n) << "," << fmt_f1(t / n) << "," << fmt_f1(a / n) << "\n";
            }
        }
    }
    csv.close();

    std::ofstream txt(fs::path(cfg.out) / "summary.txt");
    txt << "Adaptation summary (F1, fake = positive class)\n";
    for (const auto& [src, name_cached] : teacher_cached)
        txt << "teacher " << src << ": " << (name_cached ? "cached" : "trained") << "\n";
    txt << "\n";
    for (const auto& r : summaries) {
        txt << run_dir_name(r) << ": ";
        if (r.ok)
            txt << "source " << fmt_f1(r.source_f1) << "  target " << fmt_f1(r.target_f1)
                << "  avg " << fmt_f1(r.avg_f1) << "\n";
        else
            txt << "ERROR " << r.error << "\n";
    }
    if (!status_log.str().empty()) txt << "\n" << status_log.str();
    return summaries;
}

Eigen::MatrixXd run_zero_shot(const ExperimentConfig& cfg) {
    if (cfg.domains.empty()) throw ConfigError("zero-shot: no domains configured");
    fs::create_directories(cfg.out);

    std::vector<DomainDataset> datasets;
    for (const auto& d : cfg.domains) datasets.push_back(materialize_domain(cfg, d.spec.name));

    std::vector<Model> teachers;
    for (std::size_t i = 0; i < datasets.size(); ++i)
        teachers.push_back(get_or_train_teacher(cfg, cfg.domains[i].spec.name, datasets[i]));

    std::vector<const Model*> tp;
    std::vector<const DomainDataset*> dp;
    for (const auto& t : teachers) tp.push_back(&t);
    for (const auto& d : datasets) dp.push_back(&d);
    Eigen::MatrixXd m = zero_shot_matrix(tp, dp, cfg.threads);

    std::ofstream csv(fs::path(cfg.out) / "zero_shot.csv");
    csv << "teacher";
    for (const auto& d : cfg.domains) csv << "," << d.spec.name;
    csv << "\n";
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        csv << cfg.domains[static_cast<std::size_t>(i)].spec.name;
        for (Eigen::Index j = 0; j < m.cols(); ++j) csv << "," << fmt_f1(m(i, j));
        csv << "\n";
    }
    return m;
}

namespace {

struct SummaryRow {
    std::string source, target, method, seed, status;
    double source_f1 = 0, target_f1 = 0, avg_f1 = 0;
};

std::vector<SummaryRow> read_summary(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("check: cannot open " + path);
    std::vector<SummaryRow> rows;
    std::string line;
    std::getline(is, line); // header
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        SummaryRow r;
        std::string sf, tf, af;
        std::getline(ls, r.source, ',');
        std::getline(ls, r.target, ',');
        std::getline(ls, r.method, ',');
        std::getline(ls, r.seed, ',');
        std::getline(ls, r.status, ',');
        std::getline(ls, sf, ',');
        std::getline(ls, tf, ',');
        std::getline(ls, af, ',');
        if (r.status == "ok") {
            r.source_f1 = std::stod(sf);
            r.target_f1 = std::stod(tf);
            r.avg_f1 = std::stod(af);
        }
        rows.push_back(r);
    }
    return rows;
}

} // namespace

bool check_reports(const std::string& out_dir, const CheckThresholds& th, std::string* details) {
    std::ostringstream out;
    bool ok = true;

    fs::path summary = fs::path(out_dir) / "summary.csv";
    if (fs::exists(summary)) {
        auto rows = read_summary(summary.string());
        // Prefer seed-mean rows when present.
        auto pick = [&rows](const std::string& src, const std::string& tgt,
                            const std::string& method) -> const SummaryRow* {
            const SummaryRow* any = nullptr;
            for (const auto& r : rows) {
                if (r.source != src || r.target != tgt || r.method != method || r.status != "ok")
                    continue;
                if (r.seed == "mean") return &r;
                if (!any) any = &r;
            }
            return any;
        };
        std::vector<std::pair<std::string, std::string>> pairs;
        for (const auto& r : rows) {
            auto p = std::make_pair(r.source, r.target);
            if (std::find(pairs.begin(), pairs.end(), p) == pairs.end()) pairs.push_back(p);
        }
        for (const auto& [src, tgt] : pairs) {
            const SummaryRow* fretal = pick(src, tgt, "fretal");
            const SummaryRow* ft = pick(src, tgt, "ft");
            const SummaryRow* kd = pick(src, tgt, "kd");
            if (fretal && ft) {
                bool pass = fretal->avg_f1 >= ft->avg_f1 + th.ft_margin;
                ok &= pass;
                out << (pass ? "PASS" : "FAIL") << " " << src << "->" << tgt
                    << ": fretal avg " << fretal->avg_f1 << " vs ft avg + margin "
                    << ft->avg_f1 + th.ft_margin << "\n";
                bool retain = fretal->source_f1 >= ft->source_f1;
                ok &= retain;
                out << (retain ? "PASS" : "FAIL") << " " << src << "->" << tgt
                    << ": fretal source retention " << fretal->source_f1 << " vs ft "
                    << ft->source_f1 << "\n";
            }
            if (fretal && kd) {
                bool pass = fretal->avg_f1 >= kd->avg_f1;
                ok &= pass;
                out << (pass ? "PASS" : "FAIL") << " " << src << "->" << tgt << ": fretal avg "
                    << fretal->avg_f1 << " vs kd avg " << kd->avg_f1 << "\n";
            }
        }
    }

    fs::path zs = fs::path(out_dir) / "zero_shot.csv";
    if (fs::exists(zs)) {
        std::ifstream is(zs);
        std::string line;
        std::getline(is, line);
        std::vector<std::vector<double>> m;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            std::istringstream ls(line);
            std::string cell;
            std::getline(ls, cell, ','); // teacher name
            std::vector<double> row;
            while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
            m.push_back(row);
        }
        for (std::size_t i = 0; i < m.size(); ++i) {
            bool dpass = m[i][i] >= th.diag_min;
            ok &= dpass;
            out << (dpass ? "PASS" : "FAIL") << " zero-shot diagonal [" << i << "] = " << m[i][i]
                << " >= " << th.diag_min << "\n";
            for (std::size_t jcol = 0; jcol < m[i].size(); ++jcol) {
                if (jcol == i) continue;
                bool gpass = m[i][jcol] <= m[i][i] - th.offdiag_gap;
                ok &= gpass;
                out << (gpass ? "PASS" : "FAIL") << " zero-shot [" << i << "][" << jcol
                    << "] = " << m[i][jcol] << " <= diagonal - " << th.offdiag_gap << "\n";
            }
        }
    }

    if (!fs::exists(summary) && !fs::exists(zs))
        throw DataError("check: no summary.csv or zero_shot.csv in " + out_dir);
    if (details) *details = out.str();
    return ok;
}

void write_trace_svg(const TrainingTrace& trace, Method method, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("write_trace_svg: cannot open " + path);
    const int w = 640, h = 360, ml = 50, mr = 20, mt = 30, mb = 40;
    const int pw = w - ml - mr, ph = h - mt - mb;
    const int n = static_cast<int>(trace.epochs.size());

    double max_loss = 1e-9;
    for (const auto& r : trace.epochs)
        if (std::isfinite(r.total)) max_loss = std::max(max_loss, r.total);

    auto sx = [&](int epoch) { return ml + (n > 1 ? pw * epoch / (n - 1) : pw / 2); };
    auto sy_loss = [&](double v) { return mt + ph - static_cast<int>(ph * v / max_loss); };
    auto sy_f1 = [&](double v) { return mt + ph - static_cast<int>(ph * v); };

    auto polyline = [&os](const std::string& pts, const char* color) {
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\""
           << pts << "\"/>\n";
    };

    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
       << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << ml << "\" y=\"18\" font-size=\"13\">" << method_name(method)
       << " adaptation: total loss (blue, max " << max_loss << ") and validation F1 (green)"
       << "</text>\n";
    os << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\""
       << mt + ph << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph
       << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << ml + pw / 2 << "\" y=\"" << h - 10 << "\" font-size=\"11\">epoch</text>\n";

    std::ostringstream loss_pts, f1_pts;
    for (int i = 0; i < n; ++i) {
        const auto& r = trace.epochs[static_cast<std::size_t>(i)];
        if (std::isfinite(r.total)) loss_pts << sx(i) << "," << sy_loss(r.total) << " ";
        f1_pts << sx(i) << "," << sy_f1(r.val_f1) << " ";
    }
    polyline(loss_pts.str(), "#1f6fb5");
    polyline(f1_pts.str(), "#2f9e44");
    if (trace.best_epoch >= 0)
        os << "<circle cx=\"" << sx(trace.best_epoch) << "\" cy=\""
           << sy_f1(trace.best_val_f1) << "\" r=\"3\" fill=\"#2f9e44\"/>\n";
    os << "</svg>\n";
}

} // namespace dfadapt
