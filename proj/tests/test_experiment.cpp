#include <filesystem>
#include <fstream>

#include "dfadapt/errors.hpp"
#include "dfadapt/experiment.hpp"
#include "doctest.h"

using namespace dfadapt;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

const char* kMinimal = R"({
  "seed": 3,
  "out": "/tmp/dfadapt_test_out",
  "domains": [
    {"name": "alpha"},
    {"name": "beta-lq", "preset": "beta", "jpeg_quality": 50}
  ],
  "pairs": [["alpha", "beta-lq"]]
})";

} // namespace

TEST_CASE("minimal config parses with defaults") {
    ExperimentConfig cfg = parse_config_json(kMinimal);
    CHECK(cfg.seed == 3);
    CHECK(cfg.out == "/tmp/dfadapt_test_out");
    REQUIRE(cfg.domains.size() == 2);
    CHECK(cfg.domains[1].spec.name == "beta-lq");
    CHECK(cfg.domains[1].spec.jpeg_quality == 50);
    CHECK(cfg.domains[1].spec.seam_strength == preset_domain("beta").seam_strength);
    REQUIRE(cfg.pairs.size() == 1);
    CHECK(cfg.pairs[0].first == "alpha");

    // Defaults pinned by the training protocol.
    CHECK(cfg.adaptation.loss.temperature == 20.0);
    CHECK(cfg.adaptation.loss.rho_fsl == 1.0);
    CHECK(cfg.adaptation.loss.rho_kd == 1.0);
    CHECK(cfg.adaptation.loss.rho_ce == 1.0);
    CHECK(cfg.adaptation.lr == 0.05);
    CHECK(cfg.adaptation.momentum == 0.1);
    CHECK(cfg.adaptation.max_epochs == 100);
    CHECK(cfg.adaptation.patience == 5);
    CHECK(cfg.adaptation.batch_size == 32);
    CHECK(cfg.adaptation.bins.lambda_a == 0.5);
    CHECK(cfg.adaptation.bins.lambda_b == 1.0);
    CHECK(cfg.adaptation.bins.step == 0.1);
    CHECK(cfg.adaptation.store_refresh == StoreRefresh::PerEpoch);
    REQUIRE(cfg.methods.size() == 3);

    // The experiment seed reaches both training configs.
    CHECK(cfg.teacher.seed == 3);
    CHECK(cfg.adaptation.seed == 3);
}

TEST_CASE("unknown keys are rejected at every level") {
    CHECK_THROWS_AS(parse_config_json(R"({"sede": 1})"), ConfigError);
    CHECK_THROWS_AS(parse_config_json(R"({"domains": [{"name": "a", "spice": 1}]})"), ConfigError);
    CHECK_THROWS_AS(parse_config_json(R"({"teacher": {"lr": 0.1, "momentem": 0.9}})"), ConfigError);
    CHECK_THROWS_AS(parse_config_json(R"({"adaptation": {"tempperature": 10}})"), ConfigError);
    CHECK_THROWS_AS(parse_config_json("not json"), ConfigError);
}

TEST_CASE("config validation failures surface as config errors") {
    CHECK_THROWS_AS(parse_config_json(R"({"methods": ["finetune"]})"), ConfigError);
    CHECK_THROWS_AS(parse_config_json(R"({"pairs": [["a"]]})"), ConfigError);
    // Pair referencing an undefined domain.
    CHECK_THROWS_AS(parse_config_json(R"({"pairs": [["a", "b"]]})"), ConfigError);
    CHECK_THROWS_AS(parse_config_json(R"({"adaptation": {"temperature": 0}})"), ConfigError);
    CHECK_THROWS_AS(
        parse_config_json(R"({"domains": [{"name": "a", "color_shift": [1, 2]}]})"), ConfigError);
    CHECK_THROWS_AS(parse_config_json(R"({"adaptation": {"store_refresh": "sometimes"}})"),
                    ConfigError);
    CHECK_THROWS_AS(parse_config_json(R"({"domains": [{"name": "unknownpreset"}]})"), ConfigError);
}

TEST_CASE("find_domain and materialize_domain") {
    ExperimentConfig cfg = parse_config_json(kMinimal);
    CHECK(find_domain(cfg, "alpha").spec.name == "alpha");
    CHECK_THROWS_AS(find_domain(cfg, "gamma"), ConfigError);

    ExperimentConfig small = cfg;
    small.domains[0].gen.n_groups = 40;
    small.domains[0].gen.clips_per_group = 1;
    small.domains[0].gen.frames_per_clip = 1;
    DomainDataset a = materialize_domain(small, "alpha");
    DomainDataset b = materialize_domain(small, "alpha");
    CHECK(a.domain == "alpha");
    REQUIRE(a.groups.size() == b.groups.size());
    CHECK(a.groups[0].frames[0].image.pixels == b.groups[0].frames[0].image.pixels);
}

TEST_CASE("teacher cache is reused when a valid checkpoint exists") {
    TempDir dir("dfadapt_test_teachercache");
    ExperimentConfig cfg = parse_config_json(kMinimal);
    cfg.out = dir.path.string();

    // Seed the cache with a frozen model carrying the right provenance tag;
    // get_or_train_teacher must load it instead of training.
    Model m(Architecture{}, 77);
    m.metadata["source_domain"] = "alpha";
    freeze(m);
    fs::create_directories(dir.path / "teachers");
    save_checkpoint(m, (dir.path / "teachers" / "alpha-seed3.ckpt").string());

    DomainDataset unused; // never touched on a cache hit
    unused.domain = "alpha";
    bool cached = false;
    Model got = get_or_train_teacher(cfg, "alpha", unused, &cached);
    CHECK(cached);
    CHECK(param_hash(got) == param_hash(m));
    CHECK(!got.trainable());
}

TEST_CASE("run_experiment rejects empty grids") {
    ExperimentConfig cfg = parse_config_json(R"({"seed": 1, "out": "/tmp/dfadapt_test_empty"})");
    CHECK_THROWS_AS(run_experiment(cfg), ConfigError);
    cfg = parse_config_json(kMinimal);
    cfg.methods.clear();
    CHECK_THROWS_AS(run_experiment(cfg), ConfigError);
}

TEST_CASE("report checks pass and fail on the documented thresholds") {
    TempDir dir("dfadapt_test_checks");
    {
        std::ofstream csv(dir.path / "summary.csv");
        csv << "source,target,method,seed,status,source_f1,target_f1,avg_f1\n"
            << "a,b,ft,1,ok,0.700000,0.800000,0.750000\n"
            << "a,b,kd,1,ok,0.900000,0.600000,0.750000\n"
            << "a,b,fretal,1,ok,0.900000,0.800000,0.850000\n";
    }
    {
        std::ofstream csv(dir.path / "zero_shot.csv");
        csv << "teacher,a,b\n"
            << "a,0.980000,0.500000\n"
            << "b,0.400000,0.960000\n";
    }
    CheckThresholds th;
    std::string details;
    CHECK(check_reports(dir.path.string(), th, &details));
    CHECK(details.find("FAIL") == std::string::npos);
    CHECK(details.find("PASS a->b") != std::string::npos);

    // Raising the margin beyond the observed gap must flip the verdict.
    th.ft_margin = 0.2;
    CHECK(!check_reports(dir.path.string(), th, &details));
    CHECK(details.find("FAIL") != std::string::npos);
}

TEST_CASE("report checks prefer seed-mean rows") {
    TempDir dir("dfadapt_test_checkmean");
    std::ofstream csv(dir.path / "summary.csv");
    // Per-seed rows would fail the margin; the mean rows pass. The check must
    // read the mean rows.
    csv << "source,target,method,seed,status,source_f1,target_f1,avg_f1\n"
        << "a,b,ft,1,ok,0.900000,0.900000,0.900000\n"
        << "a,b,fretal,1,ok,0.500000,0.500000,0.500000\n"
        << "a,b,ft,mean,ok,0.600000,0.600000,0.600000\n"
        << "a,b,fretal,mean,ok,0.900000,0.900000,0.900000\n";
    csv.close();
    CheckThresholds th;
    std::string details;
    CHECK(check_reports(dir.path.string(), th, &details));
}

TEST_CASE("report checks flag weak zero-shot separations") {
    TempDir dir("dfadapt_test_checkzs");
    std::ofstream csv(dir.path / "zero_shot.csv");
    csv << "teacher,a,b\n"
        << "a,0.930000,0.500000\n" // diagonal below the floor
        << "b,0.900000,0.960000\n"; // off-diagonal within the gap
    csv.close();
    CheckThresholds th;
    std::string details;
    CHECK(!check_reports(dir.path.string(), th, &details));
    CHECK(details.find("FAIL zero-shot diagonal [0]") != std::string::npos);
    CHECK(details.find("FAIL zero-shot [1][0]") != std::string::npos);
}

TEST_CASE("report checks need at least one artifact") {
    TempDir dir("dfadapt_test_checkempty");
    CheckThresholds th;
    CHECK_THROWS_AS(check_reports(dir.path.string(), th, nullptr), DataError);
}

TEST_CASE("trace svg plots every epoch") {
    TrainingTrace trace;
    for (int e = 0; e < 4; ++e) {
        EpochRecord r;
        r.epoch = e;
        r.fsl = 1.0 / (e + 1);
        r.kd = 0.5;
        r.ce = 0.25;
        r.total = r.fsl + r.kd + r.ce;
        r.val_f1 = 0.5 + 0.1 * e;
        r.seconds = 1.0;
        trace.epochs.push_back(r);
    }
    trace.stop_reason = "max-epochs";
    trace.best_epoch = 3;
    trace.best_val_f1 = 0.8;

    fs::path path = fs::temp_directory_path() / "dfadapt_test_trace.svg";
    write_trace_svg(trace, Method::FReTAL, path.string());
    std::ifstream in(path);
    std::string svg((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(svg.rfind("<svg", 0) == 0);
    CHECK(svg.find("polyline") != std::string::npos);
    CHECK(svg.find("validation F1") != std::string::npos);
    fs::remove(path);
}

TEST_CASE("default out root honors the environment override") {
    // The default is the literal "runs" unless DFADAPT_OUT_ROOT is set; the
    // test environment does not set it.
    if (!std::getenv("DFADAPT_OUT_ROOT")) CHECK(default_out_root() == "runs");
}
