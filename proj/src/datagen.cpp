#include "dfadapt/datagen.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>

#include "dfadapt/errors.hpp"

namespace fs = std::filesystem;

namespace dfadapt {

const char* split_name(Split s) {
    switch (s) {
        case Split::TeacherTrain: return "teacher-train";
        case Split::Adapt: return "adapt";
        case Split::Validation: return "validation";
        case Split::Test: return "test";
    }
    return "?";
}

Split split_from_name(const std::string& name) {
    if (name == "teacher-train") return Split::TeacherTrain;
    if (name == "adapt") return Split::Adapt;
    if (name == "validation") return Split::Validation;
    if (name == "test") return Split::Test;
    throw DataError("unknown split name: " + name);
}

void DomainSpec::validate() const {
    if (name.empty()) throw ConfigError("DomainSpec: name must not be empty");
    if (!(grid_strength >= 0.0) || !(seam_strength >= 0.0) || !(shared_artifact >= 0.0))
        throw ConfigError("DomainSpec: strengths must be non-negative");
    if (!(grid_period > 1.0)) throw ConfigError("DomainSpec: grid_period must exceed 1");
    if (!(seam_width > 0.0)) throw ConfigError("DomainSpec: seam_width must be positive");
    if (jpeg_quality < 0 || jpeg_quality > 100)
        throw ConfigError("DomainSpec: jpeg_quality must be in [0, 100]");
    if (grid_strength == 0.0 && seam_strength == 0.0 && color_shift.isZero())
        throw ConfigError("DomainSpec '" + name + "': fingerprint has no nonzero component");
}

DomainSpec preset_domain(const std::string& name) {
    DomainSpec spec;
    spec.name = name;
    if (name == "alpha") {
        spec.grid_strength = 16.0;
        spec.grid_period = 9.0;
    } else if (name == "beta") {
        spec.seam_strength = 28.0;
        spec.seam_width = 0.20;
    } else if (name == "gamma") {
        spec.color_shift = Eigen::Vector3d(24.0, -18.0, 14.0);
    } else {
        throw ConfigError("unknown preset domain: " + name);
    }
    return spec;
}

namespace {

struct TexComponent {
    double amp, fy, fx, phase;
};

struct FaceParams {
    double cx, cy, rx, ry;
    double skin[3], bg[3];
    std::vector<TexComponent> tex;
    double eye_off_x, eye_off_y, eye_r;
    double mouth_off_y, mouth_rx, mouth_ry;
};

double uni(Rng& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

FaceParams sample_face(Rng& rng) {
    FaceParams p;
    p.cx = 64 + uni(rng, -6, 6);
    p.cy = 64 + uni(rng, -6, 6);
    p.rx = 34 + uni(rng, -5, 5);
    p.ry = 44 + uni(rng, -5, 5);
    const double skin_base[3] = {200, 165, 140};
    const double bg_base[3] = {100, 110, 125};
    for (int c = 0; c < 3; ++c) {
        p.skin[c] = skin_base[c] + uni(rng, -25, 25);
        p.bg[c] = bg_base[c] + uni(rng, -35, 35);
    }
    p.tex.resize(6);
    for (auto& t : p.tex) {
        t.amp = uni(rng, 3, 9);
        t.fy = uni(rng, 0.03, 0.25);
        t.fx = uni(rng, 0.03, 0.25);
        t.phase = uni(rng, 0, 2 * std::numbers::pi);
    }
    p.eye_off_x = p.rx * uni(rng, 0.38, 0.5);
    p.eye_off_y = -p.ry * uni(rng, 0.2, 0.3);
    p.eye_r = uni(rng, 3, 5);
    p.mouth_off_y = p.ry * uni(rng, 0.4, 0.5);
    p.mouth_rx = p.rx * uni(rng, 0.35, 0.5);
    p.mouth_ry = uni(rng, 3, 6);
    return p;
}

// Small per-clip drift so frames within a group are correlated but clips
// differ, mimicking consecutive frames of one video.
void drift_face(FaceParams& p, Rng& rng) {
    p.cx += uni(rng, -4, 4);
    p.cy += uni(rng, -4, 4);
    p.rx += uni(rng, -2, 2);
    p.ry += uni(rng, -2, 2);
    for (int c = 0; c < 3; ++c) {
        p.skin[c] += uni(rng, -10, 10);
        p.bg[c] += uni(rng, -10, 10);
    }
    for (auto& t : p.tex) {
        t.amp += uni(rng, -1.5, 1.5);
        t.phase += uni(rng, -1.5, 1.5);
    }
}

void jpeg_roundtrip(Image& img, int quality) {
    cv::Mat bgr(img.height, img.width, CV_8UC3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            auto& px = bgr.at<cv::Vec3b>(y, x);
            px[0] = img.at(y, x, 2);
            px[1] = img.at(y, x, 1);
            px[2] = img.at(y, x, 0);
        }
    std::vector<unsigned char> buf;
    cv::imencode(".jpg", bgr, buf, {cv::IMWRITE_JPEG_QUALITY, quality});
    cv::Mat back = cv::imdecode(buf, cv::IMREAD_COLOR);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const auto& px = back.at<cv::Vec3b>(y, x);
            img.at(y, x, 0) = px[2];
            img.at(y, x, 1) = px[1];
            img.at(y, x, 2) = px[0];
        }
}

Image render_frame(const FaceParams& p, double dx, double dy, bool fake, bool fingerprint_on,
                   const DomainSpec& spec, Rng& noise_rng) {
    Image img;
    std::normal_distribution<double> sensor(0.0, 3.0);
    // Residue strength fluctuates frame to frame: visible in a minority of
    // frames of fingerprinted groups, always strong in fingerprint-free ones.
    double shared_amp = 0.0;
    if (fake && spec.shared_artifact > 0.0) {
        if (!fingerprint_on)
            shared_amp = spec.shared_artifact * 3.0;
        else
            shared_amp = uni(noise_rng, 0.0, 1.0) < 0.32 ? spec.shared_artifact * 2.0
                                                         : spec.shared_artifact * 0.25;
    }
    const double cx = p.cx + dx, cy = p.cy + dy;
    for (int y = 0; y < kImageSize; ++y) {
        for (int x = 0; x < kImageSize; ++x) {
            double u = (x - cx) / p.rx;
            double v = (y - cy) / p.ry;
            double e = u * u + v * v;
            bool inside = e <= 1.0;

            double tex = 0.0;
            for (const auto& t : p.tex)
                tex += t.amp * std::sin(t.fy * (y - dy) + t.fx * (x - dx) + t.phase);

            double col[3];
            const double chan_w[3] = {1.0, 0.9, 0.8};
            for (int c = 0; c < 3; ++c)
                col[c] = inside ? p.skin[c] + chan_w[c] * tex : p.bg[c] + 0.5 * tex;

            if (inside) {
                double ex = std::abs(x - cx) - p.eye_off_x;
                double ey = (y - cy) - p.eye_off_y;
                if (ex * ex + ey * ey < p.eye_r * p.eye_r)
                    for (double& c : col) c -= 60;
                double mx = (x - cx) / p.mouth_rx;
                double my = ((y - cy) - p.mouth_off_y) / p.mouth_ry;
                if (mx * mx + my * my < 1.0)
                    for (double& c : col) c -= 40;

                if (fake) {
                    if (fingerprint_on && spec.grid_strength > 0.0) {
                        double g = spec.grid_strength *
                                   std::sin(2 * std::numbers::pi * x / spec.grid_period) *
                                   std::sin(2 * std::numbers::pi * y / spec.grid_period);
                        for (double& c : col) c += g;
                    }
                    if (fingerprint_on && spec.seam_strength > 0.0) {
                        double t = std::sqrt(e);
                        if (std::abs(t - 0.8) < spec.seam_width) {
                            // Rippled blending boundary, zero-mean across the ring
                            // and chroma-only so it stays distinct from the
                            // luminance patterns of the other fingerprints.
                            double r = spec.seam_strength *
                                       std::cos(2 * std::numbers::pi * (t - 0.8) / spec.seam_width);
                            col[0] += r;
                            col[2] -= r;
                        }
                    }
                    if (fingerprint_on && v > 0.0)
                        for (int c = 0; c < 3; ++c) col[c] += spec.color_shift[c];

                    // Weak manipulation residue common to every domain; the
                    // cross-domain transfer knob.
                    if (shared_amp > 0.0) {
                        double a = shared_amp *
                                   std::sin(2 * std::numbers::pi * x / 12.0) *
                                   std::sin(2 * std::numbers::pi * y / 12.0);
                        for (double& c : col) c += a;
                    }
                }
            }
            for (int c = 0; c < 3; ++c) {
                double v2 = col[c] + sensor(noise_rng);
                img.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(v2, 0.0, 255.0));
            }
        }
    }
    if (spec.jpeg_quality > 0) jpeg_roundtrip(img, spec.jpeg_quality);
    return img;
}

Group generate_group(const DomainSpec& spec, int group_id, int label, Split split,
                     const GenConfig& cfg) {
    Group g;
    g.group_id = group_id;
    g.label = label;
    g.split = split;
    std::uint64_t gseed = derive_seed(cfg.seed, hash_str(spec.name), static_cast<std::uint64_t>(group_id));
    Rng grng(gseed);
    FaceParams base = sample_face(grng);
    // Per-group manipulation quality: residue amplitude varies across groups
    // (heavy near zero), and a small fraction of fake groups carry only the
    // shared residue with no domain fingerprint. Those groups are what forces
    // training to pick up the weak shared cue.
    bool fingerprint_on = !(label == 1 && uni(grng, 0.0, 1.0) < 0.12);
    int frame_index = 0;
    for (int clip = 0; clip < cfg.clips_per_group; ++clip) {
        Rng clip_rng(derive_seed(gseed, 0x10000ULL + static_cast<std::uint64_t>(clip)));
        FaceParams p = base;
        drift_face(p, clip_rng);
        for (int f = 0; f < cfg.frames_per_clip; ++f) {
            double dx = uni(clip_rng, -1.5, 1.5);
            double dy = uni(clip_rng, -1.5, 1.5);
            Rng noise_rng(derive_seed(gseed, 0x20000ULL + static_cast<std::uint64_t>(frame_index)));
            Sample s;
            s.image = render_frame(p, dx, dy, label == 1, fingerprint_on, spec, noise_rng);
            s.label = label;
            s.domain = spec.name;
            s.group_id = group_id;
            s.frame_index = frame_index;
            g.frames.push_back(std::move(s));
            ++frame_index;
        }
    }
    return g;
}

} // namespace

SampleRefs DomainDataset::split_refs(Split s) const {
    SampleRefs out;
    for (const auto& g : groups)
        if (g.split == s)
            for (const auto& f : g.frames) out.push_back(&f);
    return out;
}

int DomainDataset::group_count(Split s) const {
    int n = 0;
    for (const auto& g : groups)
        if (g.split == s) ++n;
    return n;
}

long DomainDataset::sample_count() const {
    long n = 0;
    for (const auto& g : groups) n += static_cast<long>(g.frames.size());
    return n;
}

DomainDataset generate_domain(const DomainSpec& spec, const GenConfig& cfg) {
    spec.validate();
    if (cfg.n_groups < 40)
        throw ConfigError("generate_domain: need at least 40 groups for all splits, got " +
                          std::to_string(cfg.n_groups));
    if (cfg.clips_per_group < 1 || cfg.frames_per_clip < 1)
        throw ConfigError("generate_domain: clips_per_group and frames_per_clip must be positive");

    // Adaptation gets exactly 10 groups; the rest splits 75 : 12.5 : 12.5.
    const int n_adapt = 10;
    int rest = cfg.n_groups - n_adapt;
    int n_train = static_cast<int>(std::lround(rest * 0.75));
    int n_val = static_cast<int>(rest * 0.125);
    int n_test = rest - n_train - n_val;

    DomainDataset ds;
    ds.domain = spec.name;
    ds.groups.reserve(static_cast<std::size_t>(cfg.n_groups));
    int gid = 0;
    auto emit = [&](Split split, int count) {
        for (int i = 0; i < count; ++i, ++gid)
            ds.groups.push_back(generate_group(spec, gid, gid % 2, split, cfg));
    };
    emit(Split::TeacherTrain, n_train);
    emit(Split::Adapt, n_adapt);
    emit(Split::Validation, n_val);
    emit(Split::Test, n_test);
    return ds;
}

namespace {

cv::Mat to_bgr(const Image& img) {
    cv::Mat bgr(img.height, img.width, CV_8UC3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            auto& px = bgr.at<cv::Vec3b>(y, x);
            px[0] = img.at(y, x, 2);
            px[1] = img.at(y, x, 1);
            px[2] = img.at(y, x, 0);
        }
    return bgr;
}

Image from_bgr(const cv::Mat& bgr) {
    Image img(bgr.rows, bgr.cols, 3);
    for (int y = 0; y < bgr.rows; ++y)
        for (int x = 0; x < bgr.cols; ++x) {
            const auto& px = bgr.at<cv::Vec3b>(y, x);
            img.at(y, x, 0) = px[2];
            img.at(y, x, 1) = px[1];
            img.at(y, x, 2) = px[0];
        }
    return img;
}

} // namespace

void write_dataset(const DomainDataset& ds, const std::string& root) {
    fs::path base(root);
    std::ofstream manifest;
    fs::create_directories(base);
    fs::path manifest_path = base / "manifest.csv";
    bool fresh = !fs::exists(manifest_path);
    manifest.open(manifest_path, std::ios::app);
    if (!manifest) throw DataError("write_dataset: cannot open " + manifest_path.string());
    if (fresh) manifest << "domain,group_id,label,split\n";

    for (const auto& g : ds.groups) {
        fs::path dir = base / ds.domain / split_name(g.split) / std::to_string(g.group_id);
        fs::create_directories(dir);
        for (const auto& f : g.frames) {
            fs::path file = dir / (std::to_string(f.frame_index) + ".png");
            if (!cv::imwrite(file.string(), to_bgr(f.image)))
                throw DataError("write_dataset: failed to write " + file.string());
        }
        manifest << ds.domain << "," << g.group_id << "," << (g.label == 1 ? "fake" : "real")
                 << "," << split_name(g.split) << "\n";
    }
}

std::vector<DomainDataset> ingest_frames(const std::string& root,
                                         const std::string& manifest_path) {
    std::ifstream manifest(manifest_path);
    if (!manifest) throw DataError("ingest: cannot open manifest " + manifest_path);

    std::vector<DomainDataset> out;
    auto dataset_for = [&out](const std::string& domain) -> DomainDataset& {
        for (auto& d : out)
            if (d.domain == domain) return d;
        out.push_back({domain, {}});
        return out.back();
    };

    std::string line;
    std::vector<std::string> bad_paths;
    bool first = true;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        if (first && line.rfind("domain,", 0) == 0) {
            first = false;
            continue;
        }
        first = false;
        std::istringstream ls(line);
        std::string domain, gid_s, label_s, split_s;
        if (!std::getline(ls, domain, ',') || !std::getline(ls, gid_s, ',') ||
            !std::getline(ls, label_s, ',') || !std::getline(ls, split_s))
            throw DataError("ingest: malformed manifest line: " + line);
        int label;
        if (label_s == "real") label = 0;
        else if (label_s == "fake") label = 1;
        else throw DataError("ingest: bad label '" + label_s + "' in line: " + line);

        Group g;
        g.group_id = std::stoi(gid_s);
        g.label = label;
        g.split = split_from_name(split_s);

        fs::path dir = fs::path(root) / domain / split_s / gid_s;
        if (!fs::is_directory(dir)) {
            bad_paths.push_back(dir.string());
            continue;
        }
        std::vector<std::pair<long, fs::path>> files;
        for (const auto& entry : fs::directory_iterator(dir)) {
            if (entry.path().extension() != ".png") continue;
            files.emplace_back(std::stol(entry.path().stem().string()), entry.path());
        }
        std::sort(files.begin(), files.end());
        if (files.empty()) {
            bad_paths.push_back(dir.string());
            continue;
        }
        if (files.size() != 80)
            std::cerr << "warning: group " << dir.string() << " has " << files.size()
                      << " frames (expected 80); using actual count\n";
        for (const auto& [idx, path] : files) {
            cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
            if (bgr.empty()) {
                bad_paths.push_back(path.string());
                continue;
            }
            // Center-crop to square, never stretch, then resize.
            int side = std::min(bgr.rows, bgr.cols);
            int y0 = (bgr.rows - side) / 2, x0 = (bgr.cols - side) / 2;
            cv::Mat square = bgr(cv::Rect(x0, y0, side, side));
            cv::Mat resized;
            if (side == kImageSize) resized = square.clone();
            else cv::resize(square, resized, cv::Size(kImageSize, kImageSize), 0, 0, cv::INTER_AREA);
            Sample s;
            s.image = from_bgr(resized);
            s.label = label;
            s.domain = domain;
            s.group_id = g.group_id;
            s.frame_index = static_cast<int>(idx);
            g.frames.push_back(std::move(s));
        }
        dataset_for(domain).groups.push_back(std::move(g));
    }
    if (!bad_paths.empty()) {
        std::string msg = "ingest: missing or unreadable paths:";
        for (const auto& p : bad_paths) msg += "\n  " + p;
        throw DataError(msg);
    }
    if (out.empty()) throw DataError("ingest: manifest lists no groups: " + manifest_path);
    return out;
}

AugmentedBatch cutmix(const SampleRefs& batch, double mix_probability, double alpha, Rng& rng) {
    AugmentedBatch out;
    out.images.reserve(batch.size());
    out.soft_labels.setZero(static_cast<Eigen::Index>(batch.size()), kNumClasses);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        out.images.push_back(batch[i]->image);
        out.soft_labels(static_cast<Eigen::Index>(i), batch[i]->label) = 1.0;
    }
    if (batch.size() < 2) {
        if (mix_probability > 0.0)
            std::cerr << "warning: cutmix skipped, batch has fewer than 2 samples\n";
        return out;
    }

    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::gamma_distribution<double> gamma(alpha, 1.0);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        if (unit(rng) >= mix_probability) continue;
        std::size_t j = std::uniform_int_distribution<std::size_t>(0, batch.size() - 2)(rng);
        if (j >= i) ++j;

        double ga = gamma(rng), gb = gamma(rng);
        double lam = (ga + gb > 0.0) ? ga / (ga + gb) : 0.5; // donor area fraction
        const Image& donor = batch[j]->image;
        Image& img = out.images[i];
        int W = img.width, H = img.height;
        int rw = static_cast<int>(std::lround(W * std::sqrt(lam)));
        int rh = static_cast<int>(std::lround(H * std::sqrt(lam)));
        int cx = std::uniform_int_distribution<int>(0, W - 1)(rng);
        int cy = std::uniform_int_distribution<int>(0, H - 1)(rng);
        int x0 = std::clamp(cx - rw / 2, 0, W), x1 = std::clamp(cx + (rw + 1) / 2, 0, W);
        int y0 = std::clamp(cy - rh / 2, 0, H), y1 = std::clamp(cy + (rh + 1) / 2, 0, H);
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x)
                for (int c = 0; c < kChannels; ++c) img.at(y, x, c) = donor.at(y, x, c);

        double area = static_cast<double>((x1 - x0) * (y1 - y0)) / (W * H);
        Eigen::RowVector2d mixed = Eigen::RowVector2d::Zero();
        mixed(batch[i]->label) += 1.0 - area;
        mixed(batch[j]->label) += area;
        out.soft_labels.row(static_cast<Eigen::Index>(i)) = mixed;
    }
    return out;
}

} // namespace dfadapt
