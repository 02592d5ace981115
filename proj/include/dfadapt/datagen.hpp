#ifndef DFADAPT_DATAGEN_HPP
#define DFADAPT_DATAGEN_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "dfadapt/image.hpp"
#include "dfadapt/rng.hpp"

namespace dfadapt {

enum class Split { TeacherTrain, Adapt, Validation, Test };

const char* split_name(Split s);
Split split_from_name(const std::string& name);

// Manipulation fingerprint applied to fake frames of one domain. All domains
// share the same base face process; the fingerprint (plus a weak artifact
// common to every domain's fakes) is what distinguishes them.
struct DomainSpec {
    std::string name;
    double grid_strength = 0.0; // periodic texture amplitude
    double grid_period = 8.0;
    double seam_strength = 0.0; // blending-seam ring amplitude
    double seam_width = 0.05;   // ring half-width in normalized radius
    Eigen::Vector3d color_shift = Eigen::Vector3d::Zero();
    double shared_artifact = 4.0; // grid residue amplitude, same in every domain
    int jpeg_quality = 0;         // 0 = off (HQ); 1..100 = lossy LQ emulation

    void validate() const;
};

// Built-in fingerprints for three synthetic manipulation methods.
DomainSpec preset_domain(const std::string& name);

struct GenConfig {
    int n_groups = 110; // default split 75/10/12/13
    int clips_per_group = 16;
    int frames_per_clip = 5;
    std::uint64_t seed = 0;
};

struct Group {
    int group_id = 0;
    int label = 0;
    Split split = Split::TeacherTrain;
    std::vector<Sample> frames;
};

struct DomainDataset {
    std::string domain;
    std::vector<Group> groups;

    SampleRefs split_refs(Split s) const;
    int group_count(Split s) const;
    long sample_count() const;
};

// Deterministic per seed. "Real" groups come from the shared face process;
// "fake" groups additionally carry the domain fingerprint.
DomainDataset generate_domain(const DomainSpec& spec, const GenConfig& cfg);

// Directory layout: <root>/<domain>/<split>/<group_id>/<frame_index>.png
// plus <root>/manifest.csv with lines "domain,group_id,label,split".
void write_dataset(const DomainDataset& ds, const std::string& root);

// Ingestion contract replacing video decoding / face cropping: frames are
// pre-cropped images; non-square inputs are center-cropped (never stretched)
// and resized to 128x128. Groups with a frame count other than
// clips*frames_per_clip are accepted with a warning.
std::vector<DomainDataset> ingest_frames(const std::string& root,
                                         const std::string& manifest_path);

// CutMix with soft labels: a Beta(alpha, alpha) area fraction decides the
// patch copied from a random donor; the label mixes by realized area.
struct AugmentedBatch {
    std::vector<Image> images;
    Eigen::MatrixXd soft_labels; // batch x 2, rows sum to 1
};

AugmentedBatch cutmix(const SampleRefs& batch, double mix_probability, double alpha, Rng& rng);

} // namespace dfadapt

#endif
