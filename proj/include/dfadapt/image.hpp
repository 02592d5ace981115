#ifndef DFADAPT_IMAGE_HPP
#define DFADAPT_IMAGE_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

namespace dfadapt {

inline constexpr int kImageSize = 128;
inline constexpr int kChannels = 3;
inline constexpr int kNumClasses = 2; // 0 = real, 1 = fake

// 8-bit HWC image. Pixels are stored raw; models see the normalized view
// (v/255 - 0.5) / 0.5 in [-1, 1].
struct Image {
    int height = kImageSize;
    int width = kImageSize;
    int channels = kChannels;
    std::vector<std::uint8_t> pixels; // h * w * c, row-major HWC

    Image() : pixels(static_cast<std::size_t>(kImageSize) * kImageSize * kChannels, 0) {}
    Image(int h, int w, int c)
        : height(h), width(w), channels(c),
          pixels(static_cast<std::size_t>(h) * w * c, 0) {}

    std::uint8_t& at(int y, int x, int c) {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    std::uint8_t at(int y, int x, int c) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }

    bool standard_shape() const {
        return height == kImageSize && width == kImageSize && channels == kChannels;
    }

    // CHW vector normalized to [-1, 1], the model input layout.
    Eigen::VectorXd normalized() const;
};

struct Sample {
    Image image;
    int label = 0; // 0 real, 1 fake
    std::string domain;
    int group_id = 0;
    int frame_index = 0;
};

// Non-owning views over samples; splits can be large, so loops pass these.
using SampleRefs = std::vector<const Sample*>;

inline SampleRefs make_refs(const std::vector<Sample>& samples) {
    SampleRefs out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(&s);
    return out;
}

} // namespace dfadapt

#endif
