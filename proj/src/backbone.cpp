#include "dfadapt/backbone.hpp"

#include <openssl/evp.h>

#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "dfadapt/errors.hpp"
#include "dfadapt/parallel.hpp"
#include "dfadapt/rng.hpp"

namespace dfadapt {

Eigen::VectorXd Image::normalized() const {
    Eigen::VectorXd out(static_cast<Eigen::Index>(channels) * height * width);
    Eigen::Index idx = 0;
    for (int c = 0; c < channels; ++c)
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x)
                out[idx++] = (pixels[(static_cast<std::size_t>(y) * width + x) * channels + c] / 255.0 - 0.5) / 0.5;
    return out;
}

std::string Architecture::fingerprint() const {
    std::ostringstream os;
    os << "convnet-v1/" << input_channels << "x" << input_size << "x" << input_size;
    for (const auto& c : convs)
        os << "/c" << c.out_channels << "k" << c.kernel << "s" << c.stride << "p" << c.pad;
    os << "/f" << feature_dim;
    return os.str();
}

Model::Model(const Architecture& arch, std::uint64_t init_seed) : arch_(arch) {
    Rng rng(mix_seed(init_seed));
    auto he_init = [&rng](Eigen::MatrixXd& W, Eigen::Index fan_in) {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = dist(rng);
    };

    int ch = arch.input_channels;
    int hw = arch.input_size;
    for (const auto& spec : arch.convs) {
        ConvLayer layer;
        layer.spec = spec;
        layer.in_c = ch;
        layer.in_h = layer.in_w = hw;
        layer.out_h = layer.out_w = (hw + 2 * spec.pad - spec.kernel) / spec.stride + 1;
        layer.W.resize(spec.out_channels, ch * spec.kernel * spec.kernel);
        he_init(layer.W, layer.W.cols());
        layer.b = Eigen::VectorXd::Zero(spec.out_channels);
        convs_.push_back(std::move(layer));
        ch = spec.out_channels;
        hw = convs_.back().out_h;
    }
    fc_feat_W_.resize(arch.feature_dim, ch);
    he_init(fc_feat_W_, ch);
    fc_feat_b_ = Eigen::VectorXd::Zero(arch.feature_dim);
    fc_out_W_.resize(kNumClasses, arch.feature_dim);
    he_init(fc_out_W_, arch.feature_dim);
    fc_out_b_ = Eigen::VectorXd::Zero(kNumClasses);
}

std::vector<ParamView> Model::param_views() {
    std::vector<ParamView> views;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
        auto& l = convs_[i];
        views.push_back({"conv" + std::to_string(i) + ".W", l.W.data(), l.W.rows(), l.W.cols()});
        views.push_back({"conv" + std::to_string(i) + ".b", l.b.data(), l.b.size(), 1});
    }
    views.push_back({"fc_feat.W", fc_feat_W_.data(), fc_feat_W_.rows(), fc_feat_W_.cols()});
    views.push_back({"fc_feat.b", fc_feat_b_.data(), fc_feat_b_.size(), 1});
    views.push_back({"fc_out.W", fc_out_W_.data(), fc_out_W_.rows(), fc_out_W_.cols()});
    views.push_back({"fc_out.b", fc_out_b_.data(), fc_out_b_.size(), 1});
    return views;
}

std::vector<ParamView> Model::param_views() const {
    return const_cast<Model*>(this)->param_views();
}

Eigen::Index Model::num_params() const {
    Eigen::Index n = 0;
    for (const auto& v : param_views()) n += v.size();
    return n;
}

namespace {

// cols: (in_c*k*k) x (out_h*out_w), zero-padded out-of-bounds taps.
void im2col(const Eigen::MatrixXd& input, int in_c, int in_h, int in_w, int k, int stride,
            int pad, int out_h, int out_w, Eigen::MatrixXd& cols) {
    cols.setZero(in_c * k * k, out_h * out_w);
    for (int oy = 0; oy < out_h; ++oy) {
        for (int ox = 0; ox < out_w; ++ox) {
            int col = oy * out_w + ox;
            for (int ic = 0; ic < in_c; ++ic) {
                for (int ky = 0; ky < k; ++ky) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= in_h) continue;
                    for (int kx = 0; kx < k; ++kx) {
                        int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= in_w) continue;
                        cols((ic * k + ky) * k + kx, col) = input(ic, iy * in_w + ix);
                    }
                }
            }
        }
    }
}

void col2im(const Eigen::MatrixXd& dcols, int in_c, int in_h, int in_w, int k, int stride,
            int pad, int out_h, int out_w, Eigen::MatrixXd& dinput) {
    dinput.setZero(in_c, in_h * in_w);
    for (int oy = 0; oy < out_h; ++oy) {
        for (int ox = 0; ox < out_w; ++ox) {
            int col = oy * out_w + ox;
            for (int ic = 0; ic < in_c; ++ic) {
                for (int ky = 0; ky < k; ++ky) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= in_h) continue;
                    for (int kx = 0; kx < k; ++kx) {
                        int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= in_w) continue;
                        dinput(ic, iy * in_w + ix) += dcols((ic * k + ky) * k + kx, col);
                    }
                }
            }
        }
    }
}

} // namespace

ModelOutput Model::forward_one(const Eigen::VectorXd& input, ForwardCtx& ctx) const {
    const Eigen::Index expected =
        static_cast<Eigen::Index>(arch_.input_channels) * arch_.input_size * arch_.input_size;
    if (input.size() != expected)
        throw DataError("forward: input size " + std::to_string(input.size()) + " != expected " +
                        std::to_string(expected));
    if (!input.allFinite()) throw DataError("forward: non-finite value in input");

    ctx.cols.resize(convs_.size());
    ctx.acts.resize(convs_.size());

    Eigen::MatrixXd cur =
        Eigen::Map<const Eigen::MatrixXd>(input.data(), arch_.input_size * arch_.input_size,
                                          arch_.input_channels)
            .transpose(); // in_c x (h*w)

    for (std::size_t i = 0; i < convs_.size(); ++i) {
        const auto& l = convs_[i];
        im2col(cur, l.in_c, l.in_h, l.in_w, l.spec.kernel, l.spec.stride, l.spec.pad, l.out_h,
               l.out_w, ctx.cols[i]);
        Eigen::MatrixXd y = l.W * ctx.cols[i];
        y.colwise() += l.b;
        ctx.acts[i] = y.cwiseMax(0.0);
        cur = ctx.acts[i];
    }

    const auto& last = convs_.back();
    ctx.gap = cur.rowwise().mean();
    ctx.feat_pre = fc_feat_W_ * ctx.gap + fc_feat_b_;
    ctx.features = ctx.feat_pre.cwiseMax(0.0);
    ctx.logits = fc_out_W_ * ctx.features + fc_out_b_;
    (void)last;

    return {ctx.features, ctx.logits};
}

ModelOutput Model::forward_one(const Eigen::VectorXd& input) const {
    ForwardCtx ctx;
    return forward_one(input, ctx);
}

GradBuffer Model::zero_grads() const {
    GradBuffer g;
    for (const auto& v : param_views()) g.push_back(Eigen::VectorXd::Zero(v.size()));
    return g;
}

void Model::backward_one(const ForwardCtx& ctx, const Eigen::Vector2d& dlogits,
                         const Eigen::VectorXd& dfeatures, GradBuffer& grads) const {
    // Param order: conv{i}.W, conv{i}.b ..., fc_feat.W, fc_feat.b, fc_out.W, fc_out.b
    const std::size_t nconv = convs_.size();
    const std::size_t i_fcf_W = 2 * nconv, i_fcf_b = 2 * nconv + 1;
    const std::size_t i_fco_W = 2 * nconv + 2, i_fco_b = 2 * nconv + 3;

    Eigen::Map<Eigen::MatrixXd>(grads[i_fco_W].data(), fc_out_W_.rows(), fc_out_W_.cols()) +=
        dlogits * ctx.features.transpose();
    grads[i_fco_b] += dlogits;

    Eigen::VectorXd dfeat = fc_out_W_.transpose() * dlogits;
    if (dfeatures.size() > 0) dfeat += dfeatures;
    Eigen::VectorXd dfeat_pre =
        (ctx.feat_pre.array() > 0.0).select(dfeat.array(), 0.0).matrix();

    Eigen::Map<Eigen::MatrixXd>(grads[i_fcf_W].data(), fc_feat_W_.rows(), fc_feat_W_.cols()) +=
        dfeat_pre * ctx.gap.transpose();
    grads[i_fcf_b] += dfeat_pre;

    Eigen::VectorXd dgap = fc_feat_W_.transpose() * dfeat_pre;

    // Broadcast GAP gradient over spatial positions of the last conv output.
    const auto& lastl = convs_.back();
    const double inv_n = 1.0 / static_cast<double>(lastl.out_h * lastl.out_w);
    Eigen::MatrixXd dact = (dgap * inv_n) * Eigen::RowVectorXd::Ones(lastl.out_h * lastl.out_w);

    for (int i = static_cast<int>(nconv) - 1; i >= 0; --i) {
        const auto& l = convs_[i];
        Eigen::MatrixXd dy = (ctx.acts[i].array() > 0.0).select(dact.array(), 0.0).matrix();
        Eigen::Map<Eigen::MatrixXd>(grads[2 * i].data(), l.W.rows(), l.W.cols()) +=
            dy * ctx.cols[i].transpose();
        grads[2 * i + 1] += dy.rowwise().sum();
        if (i > 0) {
            Eigen::MatrixXd dcols = l.W.transpose() * dy;
            col2im(dcols, l.in_c, l.in_h, l.in_w, l.spec.kernel, l.spec.stride, l.spec.pad,
                   l.out_h, l.out_w, dact);
        }
    }
}

std::vector<ModelOutput> forward(const Model& model, const std::vector<const Image*>& batch,
                                 int threads) {
    for (std::size_t i = 0; i < batch.size(); ++i) {
        if (!batch[i]->standard_shape())
            throw DataError("forward: image at index " + std::to_string(i) + " has shape " +
                            std::to_string(batch[i]->height) + "x" + std::to_string(batch[i]->width) +
                            "x" + std::to_string(batch[i]->channels) + ", expected 128x128x3");
    }
    std::vector<ModelOutput> out(batch.size());
    parallel_for(static_cast<int>(batch.size()), threads,
                 [&](int i) { out[i] = model.forward_one(batch[i]->normalized()); });
    return out;
}

std::vector<ModelOutput> forward(const Model& model, const SampleRefs& batch, int threads) {
    std::vector<const Image*> ptrs;
    ptrs.reserve(batch.size());
    for (const auto* s : batch) ptrs.push_back(&s->image);
    return forward(model, ptrs, threads);
}

std::vector<ModelOutput> forward(const Model& model, const std::vector<Sample>& batch,
                                 int threads) {
    std::vector<const Image*> ptrs;
    ptrs.reserve(batch.size());
    for (const auto& s : batch) ptrs.push_back(&s.image);
    return forward(model, ptrs, threads);
}

void copy_weights(const Model& src, Model& dst) {
    if (src.arch().fingerprint() != dst.arch().fingerprint())
        throw DataError("copy_weights: incompatible architectures: " + src.arch().fingerprint() +
                        " vs " + dst.arch().fingerprint());
    auto sv = src.param_views();
    auto dv = dst.param_views();
    for (std::size_t i = 0; i < sv.size(); ++i)
        std::memcpy(dv[i].data, sv[i].data, sizeof(double) * sv[i].size());
}

void freeze(Model& model) { model.set_trainable(false); }

Sgd::Sgd(Model& model, double lr, double momentum, double max_grad_norm)
    : model_(&model), lr_(lr), momentum_(momentum), max_grad_norm_(max_grad_norm) {
    if (!model.trainable())
        throw ProtocolError("Sgd: cannot register parameters of a frozen model");
    velocity_ = model.zero_grads();
}

void Sgd::step(const GradBuffer& grads) {
    if (!model_->trainable())
        throw ProtocolError("Sgd::step: model was frozen after optimizer registration");
    auto views = model_->param_views();
    double scale = 1.0;
    if (max_grad_norm_ > 0.0) {
        double sq = 0.0;
        for (const auto& g : grads) sq += g.squaredNorm();
        double norm = std::sqrt(sq);
        if (norm > max_grad_norm_) scale = max_grad_norm_ / norm;
    }
    for (std::size_t i = 0; i < views.size(); ++i) {
        velocity_[i] = momentum_ * velocity_[i] + scale * grads[i];
        Eigen::Map<Eigen::VectorXd>(views[i].data, views[i].size()) -= lr_ * velocity_[i];
    }
}

namespace {

constexpr std::uint32_t kCheckpointMagic = 0x44464143; // "DFAC"
constexpr std::uint32_t kCheckpointVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void write_str(std::ostream& os, const std::string& s) {
    write_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
std::string read_str(std::istream& is) {
    std::uint64_t n = read_u64(is);
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    return s;
}

void serialize_params(const Model& model, std::ostream& os) {
    auto views = model.param_views();
    write_u64(os, views.size());
    for (const auto& v : views) {
        write_str(os, v.name);
        write_u64(os, static_cast<std::uint64_t>(v.rows));
        write_u64(os, static_cast<std::uint64_t>(v.cols));
        os.write(reinterpret_cast<const char*>(v.data),
                 static_cast<std::streamsize>(sizeof(double) * v.size()));
    }
}

} // namespace

void save_checkpoint(const Model& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("save_checkpoint: cannot open " + path);
    write_u32(os, kCheckpointMagic);
    write_u32(os, kCheckpointVersion);
    write_str(os, model.arch().fingerprint());
    write_u32(os, model.trainable() ? 1 : 0);
    write_u64(os, model.metadata.size());
    for (const auto& [k, v] : model.metadata) {
        write_str(os, k);
        write_str(os, v);
    }
    serialize_params(model, os);
    if (!os) throw DataError("save_checkpoint: write failed for " + path);
}

Model load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("load_checkpoint: cannot open " + path);
    if (read_u32(is) != kCheckpointMagic) throw DataError("load_checkpoint: bad magic in " + path);
    if (read_u32(is) != kCheckpointVersion)
        throw DataError("load_checkpoint: unsupported version in " + path);
    std::string fp = read_str(is);
    bool trainable = read_u32(is) != 0;

    Model model(Architecture{}, 0);
    if (fp != model.arch().fingerprint())
        throw DataError("load_checkpoint: architecture fingerprint mismatch: file has '" + fp +
                        "', expected '" + model.arch().fingerprint() + "'");
    model.set_trainable(trainable);

    std::uint64_t nmeta = read_u64(is);
    for (std::uint64_t i = 0; i < nmeta; ++i) {
        std::string k = read_str(is);
        model.metadata[k] = read_str(is);
    }

    std::uint64_t nparams = read_u64(is);
    auto views = model.param_views();
    if (nparams != views.size()) throw DataError("load_checkpoint: parameter count mismatch");
    for (auto& v : views) {
        std::string name = read_str(is);
        auto rows = static_cast<Eigen::Index>(read_u64(is));
        auto cols = static_cast<Eigen::Index>(read_u64(is));
        if (name != v.name || rows != v.rows || cols != v.cols)
            throw DataError("load_checkpoint: parameter layout mismatch at " + name);
        is.read(reinterpret_cast<char*>(v.data),
                static_cast<std::streamsize>(sizeof(double) * v.size()));
    }
    if (!is) throw DataError("load_checkpoint: truncated file " + path);
    return model;
}

std::string param_hash(const Model& model) {
    std::ostringstream os(std::ios::binary);
    serialize_params(model, os);
    std::string bytes = os.str();

    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);

    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

} // namespace dfadapt
