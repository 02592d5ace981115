#ifndef DFADAPT_BACKBONE_HPP
#define DFADAPT_BACKBONE_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dfadapt/image.hpp"

namespace dfadapt {

// Penultimate features plus pre-softmax class scores for one input.
struct ModelOutput {
    Eigen::VectorXd features;
    Eigen::Vector2d logits;
};

struct ConvSpec {
    int out_channels;
    int kernel;
    int stride;
    int pad;
};

// Fixed small convnet: conv stack -> global average pool -> dense feature
// layer (ReLU) -> dense logits. The feature layer's activation is the
// representation compared across teacher and student.
struct Architecture {
    int input_size = kImageSize;
    int input_channels = kChannels;
    std::vector<ConvSpec> convs = {
        {8, 5, 3, 2},
        {16, 3, 2, 1},
        {32, 3, 2, 1},
        {32, 3, 2, 1},
    };
    int feature_dim = 32;

    std::string fingerprint() const;
};

struct ParamView {
    std::string name;
    double* data;
    Eigen::Index rows;
    Eigen::Index cols;
    Eigen::Index size() const { return rows * cols; }
};

// Per-sample activations saved by the forward pass for backprop.
struct ForwardCtx {
    std::vector<Eigen::MatrixXd> cols; // im2col buffers per conv
    std::vector<Eigen::MatrixXd> acts; // post-ReLU conv outputs, ch x (oh*ow)
    Eigen::VectorXd gap;
    Eigen::VectorXd feat_pre;
    Eigen::VectorXd features;
    Eigen::Vector2d logits;
};

// Gradients matching Model::param_views() order, flattened per parameter.
using GradBuffer = std::vector<Eigen::VectorXd>;

class Model {
public:
    Model() = default;
    explicit Model(const Architecture& arch, std::uint64_t init_seed);

    const Architecture& arch() const { return arch_; }
    int feature_dim() const { return arch_.feature_dim; }
    bool trainable() const { return trainable_; }
    void set_trainable(bool t) { trainable_ = t; }

    std::vector<ParamView> param_views();
    std::vector<ParamView> param_views() const; // views into const data, read-only by convention
    Eigen::Index num_params() const;

    ModelOutput forward_one(const Eigen::VectorXd& input) const;
    ModelOutput forward_one(const Eigen::VectorXd& input, ForwardCtx& ctx) const;

    // dlogits and an extra gradient injected directly at the feature layer
    // (the feature-storage loss path). Accumulates into grads.
    void backward_one(const ForwardCtx& ctx, const Eigen::Vector2d& dlogits,
                      const Eigen::VectorXd& dfeatures, GradBuffer& grads) const;

    GradBuffer zero_grads() const;

    std::map<std::string, std::string> metadata; // source domain, epoch, seed, ...

private:
    Architecture arch_;
    bool trainable_ = true;

    struct ConvLayer {
        ConvSpec spec;
        int in_c, in_h, in_w, out_h, out_w;
        Eigen::MatrixXd W; // out_c x (in_c*k*k)
        Eigen::VectorXd b;
    };
    std::vector<ConvLayer> convs_;
    Eigen::MatrixXd fc_feat_W_; // F x last_channels
    Eigen::VectorXd fc_feat_b_;
    Eigen::MatrixXd fc_out_W_; // 2 x F
    Eigen::VectorXd fc_out_b_;

    friend class Sgd;
};

// Batch forward with input validation per the model input contract.
// Deterministic; parallelizes over samples with a fixed output order.
std::vector<ModelOutput> forward(const Model& model, const std::vector<const Image*>& batch,
                                 int threads = 1);
std::vector<ModelOutput> forward(const Model& model, const SampleRefs& batch, int threads = 1);
std::vector<ModelOutput> forward(const Model& model, const std::vector<Sample>& batch,
                                 int threads = 1);

// Element-wise weight copy; throws on architecture mismatch. dst keeps its
// trainable flag.
void copy_weights(const Model& src, Model& dst);

void freeze(Model& model);

// SGD with momentum (v = mu*v + g; p -= lr*v). Refuses frozen models.
// max_grad_norm > 0 rescales each step's gradient to that global L2 norm
// when exceeded, which keeps runaway feedback through growing activations
// from diverging; 0 disables.
class Sgd {
public:
    Sgd(Model& model, double lr, double momentum, double max_grad_norm = 0.0);
    void step(const GradBuffer& grads);

private:
    Model* model_;
    double lr_, momentum_, max_grad_norm_;
    GradBuffer velocity_;
};

// Versioned checkpoint container with architecture fingerprint.
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

// SHA-256 hex digest over the serialized parameter arrays (names, shapes,
// raw values); metadata excluded.
std::string param_hash(const Model& model);

} // namespace dfadapt

#endif
