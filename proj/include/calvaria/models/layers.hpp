#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "calvaria/core/rng.hpp"
#include "calvaria/models/tensor.hpp"

namespace calvaria::models {

/// 3x3x3 convolution, zero padding 1, stride 1 or 2.
/// Weights are He-initialized from the supplied generator; layout is
/// weight[cout][cin*27] with the kernel unrolled (kd, kh, kw) fastest.
class Conv3d {
public:
    Conv3d() = default;
    Conv3d(int cin, int cout, int stride, Rng& rng);

    Tensor4 forward(const Tensor4& x) const;

    /// Gradient of the loss w.r.t. the layer input. When
    /// `accumulate_param_grads` is set, also adds this call's weight and
    /// bias gradients into grad_weight/grad_bias.
    Tensor4 backward(const Tensor4& x, const Tensor4& dy,
                     bool accumulate_param_grads = true);

    /// Input gradient only (weights untouched); `in_grid` is the spatial
    /// shape of the layer input.
    Tensor4 input_gradient(const Shape3& in_grid, const Tensor4& dy) const;

    int cin() const { return cin_; }
    int cout() const { return cout_; }
    int stride() const { return stride_; }

    std::vector<float> weight;      // cout x (cin*27)
    std::vector<float> bias;        // cout
    std::vector<float> grad_weight; // same shape as weight
    std::vector<float> grad_bias;   // same shape as bias

private:
    int cin_ = 0, cout_ = 0, stride_ = 1;
};

enum class Act : std::uint8_t { none, lrelu, sigmoid };

Tensor4 activate(const Tensor4& x, Act act);
/// Backward through an activation given its *output* y.
Tensor4 activate_backward(const Tensor4& y, const Tensor4& dy, Act act);

/// Nearest-neighbour upsampling by 2 along depth/height/width.
Tensor4 upsample2(const Tensor4& x);
Tensor4 upsample2_backward(const Tensor4& dy);

/// 2x2x2 box-average downsampling (dims must be even).
Tensor4 avg_pool2(const Tensor4& x);
Tensor4 avg_pool2_backward(const Tensor4& dy);

/// One convolution block of a network: optional nearest upsample,
/// convolution, then activation.
struct Block {
    bool upsample_before = false;
    Conv3d conv;
    Act act = Act::lrelu;
};

/// Intermediates recorded by a forward pass so the matching backward pass
/// can run without recomputation.
struct BlockCache {
    Tensor4 conv_in; // input to the convolution (after any upsample)
    Tensor4 out;     // block output (after activation)
};

/// A straight chain of blocks. All networks in this module are expressed
/// as one or more Sequentials plus explicit heads.
struct Sequential {
    std::vector<Block> blocks;

    Tensor4 forward(const Tensor4& x, std::vector<BlockCache>* tape = nullptr) const;
    /// dy is the gradient at the chain output; returns gradient at the
    /// chain input. `tape` must come from a forward pass over the same
    /// input with the same weights.
    Tensor4 backward(const std::vector<BlockCache>& tape, const Tensor4& dy,
                     bool accumulate_param_grads = true);
};

/// Backward pass through a Sequential that leaves every weight gradient
/// untouched (usable on const networks: frozen features, generator-side
/// adversarial gradients).
Tensor4 sequential_input_gradient(const Sequential& s, const std::vector<BlockCache>& tape,
                                  const Tensor4& dy);

/// A named view of one parameter array and its gradient, used by the
/// optimizer and the checkpoint writer.
struct ParamRef {
    std::string name;
    std::vector<float>* value = nullptr;
    std::vector<float>* grad = nullptr;
};

void collect_params(Sequential& s, const std::string& prefix, std::vector<ParamRef>& out);
void collect_params(Conv3d& c, const std::string& prefix, std::vector<ParamRef>& out);
void zero_grads(const std::vector<ParamRef>& params);
void scale_grads(const std::vector<ParamRef>& params, float factor);

/// Adam optimizer over a parameter registry (beta1=0.9, beta2=0.999,
/// eps=1e-8). State arrays are keyed by registry order.
class Adam {
public:
    explicit Adam(double learning_rate = 1e-3) : lr_(learning_rate) {}

    void step(const std::vector<ParamRef>& params);
    void reset();

    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }

private:
    double lr_;
    std::int64_t t_ = 0;
    std::vector<std::vector<float>> m_, v_;
};

} // namespace calvaria::models
