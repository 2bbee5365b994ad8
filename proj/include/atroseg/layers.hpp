#pragma once

#include <cmath>

#include "atroseg/ops.hpp"
#include "atroseg/rng.hpp"
#include "atroseg/tensor.hpp"

namespace atroseg {

template <class T>
struct ConvLayer {
    ConvSpec spec;
    TensorPtr<T> weight;
    TensorPtr<T> bias;  // null unless spec.has_bias

    TensorPtr<T> forward(Graph<T>& g, const TensorPtr<T>& x) const {
        return conv2d(g, x, weight, bias, spec);
    }
};

// Gaussian weights with std sqrt(2 / fan_in); bias zero.
template <class T>
ConvLayer<T> make_conv_layer(Rng& rng, ConvSpec spec) {
    spec.validate();
    ConvLayer<T> layer;
    layer.spec = spec;
    layer.weight =
        make_tensor<T>(Shape(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel), true);
    const double stddev = std::sqrt(2.0 / static_cast<double>(spec.in_channels * spec.kernel * spec.kernel));
    for (T& v : layer.weight->data) v = static_cast<T>(stddev * rng.gaussian());
    if (spec.has_bias) layer.bias = make_tensor<T>(Shape(1, spec.out_channels, 1, 1), true);
    return layer;
}

template <class T>
struct BatchNormLayer {
    TensorPtr<T> gamma, beta;
    TensorPtr<T> running_mean, running_var;  // requires_grad = false
    double epsilon = 1e-5;
    double momentum = 0.9;

    TensorPtr<T> forward(Graph<T>& g, const TensorPtr<T>& x, bool training) const {
        return batch_norm(g, x, gamma, beta, running_mean, running_var, epsilon, momentum, training);
    }
};

template <class T>
BatchNormLayer<T> make_batch_norm_layer(std::int64_t channels, double epsilon = 1e-5,
                                        double momentum = 0.9) {
    BatchNormLayer<T> layer;
    layer.epsilon = epsilon;
    layer.momentum = momentum;
    layer.gamma = full<T>(Shape(1, channels, 1, 1), T(1), true);
    layer.beta = make_tensor<T>(Shape(1, channels, 1, 1), true);
    layer.running_mean = make_tensor<T>(Shape(1, channels, 1, 1), false);
    layer.running_var = full<T>(Shape(1, channels, 1, 1), T(1), false);
    return layer;
}

// Two conv+bn+relu units with an additive skip path:
//   out = relu(bn2(conv2(relu(bn1(conv1(x))))) + skip(x))
// The skip is a 1x1 stride-matched conv + bn whenever the first conv changes
// stride or channel count, identity otherwise.
template <class T>
struct ResidualBlock {
    ConvLayer<T> conv1, conv2;
    BatchNormLayer<T> bn1, bn2;
    bool has_projection = false;
    ConvLayer<T> proj;
    BatchNormLayer<T> proj_bn;

    TensorPtr<T> forward(Graph<T>& g, const TensorPtr<T>& x, bool training) const {
        auto f = relu(g, bn1.forward(g, conv1.forward(g, x), training));
        f = bn2.forward(g, conv2.forward(g, f), training);
        auto skip = has_projection ? proj_bn.forward(g, proj.forward(g, x), training) : x;
        return relu(g, add(g, f, skip));
    }
};

template <class T>
ResidualBlock<T> make_residual_block(Rng& rng, std::int64_t in_channels, std::int64_t channels,
                                     std::int64_t stride, std::int64_t rate, std::int64_t kernel = 3,
                                     double bn_epsilon = 1e-5, double bn_momentum = 0.9) {
    ResidualBlock<T> block;
    ConvSpec c1{in_channels, channels, kernel, stride, rate, ConvSpec::same_padding(kernel, rate), false};
    ConvSpec c2{channels, channels, kernel, 1, rate, ConvSpec::same_padding(kernel, rate), false};
    block.conv1 = make_conv_layer<T>(rng, c1);
    block.conv2 = make_conv_layer<T>(rng, c2);
    block.bn1 = make_batch_norm_layer<T>(channels, bn_epsilon, bn_momentum);
    block.bn2 = make_batch_norm_layer<T>(channels, bn_epsilon, bn_momentum);
    block.has_projection = stride != 1 || in_channels != channels;
    if (block.has_projection) {
        ConvSpec p{in_channels, channels, 1, stride, 1, 0, false};
        block.proj = make_conv_layer<T>(rng, p);
        block.proj_bn = make_batch_norm_layer<T>(channels, bn_epsilon, bn_momentum);
    }
    return block;
}

}  // namespace atroseg
