#pragma once

// Dense feed-forward networks with exact reverse-mode gradients and Adam.
//
// Batches are column-major: every column of an input matrix is one sample.

#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tdce/error.hpp"
#include "tdce/random.hpp"

namespace tdce::nn {

enum class Activation { relu, tanh, identity, softmax_groups };

inline std::string_view to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
        case Activation::identity: return "identity";
        case Activation::softmax_groups: return "softmax_groups";
    }
    return "identity";
}

inline Activation activation_from_string(std::string_view s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    if (s == "identity") return Activation::identity;
    if (s == "softmax_groups") return Activation::softmax_groups;
    throw ShapeError("unknown activation tag '" + std::string(s) + "'");
}

/// Contiguous output slice normalised by a softmax. Outputs that belong to no
/// group pass through unchanged.
struct Group {
    Eigen::Index offset = 0;
    Eigen::Index width = 0;
    bool operator==(const Group&) const = default;
};

struct DenseLayer {
    Eigen::MatrixXd weight;  // out x in
    Eigen::VectorXd bias;    // out
    Activation activation = Activation::identity;
    std::vector<Group> groups;  // only used by softmax_groups

    Eigen::Index in() const { return weight.cols(); }
    Eigen::Index out() const { return weight.rows(); }
};

struct DenseNetwork {
    std::vector<DenseLayer> layers;

    Eigen::Index input_dim() const { return layers.empty() ? 0 : layers.front().in(); }
    Eigen::Index output_dim() const { return layers.empty() ? 0 : layers.back().out(); }

    /// Throws ShapeError if consecutive layers disagree or parameters are not finite.
    void validate() const {
        if (layers.empty()) throw ShapeError("network has no layers");
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            if (l.bias.size() != l.out())
                throw ShapeError("layer " + std::to_string(i) + ": bias length does not match output width");
            if (i > 0 && layers[i - 1].out() != l.in())
                throw ShapeError("layer " + std::to_string(i) + ": input width " + std::to_string(l.in()) +
                                 " does not match previous output " + std::to_string(layers[i - 1].out()));
            if (!l.weight.allFinite() || !l.bias.allFinite())
                throw ShapeError("layer " + std::to_string(i) + ": non-finite parameter");
            for (const auto& g : l.groups)
                if (g.offset < 0 || g.width < 1 || g.offset + g.width > l.out())
                    throw ShapeError("layer " + std::to_string(i) + ": softmax group out of range");
        }
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
        return n;
    }
};

/// Layer-wise activations kept by forward() for an exact backward pass.
/// activations[0] is the (concatenated) network input; activations[i + 1] is
/// the output of layer i.
struct ForwardCache {
    std::vector<Eigen::MatrixXd> activations;
};

struct ForwardResult {
    Eigen::MatrixXd output;
    ForwardCache cache;
};

/// Per-parameter partial derivatives plus the derivative w.r.t. the network input.
struct GradientRecord {
    std::vector<Eigen::MatrixXd> weight;
    std::vector<Eigen::VectorXd> bias;
    Eigen::MatrixXd input;

    static GradientRecord zeros_like(const DenseNetwork& net) {
        GradientRecord g;
        for (const auto& l : net.layers) {
            g.weight.push_back(Eigen::MatrixXd::Zero(l.out(), l.in()));
            g.bias.push_back(Eigen::VectorXd::Zero(l.out()));
        }
        return g;
    }

    GradientRecord& operator+=(const GradientRecord& o) {
        for (std::size_t i = 0; i < weight.size(); ++i) {
            weight[i] += o.weight[i];
            bias[i] += o.bias[i];
        }
        return *this;
    }

    GradientRecord& operator*=(double s) {
        for (std::size_t i = 0; i < weight.size(); ++i) {
            weight[i] *= s;
            bias[i] *= s;
        }
        input *= s;
        return *this;
    }
};

namespace detail {

inline void apply_activation(const DenseLayer& layer, Eigen::MatrixXd& z) {
    switch (layer.activation) {
        case Activation::relu: z = z.cwiseMax(0.0); break;
        case Activation::tanh: z = z.array().tanh().matrix(); break;
        case Activation::identity: break;
        case Activation::softmax_groups:
            for (const auto& g : layer.groups) {
                auto block = z.middleRows(g.offset, g.width);
                for (Eigen::Index j = 0; j < block.cols(); ++j) {
                    auto col = block.col(j);
                    const double m = col.maxCoeff();
                    col = (col.array() - m).exp().matrix();
                    col /= col.sum();
                }
            }
            break;
    }
}

// Converts dL/d(output) into dL/d(pre-activation) in place.
inline void activation_backward(const DenseLayer& layer, const Eigen::MatrixXd& out, Eigen::MatrixXd& grad) {
    switch (layer.activation) {
        case Activation::relu: grad = (out.array() > 0.0).select(grad, 0.0); break;
        case Activation::tanh: grad.array() *= 1.0 - out.array().square(); break;
        case Activation::identity: break;
        case Activation::softmax_groups:
            for (const auto& g : layer.groups) {
                auto y = out.middleRows(g.offset, g.width);
                auto dy = grad.middleRows(g.offset, g.width);
                for (Eigen::Index j = 0; j < y.cols(); ++j) {
                    const double dot = y.col(j).dot(dy.col(j));
                    dy.col(j) = y.col(j).cwiseProduct((dy.col(j).array() - dot).matrix());
                }
            }
            break;
    }
}

}  // namespace detail

/// Runs the network on a batch. When `time_embedding` is non-empty it is
/// appended below `input` (same number of columns) before the first layer.
inline ForwardResult forward(const DenseNetwork& net, const Eigen::MatrixXd& input,
                             const Eigen::MatrixXd& time_embedding = Eigen::MatrixXd()) {
    if (net.layers.empty()) throw ShapeError("forward: empty network");
    ForwardResult r;
    Eigen::MatrixXd x;
    if (time_embedding.size() > 0) {
        if (time_embedding.cols() != input.cols())
            throw ShapeError("forward: time embedding batch size does not match input");
        x.resize(input.rows() + time_embedding.rows(), input.cols());
        x << input, time_embedding;
    } else {
        x = input;
    }
    if (x.rows() != net.input_dim())
        throw ShapeError("forward: input has " + std::to_string(x.rows()) + " rows, network expects " +
                         std::to_string(net.input_dim()));
    r.cache.activations.reserve(net.layers.size() + 1);
    r.cache.activations.push_back(std::move(x));
    for (const auto& layer : net.layers) {
        Eigen::MatrixXd z = layer.weight * r.cache.activations.back();
        z.colwise() += layer.bias;
        detail::apply_activation(layer, z);
        r.cache.activations.push_back(std::move(z));
    }
    r.output = r.cache.activations.back();
    return r;
}

inline Eigen::VectorXd forward_one(const DenseNetwork& net, const Eigen::VectorXd& input,
                                   const Eigen::VectorXd& time_embedding = Eigen::VectorXd()) {
    return forward(net, input, time_embedding).output.col(0);
}

enum class BackwardMode { full, input_only };

/// Reverse pass. `output_grad` holds dL/d(output) per column; parameter
/// gradients are summed over the batch. The returned `input` gradient covers
/// the concatenated input (features followed by any time embedding).
inline GradientRecord backward(const DenseNetwork& net, const ForwardCache& cache, const Eigen::MatrixXd& output_grad,
                               BackwardMode mode = BackwardMode::full) {
    if (cache.activations.size() != net.layers.size() + 1)
        throw ShapeError("backward: cache does not belong to this network");
    if (output_grad.rows() != net.output_dim() || output_grad.cols() != cache.activations.back().cols())
        throw ShapeError("backward: output gradient shape mismatch");
    GradientRecord g;
    if (mode == BackwardMode::full) {
        g.weight.resize(net.layers.size());
        g.bias.resize(net.layers.size());
    }
    Eigen::MatrixXd delta = output_grad;
    for (std::size_t k = net.layers.size(); k-- > 0;) {
        const auto& layer = net.layers[k];
        detail::activation_backward(layer, cache.activations[k + 1], delta);
        if (mode == BackwardMode::full) {
            g.weight[k] = delta * cache.activations[k].transpose();
            g.bias[k] = delta.rowwise().sum();
        }
        delta = layer.weight.transpose() * delta;
    }
    g.input = std::move(delta);
    return g;
}

inline bool all_finite(const GradientRecord& g) {
    for (std::size_t i = 0; i < g.weight.size(); ++i)
        if (!g.weight[i].allFinite() || !g.bias[i].allFinite()) return false;
    return true;
}

struct LayerSpec {
    Eigen::Index width;
    Activation activation;
    std::vector<Group> groups = {};
};

/// Builds an MLP with He (relu) or Glorot (otherwise) uniform initialisation
/// and zero biases.
inline DenseNetwork make_mlp(Eigen::Index input_dim, const std::vector<LayerSpec>& specs, Rng& rng) {
    DenseNetwork net;
    Eigen::Index in = input_dim;
    for (const auto& s : specs) {
        DenseLayer l;
        const double limit = s.activation == Activation::relu ? std::sqrt(6.0 / static_cast<double>(in))
                                                              : std::sqrt(6.0 / static_cast<double>(in + s.width));
        l.weight.resize(s.width, in);
        for (Eigen::Index j = 0; j < in; ++j)
            for (Eigen::Index i = 0; i < s.width; ++i) l.weight(i, j) = (2.0 * rng.uniform_open() - 1.0) * limit;
        l.bias = Eigen::VectorXd::Zero(s.width);
        l.activation = s.activation;
        l.groups = s.groups;
        net.layers.push_back(std::move(l));
        in = s.width;
    }
    net.validate();
    return net;
}

struct AdamState {
    GradientRecord first_moment;
    GradientRecord second_moment;
    long step = 0;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    static AdamState for_network(const DenseNetwork& net, double lr = 1e-3) {
        AdamState s;
        s.first_moment = GradientRecord::zeros_like(net);
        s.second_moment = GradientRecord::zeros_like(net);
        s.learning_rate = lr;
        return s;
    }
};

/// One bias-corrected Adam update, in place. Throws TrainingError naming the
/// first layer whose gradient is not finite; nothing is modified in that case.
inline void optimizer_step(DenseNetwork& net, const GradientRecord& grads, AdamState& state) {
    if (grads.weight.size() != net.layers.size() || state.first_moment.weight.size() != net.layers.size())
        throw ShapeError("optimizer_step: gradient record does not match network");
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        if (grads.weight[i].rows() != net.layers[i].out() || grads.weight[i].cols() != net.layers[i].in() ||
            grads.bias[i].size() != net.layers[i].out())
            throw ShapeError("optimizer_step: layer " + std::to_string(i) + " gradient shape mismatch");
        if (!grads.weight[i].allFinite() || !grads.bias[i].allFinite())
            throw TrainingError("optimizer_step: non-finite gradient in layer " + std::to_string(i));
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    auto update = [&](auto& param, const auto& g, auto& m, auto& v) {
        m = state.beta1 * m + (1.0 - state.beta1) * g;
        v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseProduct(g);
        param.array() -= state.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + state.epsilon);
    };
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        update(net.layers[i].weight, grads.weight[i], state.first_moment.weight[i], state.second_moment.weight[i]);
        update(net.layers[i].bias, grads.bias[i], state.first_moment.bias[i], state.second_moment.bias[i]);
    }
}

// ---------------------------------------------------------------------------
// Serialisation

inline nlohmann::json to_json(const DenseNetwork& net) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : net.layers) {
        nlohmann::json j;
        j["in"] = l.in();
        j["out"] = l.out();
        j["activation"] = std::string(to_string(l.activation));
        nlohmann::json groups = nlohmann::json::array();
        for (const auto& g : l.groups) groups.push_back({g.offset, g.width});
        j["groups"] = groups;
        std::vector<double> w(static_cast<std::size_t>(l.weight.size()));
        for (Eigen::Index r = 0; r < l.out(); ++r)
            for (Eigen::Index c = 0; c < l.in(); ++c) w[static_cast<std::size_t>(r * l.in() + c)] = l.weight(r, c);
        j["weight"] = w;
        j["bias"] = std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size());
        layers.push_back(std::move(j));
    }
    return {{"format", "tdce-dense-network"}, {"version", 1}, {"layers", layers}};
}

inline DenseNetwork network_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "tdce-dense-network" || j.value("version", 0) != 1)
        throw ShapeError("network json: unsupported format or version");
    DenseNetwork net;
    for (const auto& jl : j.at("layers")) {
        DenseLayer l;
        const auto in = jl.at("in").get<Eigen::Index>();
        const auto out = jl.at("out").get<Eigen::Index>();
        const auto w = jl.at("weight").get<std::vector<double>>();
        const auto b = jl.at("bias").get<std::vector<double>>();
        if (static_cast<Eigen::Index>(w.size()) != in * out || static_cast<Eigen::Index>(b.size()) != out)
            throw ShapeError("network json: parameter array length mismatch");
        l.weight.resize(out, in);
        for (Eigen::Index r = 0; r < out; ++r)
            for (Eigen::Index c = 0; c < in; ++c) l.weight(r, c) = w[static_cast<std::size_t>(r * in + c)];
        l.bias = Eigen::Map<const Eigen::VectorXd>(b.data(), out);
        l.activation = activation_from_string(jl.at("activation").get<std::string>());
        for (const auto& g : jl.at("groups")) l.groups.push_back({g.at(0).get<Eigen::Index>(), g.at(1).get<Eigen::Index>()});
        net.layers.push_back(std::move(l));
    }
    net.validate();
    return net;
}

}  // namespace tdce::nn
