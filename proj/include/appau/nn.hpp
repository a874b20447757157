#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "appau/autodiff.hpp"
#include "appau/random.hpp"
#include "appau/tensor.hpp"

namespace appau {

/// Forward context. Train and Frozen both use per-batch normalization
/// statistics and active dropout; Frozen leaves the running averages (and any
/// other model state) untouched, which is what the adversary's loop needs when
/// one network is evaluated inside the other's update. Eval is deterministic:
/// running statistics, no dropout.
enum class Mode { Train, Frozen, Eval };

struct Context {
    Mode mode = Mode::Eval;
    RngStream* rng = nullptr;  // dropout stream; required when dropout is active

    bool stochastic() const { return mode != Mode::Eval; }
    BnStats bn_stats() const {
        switch (mode) {
            case Mode::Train: return BnStats::BatchUpdate;
            case Mode::Frozen: return BnStats::Batch;
            default: return BnStats::Running;
        }
    }
};

/// A named trainable leaf. `frozen` temporarily excludes it from gradient
/// propagation (used when backpropagating through a fixed adversary).
template <typename S>
struct Parameter {
    std::string name;
    Var<S> var;

    Parameter() = default;
    Parameter(std::string n, Tensor<S> t) : name(std::move(n)), var(Var<S>::leaf(std::move(t))) {}

    Tensor<S>& value() { return var.value(); }
    const Tensor<S>& value() const { return var.value(); }
    Tensor<S>& grad() { return var.grad(); }
    void set_frozen(bool f) { var.node()->requires_grad = !f; }
};

/// A named non-trainable buffer (e.g. batch-norm running statistics).
template <typename S>
struct Buffer {
    std::string name;
    Tensor<S> value;
};

/// Flat registry of parameters and buffers under canonical dotted paths.
/// Modules register into one of these at construction time.
template <typename S>
class ParamStore {
public:
    Parameter<S>& add_param(const std::string& path, Tensor<S> init) {
        params_.push_back(std::make_unique<Parameter<S>>(path, std::move(init)));
        return *params_.back();
    }
    Buffer<S>& add_buffer(const std::string& path, Tensor<S> init) {
        buffers_.push_back(std::make_unique<Buffer<S>>(Buffer<S>{path, std::move(init)}));
        return *buffers_.back();
    }

    std::vector<Parameter<S>*> parameters() {
        std::vector<Parameter<S>*> out;
        out.reserve(params_.size());
        for (auto& p : params_) out.push_back(p.get());
        return out;
    }
    std::vector<const Parameter<S>*> parameters() const {
        std::vector<const Parameter<S>*> out;
        out.reserve(params_.size());
        for (auto& p : params_) out.push_back(p.get());
        return out;
    }
    std::vector<Buffer<S>*> buffers() {
        std::vector<Buffer<S>*> out;
        out.reserve(buffers_.size());
        for (auto& b : buffers_) out.push_back(b.get());
        return out;
    }
    std::vector<const Buffer<S>*> buffers() const {
        std::vector<const Buffer<S>*> out;
        out.reserve(buffers_.size());
        for (auto& b : buffers_) out.push_back(b.get());
        return out;
    }

    std::int64_t parameter_count() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += p->var.value().shape().size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p->var.node()->zero_grad();
    }
    void set_frozen(bool f) {
        for (auto& p : params_) p->set_frozen(f);
    }

    /// Hash over parameter bytes in registration order.
    std::uint64_t state_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& p : params_) {
            h = fnv1a(p->name.data(), p->name.size(), h);
            h = tensor_hash(p->var.value(), h);
        }
        for (const auto& b : buffers_) {
            h = fnv1a(b->name.data(), b->name.size(), h);
            h = tensor_hash(b->value, h);
        }
        return h;
    }

    std::map<std::string, Tensor<S>> snapshot() const {
        std::map<std::string, Tensor<S>> out;
        for (const auto& p : params_) out[p->name] = p->var.value();
        for (const auto& b : buffers_) out[b->name] = b->value;
        return out;
    }
    void restore(const std::map<std::string, Tensor<S>>& snap) {
        for (auto& p : params_) {
            auto it = snap.find(p->name);
            detail::require(it != snap.end(), "ParamStore::restore: missing entry " + p->name);
            detail::require(it->second.shape() == p->var.value().shape(),
                            "ParamStore::restore: shape mismatch for " + p->name);
            p->var.value() = it->second;
        }
        for (auto& b : buffers_) {
            auto it = snap.find(b->name);
            detail::require(it != snap.end(), "ParamStore::restore: missing entry " + b->name);
            b->value = it->second;
        }
    }

private:
    std::vector<std::unique_ptr<Parameter<S>>> params_;
    std::vector<std::unique_ptr<Buffer<S>>> buffers_;
};

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

/// Fan-in-scaled normal init for convolutions feeding ReLU-family activations.
template <typename S>
Tensor<S> he_normal(Shape shape, RngStream& rng) {
    Tensor<S> t(shape);
    const double fan_in = static_cast<double>(shape.c) * shape.h * shape.w;
    const double std_dev = std::sqrt(2.0 / fan_in);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(rng.normal() * std_dev);
    return t;
}

/// Fan-average uniform init for convolutions feeding sigmoid outputs.
template <typename S>
Tensor<S> xavier_uniform(Shape shape, RngStream& rng) {
    Tensor<S> t(shape);
    const double fan_in = static_cast<double>(shape.c) * shape.h * shape.w;
    const double fan_out = static_cast<double>(shape.n) * shape.h * shape.w;
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(rng.uniform(-bound, bound));
    return t;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

enum class ConvInit { HeNormal, XavierUniform };

template <typename S>
struct Conv2d {
    Parameter<S>* weight = nullptr;
    Parameter<S>* bias = nullptr;  // null when bias disabled
    int stride = 1;
    int pad = 0;

    Conv2d() = default;
    Conv2d(ParamStore<S>& store, const std::string& path, int cin, int cout, int k, int stride_,
           int pad_, RngStream& rng, bool with_bias = true, ConvInit init = ConvInit::HeNormal) {
        const Shape ws(cout, cin, k, k);
        Tensor<S> w = init == ConvInit::HeNormal ? he_normal<S>(ws, rng) : xavier_uniform<S>(ws, rng);
        weight = &store.add_param(path + ".weight", std::move(w));
        if (with_bias) bias = &store.add_param(path + ".bias", Tensor<S>(Shape(1, cout, 1, 1)));
        stride = stride_;
        pad = pad_;
    }

    Var<S> operator()(const Var<S>& x) const {
        return bias ? conv2d(x, weight->var, bias->var, stride, pad)
                    : conv2d(x, weight->var, stride, pad);
    }
};

template <typename S>
struct BatchNorm2d {
    Parameter<S>* gamma = nullptr;
    Parameter<S>* beta = nullptr;
    Buffer<S>* running_mean = nullptr;
    Buffer<S>* running_var = nullptr;

    BatchNorm2d() = default;
    BatchNorm2d(ParamStore<S>& store, const std::string& path, int channels) {
        gamma = &store.add_param(path + ".gamma", Tensor<S>(Shape(1, channels, 1, 1), S(1)));
        beta = &store.add_param(path + ".beta", Tensor<S>(Shape(1, channels, 1, 1), S(0)));
        running_mean = &store.add_buffer(path + ".running_mean", Tensor<S>(Shape(1, channels, 1, 1), S(0)));
        running_var = &store.add_buffer(path + ".running_var", Tensor<S>(Shape(1, channels, 1, 1), S(1)));
    }

    Var<S> operator()(const Var<S>& x, const Context& ctx) const {
        return batch_norm2d(x, gamma->var, beta->var, running_mean->value, running_var->value,
                            ctx.bn_stats());
    }
};

/// 3x3 convolution + batch norm + ReLU, the basic block of both networks.
template <typename S>
struct ConvBnRelu {
    Conv2d<S> conv;
    BatchNorm2d<S> bn;

    ConvBnRelu() = default;
    ConvBnRelu(ParamStore<S>& store, const std::string& path, int cin, int cout, RngStream& rng,
               int k = 3, int stride = 1)
        : conv(store, path + ".conv", cin, cout, k, stride, k / 2, rng),
          bn(store, path + ".bn", cout) {}

    Var<S> operator()(const Var<S>& x, const Context& ctx) const { return relu(bn(conv(x), ctx)); }
};

}  // namespace appau
