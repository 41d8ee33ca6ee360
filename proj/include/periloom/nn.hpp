#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "periloom/error.hpp"
#include "periloom/tensor_io.hpp"

namespace periloom::nn {

struct TensorSpec {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
    bool decay = false;  // receives weight decay (matrices only)
};

/// Named tensors laid out back to back in one flat buffer.
template <class T>
struct ParamSet {
    std::vector<TensorSpec> specs;
    std::vector<T> data;

    void add(std::string name, std::vector<int> shape, bool decay) {
        TensorSpec s;
        s.name = std::move(name);
        s.shape = std::move(shape);
        s.size = 1;
        for (int d : s.shape) s.size *= static_cast<std::size_t>(d);
        s.offset = data.size();
        s.decay = decay;
        data.resize(data.size() + s.size, T(0));
        specs.push_back(std::move(s));
    }

    std::size_t index_of(const std::string& name) const {
        for (std::size_t i = 0; i < specs.size(); ++i)
            if (specs[i].name == name) return i;
        throw InvariantError("no parameter tensor named '" + name + "'");
    }
    bool has(const std::string& name) const {
        for (const auto& s : specs)
            if (s.name == name) return true;
        return false;
    }

    T* ptr(const std::string& name) { return data.data() + specs[index_of(name)].offset; }
    const T* ptr(const std::string& name) const { return data.data() + specs[index_of(name)].offset; }
    std::span<T> view(std::size_t i) { return {data.data() + specs[i].offset, specs[i].size}; }
    std::span<const T> view(std::size_t i) const { return {data.data() + specs[i].offset, specs[i].size}; }

    ParamSet zeros_like() const {
        ParamSet z;
        z.specs = specs;
        z.data.assign(data.size(), T(0));
        return z;
    }
    void zero() { std::fill(data.begin(), data.end(), T(0)); }
    std::size_t count() const { return data.size(); }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    template <class U>
    ParamSet<U> cast() const {
        ParamSet<U> out;
        out.specs = specs;
        out.data.assign(data.begin(), data.end());
        return out;
    }

    void write(tensor_io::Container& c, const std::string& prefix) const {
        for (std::size_t i = 0; i < specs.size(); ++i) {
            std::vector<std::int64_t> shape(specs[i].shape.begin(), specs[i].shape.end());
            c.add<T>(prefix + specs[i].name, std::move(shape), view(i));
        }
    }
    /// Fills an already-shaped set; every tensor must be present with a matching shape.
    void read(const tensor_io::Container& c, const std::string& prefix) {
        for (std::size_t i = 0; i < specs.size(); ++i) {
            std::vector<std::int64_t> shape(specs[i].shape.begin(), specs[i].shape.end());
            auto v = c.get<T>(prefix + specs[i].name, shape);
            std::copy(v.begin(), v.end(), view(i).begin());
        }
    }
};

struct AdamConfig {
    double learning_rate = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// Adam with decoupled weight decay on tensors flagged `decay`.
template <class T>
class Adam {
public:
    Adam() = default;
    Adam(const ParamSet<T>& params, AdamConfig cfg)
        : cfg_(cfg), m_(params.count(), T(0)), v_(params.count(), T(0)) {}

    void step(ParamSet<T>& params, const ParamSet<T>& grads, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
        const T step = static_cast<T>(lr / bc1);
        const T inv_bc2 = static_cast<T>(1.0 / bc2);
        const T eps = static_cast<T>(cfg_.eps);
        const T decay = static_cast<T>(lr * cfg_.weight_decay);
        for (const auto& s : params.specs) {
            T* p = params.data.data() + s.offset;
            const T* g = grads.data.data() + s.offset;
            T* m = m_.data() + s.offset;
            T* v = v_.data() + s.offset;
            for (std::size_t i = 0; i < s.size; ++i) {
                m[i] = b1 * m[i] + (T(1) - b1) * g[i];
                v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
                if (s.decay) p[i] -= decay * p[i];
                p[i] -= step * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
            }
        }
    }

    long steps() const { return t_; }

private:
    AdamConfig cfg_;
    std::vector<T> m_, v_;
    long t_ = 0;
};

}  // namespace periloom::nn
