#ifndef CLOUDFUSE_GRAPH_HPP
#define CLOUDFUSE_GRAPH_HPP

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cloudfuse/tensor.hpp"

namespace cloudfuse {

// Named learnable tensors plus matching gradient buffers. std::map keeps
// iteration order stable, which the checkpoint format and the optimizer
// rely on for bitwise reproducibility.
template <typename T>
class ParameterSet {
public:
    Tensor<T>& add(const std::string& name, Tensor<T> value) {
        grads_[name] = Tensor<T>(value.shape());
        return values_[name] = std::move(value);
    }

    bool contains(const std::string& name) const { return values_.count(name) != 0; }

    Tensor<T>& value(const std::string& name) { return lookup(values_, name); }
    const Tensor<T>& value(const std::string& name) const { return lookup(values_, name); }
    Tensor<T>& grad(const std::string& name) { return lookup(grads_, name); }
    const Tensor<T>& grad(const std::string& name) const { return lookup(grads_, name); }

    std::map<std::string, Tensor<T>>& values() { return values_; }
    const std::map<std::string, Tensor<T>>& values() const { return values_; }
    std::map<std::string, Tensor<T>>& grads() { return grads_; }
    const std::map<std::string, Tensor<T>>& grads() const { return grads_; }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& [_, v] : values_) n += v.size();
        return n;
    }

    void zero_grad() {
        for (auto& [_, g] : grads_) g.fill(T(0));
    }

    template <typename U>
    ParameterSet<U> cast() const {
        ParameterSet<U> out;
        for (const auto& [k, v] : values_) out.add(k, v.template cast<U>());
        return out;
    }

private:
    template <typename Map>
    static auto& lookup(Map& m, const std::string& name) {
        auto it = m.find(name);
        if (it == m.end()) throw ValidationError("unknown parameter '" + name + "'");
        return it->second;
    }

    std::map<std::string, Tensor<T>> values_;
    std::map<std::string, Tensor<T>> grads_;
};

template <typename T>
class Graph;

template <typename T>
struct Var {
    Graph<T>* graph = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const { return graph->value(*this); }
    const Shape& shape() const { return value().shape(); }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so replaying
// them backwards is a valid topological order.
template <typename T>
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, const Tensor<T>& out_grad)>;

    // An inference graph treats parameters as constants and keeps no
    // backward closures.
    explicit Graph(bool track_params = true) : track_params_(track_params) {}

    Var<T> input(Tensor<T> value, bool requires_grad = false) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        return push(std::move(n));
    }

    Var<T> param(ParameterSet<T>& params, const std::string& name) {
        Node n;
        n.value = params.value(name);
        if (track_params_) {
            n.requires_grad = true;
            n.sink = &params.grad(name);
        }
        return push(std::move(n));
    }

    // Records the result of an op. `backward` is only kept when at least
    // one parent participates in differentiation.
    Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn backward) {
        return record(std::move(value), std::vector<Var<T>>(parents), std::move(backward));
    }

    Var<T> record(Tensor<T> value, const std::vector<Var<T>>& parents, BackwardFn backward) {
        Node n;
        n.value = std::move(value);
        for (const auto& p : parents) n.requires_grad = n.requires_grad || nodes_[p.id].requires_grad;
        if (n.requires_grad) n.backward = std::move(backward);
        return push(std::move(n));
    }

    const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }

    // Gradient buffer of `v`, allocated on first use. Returns nullptr when
    // the node does not take part in differentiation.
    Tensor<T>* grad_buffer(Var<T> v) {
        Node& n = nodes_.at(v.id);
        if (!n.requires_grad) return nullptr;
        if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<T>(n.value.shape());
        return &n.grad;
    }

    const Tensor<T>& grad(Var<T> v) {
        Tensor<T>* g = grad_buffer(v);
        if (!g) throw ValidationError("node does not require grad");
        return *g;
    }

    void backward(Var<T> root, const Tensor<T>& seed) {
        Tensor<T>* g = grad_buffer(root);
        if (!g) return;
        *g += seed;
        for (std::size_t i = root.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.empty()) continue;
            if (n.backward) n.backward(*this, n.grad);
            if (n.sink) *n.sink += n.grad;
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        BackwardFn backward;
        Tensor<T>* sink = nullptr;
        bool requires_grad = false;
    };

    Var<T> push(Node n) {
        nodes_.push_back(std::move(n));
        return Var<T>{this, nodes_.size() - 1};
    }

    // deque: references handed out by value() stay valid while recording.
    std::deque<Node> nodes_;
    bool track_params_ = true;
};

}  // namespace cloudfuse

#endif  // CLOUDFUSE_GRAPH_HPP
