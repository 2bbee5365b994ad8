#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace atroseg {

// Dense 4-D extents in (batch, channel, height, width) order.
struct Shape {
    std::array<std::int64_t, 4> d{0, 0, 0, 0};

    Shape() = default;
    Shape(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) : d{n, c, h, w} {}

    std::int64_t n() const { return d[0]; }
    std::int64_t c() const { return d[1]; }
    std::int64_t h() const { return d[2]; }
    std::int64_t w() const { return d[3]; }
    std::int64_t numel() const { return d[0] * d[1] * d[2] * d[3]; }

    bool operator==(const Shape&) const = default;

    std::string str() const {
        return "(" + std::to_string(d[0]) + "," + std::to_string(d[1]) + "," +
               std::to_string(d[2]) + "," + std::to_string(d[3]) + ")";
    }
};

template <class T>
class Graph;

// Row-major dense tensor. Written once by its producing operation; grad is
// allocated lazily by backward passes.
template <class T>
struct Tensor {
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;

    // tape bookkeeping, null/-1 for leaves
    const Graph<T>* producer = nullptr;
    std::int64_t producer_node = -1;

    Tensor(Shape s, bool req) : shape(s), data(static_cast<std::size_t>(s.numel()), T(0)), requires_grad(req) {}

    std::int64_t numel() const { return shape.numel(); }

    T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
        return data[static_cast<std::size_t>(((n * shape.c() + c) * shape.h() + h) * shape.w() + w)];
    }
    T at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
        return data[static_cast<std::size_t>(((n * shape.c() + c) * shape.h() + h) * shape.w() + w)];
    }

    void ensure_grad() {
        grad.assign(static_cast<std::size_t>(numel()), T(0));
    }

    bool all_finite() const {
        for (T v : data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }
};

template <class T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

template <class T>
TensorPtr<T> make_tensor(Shape s, bool requires_grad = false) {
    return std::make_shared<Tensor<T>>(s, requires_grad);
}

template <class T>
TensorPtr<T> make_tensor(Shape s, std::vector<T> values, bool requires_grad = false) {
    auto t = std::make_shared<Tensor<T>>(s, requires_grad);
    if (static_cast<std::int64_t>(values.size()) != s.numel())
        throw std::invalid_argument("make_tensor: value count " + std::to_string(values.size()) +
                                    " does not match shape " + s.str());
    t->data = std::move(values);
    return t;
}

template <class T>
TensorPtr<T> full(Shape s, T value, bool requires_grad = false) {
    auto t = std::make_shared<Tensor<T>>(s, requires_grad);
    std::fill(t->data.begin(), t->data.end(), value);
    return t;
}

// Recorded computation tape. Nodes are appended in execution order, which is
// a topological order by construction; one backward pass visits each
// reachable node exactly once, in reverse.
template <class T>
class Graph {
public:
    explicit Graph(bool recording = true) : recording_(recording) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const { return recording_; }

    void record(const char* tag, std::vector<TensorPtr<T>> inputs, const TensorPtr<T>& output,
                std::function<void()> backward_fn) {
        if (!recording_) return;
        output->producer = this;
        output->producer_node = static_cast<std::int64_t>(nodes_.size());
        nodes_.push_back(Node{tag, std::move(inputs), output, std::move(backward_fn)});
    }

    // Assigns dLoss/dLeaf for every requires_grad tensor reachable from loss.
    // Gradients are zeroed at the start of each pass and summed across uses.
    void backward(const TensorPtr<T>& loss) {
        if (!(loss->shape == Shape(1, 1, 1, 1)))
            throw std::invalid_argument("backward: loss must be scalar (1,1,1,1), got " + loss->shape.str());
        if (loss->producer != this || loss->producer_node < 0)
            throw std::invalid_argument("backward: loss was not produced by this graph");

        std::vector<char> reachable(nodes_.size(), 0);
        std::vector<std::int64_t> stack{loss->producer_node};
        reachable[static_cast<std::size_t>(loss->producer_node)] = 1;
        while (!stack.empty()) {
            const Node& node = nodes_[static_cast<std::size_t>(stack.back())];
            stack.pop_back();
            for (const auto& in : node.inputs) {
                if (in->producer == nullptr) continue;
                if (in->producer != this) {
                    if (in->requires_grad)
                        throw std::invalid_argument(
                            "backward: tensor produced by a different graph is reachable from loss (detached)");
                    continue;
                }
                auto idx = static_cast<std::size_t>(in->producer_node);
                if (!reachable[idx]) {
                    reachable[idx] = 1;
                    stack.push_back(in->producer_node);
                }
            }
        }

        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            if (!reachable[i]) continue;
            Node& node = nodes_[i];
            if (node.output->requires_grad) node.output->ensure_grad();
            for (const auto& in : node.inputs)
                if (in->requires_grad) in->ensure_grad();
        }
        loss->grad.assign(1, T(1));

        for (std::size_t i = nodes_.size(); i-- > 0;) {
            if (!reachable[i]) continue;
            Node& node = nodes_[i];
            if (node.output->requires_grad && node.backward_fn) node.backward_fn();
        }
    }

    std::size_t size() const { return nodes_.size(); }

    std::int64_t count_ops(const std::string& tag) const {
        std::int64_t n = 0;
        for (const auto& node : nodes_)
            if (tag == node.tag) ++n;
        return n;
    }

private:
    struct Node {
        const char* tag;
        std::vector<TensorPtr<T>> inputs;
        TensorPtr<T> output;
        std::function<void()> backward_fn;
    };

    std::vector<Node> nodes_;
    bool recording_;
};

template <class T>
bool any_requires_grad(std::initializer_list<TensorPtr<T>> ts) {
    for (const auto& t : ts)
        if (t && t->requires_grad) return true;
    return false;
}

}  // namespace atroseg
