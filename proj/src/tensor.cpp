#include "leirstd/tensor.hpp"

#include <algorithm>
#include <unordered_set>

namespace leirstd {

std::string Shape::str() const {
    return "(" + std::to_string(n) + ", " + std::to_string(c) + ", " + std::to_string(h) + ", " +
           std::to_string(w) + ")";
}

const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::leaf: return "leaf";
        case OpKind::conv2d: return "conv2d";
        case OpKind::batch_norm: return "batch_norm";
        case OpKind::activation: return "activation";
        case OpKind::channel_shuffle: return "channel_shuffle";
        case OpKind::bilinear_sample: return "bilinear_sample";
        case OpKind::pool_global: return "pool_global";
        case OpKind::dropout: return "dropout";
        case OpKind::concat: return "concat";
        case OpKind::slice: return "slice";
        case OpKind::add: return "add";
        case OpKind::mul: return "mul";
        case OpKind::scale: return "scale";
        case OpKind::sum: return "sum";
        case OpKind::reduce_channels: return "reduce_channels";
        case OpKind::upsample: return "upsample";
        case OpKind::select_cells: return "select_cells";
        case OpKind::loss: return "loss";
    }
    return "unknown";
}

std::vector<double>& Node::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
}

void check_valid_shape(const Shape& shape) {
    if (shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0) {
        throw DimensionError("tensor dimensions must be >= 1, got " + shape.str());
    }
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(shape, 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    check_valid_shape(shape);
    return from(shape, std::vector<double>(shape.size(), value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    check_valid_shape(shape);
    if (values.size() != shape.size()) {
        throw DimensionError("data length " + std::to_string(values.size()) + " does not match shape " +
                             shape.str());
    }
    auto node = std::make_shared<Node>();
    node->shape = shape;
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1, 1, 1, 1}, {value}, requires_grad); }

double Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    const Shape& s = shape();
    return node_->data[((n * s.c + c) * s.h + h) * s.w + w];
}

double Tensor::item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape().str());
    return node_->data[0];
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::clone(bool requires_grad) const { return from(shape(), node_->data, requires_grad); }

Tensor make_result(OpKind op, Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->shape = shape;
    node->data = std::move(data);
    node->op = op;
    const bool record = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (record) {
        node->requires_grad = true;
        node->parents.reserve(inputs.size());
        for (const auto& t : inputs) node->parents.push_back(t.node());
        node->backward = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

void backward(const Tensor& root) {
    if (!root.defined() || root.size() != 1) {
        throw ContractError("backward() requires a single-element root");
    }
    if (!root.requires_grad()) return;

    // Iterative post-order DFS gives a topological order (parents before children).
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node* node : order) {
        if (!node->is_leaf()) node->grad.assign(node->data.size(), 0.0);
    }
    root.node()->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (!node->is_leaf() && node->backward) node->backward(*node);
    }
}

}  // namespace leirstd
