#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "leirstd/error.hpp"

namespace leirstd {

/// Rank-4 shape in (batch, channel, height, width) order.
struct Shape {
    std::size_t n = 1;
    std::size_t c = 1;
    std::size_t h = 1;
    std::size_t w = 1;

    std::size_t size() const { return n * c * h * w; }
    std::size_t plane() const { return h * w; }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

enum class OpKind {
    leaf,
    conv2d,
    batch_norm,
    activation,
    channel_shuffle,
    bilinear_sample,
    pool_global,
    dropout,
    concat,
    slice,
    add,
    mul,
    scale,
    sum,
    reduce_channels,
    upsample,
    select_cells,
    loss,
};

const char* op_name(OpKind kind);

/// One recorded operation on the differentiation tape. The node owns the
/// forward value; `backward` reads `grad` and accumulates into the parents.
struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    OpKind op = OpKind::leaf;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    bool is_leaf() const { return parents.empty(); }
    /// Allocates a zeroed gradient buffer on first use.
    std::vector<double>& grad_buffer();
};

/// Dense (n, c, h, w) tensor of doubles with an optional gradient buffer.
///
/// Copies share the underlying node; use `clone()` for a detached deep copy.
/// Tensors produced by ops are treated as immutable; only leaves expose
/// mutable data, and only between passes.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->data.size(); }

    std::span<const double> data() const { return node_->data; }
    std::span<double> mutable_data() { return node_->data; }
    std::vector<double> to_vector() const { return node_->data; }

    double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;
    double item() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag) { node_->requires_grad = flag; }
    bool has_grad() const { return !node_->grad.empty(); }
    /// Gradient view; empty when no gradient has been accumulated yet.
    std::span<const double> grad() const { return node_->grad; }
    void zero_grad();

    OpKind op() const { return node_->op; }
    Tensor clone(bool requires_grad = false) const;
    /// Detaches from the tape: same values, no parents.
    Tensor detach() const { return clone(false); }

    const std::shared_ptr<Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<Node> node_;
};

/// Creates the result tensor of an op. When none of `inputs` requires a
/// gradient the op is not recorded and `backward` is dropped.
Tensor make_result(OpKind op, Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward);

/// Reverse-mode pass from a single-element root. Leaves with
/// `requires_grad` accumulate into their gradient buffers; intermediate
/// gradients are reset before the pass.
void backward(const Tensor& root);

void check_valid_shape(const Shape& shape);

}  // namespace leirstd
