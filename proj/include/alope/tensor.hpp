#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "alope/common.hpp"

namespace alope {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

// One node of the reverse-mode tape. `data` is dense row-major; `grad` is
// allocated iff requires_grad. Non-leaf nodes carry their parents plus a
// closure that pushes this node's gradient into them.
template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode<T>>> parents;
    std::function<void(TensorNode<T>&)> backprop;

    bool leaf() const { return parents.empty(); }
};

// Value-semantics handle over a shared tape node. Copies alias the same node.
// Scalars are rank-0 tensors (shape {}, numel 1).
template <typename T>
class Tensor {
  public:
    using Node = TensorNode<T>;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<T> values, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }
    std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
    std::int64_t dim(std::size_t i) const { return node_->shape[i]; }
    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->leaf(); }

    std::span<const T> data() const { return {node_->data.data(), node_->data.size()}; }
    // Mutable access is for leaf parameters (optimizer updates, init).
    std::span<T> mutable_data() { return {node_->data.data(), node_->data.size()}; }
    std::span<const T> grad() const { return {node_->grad.data(), node_->grad.size()}; }
    std::span<T> mutable_grad() { return {node_->grad.data(), node_->grad.size()}; }

    T item() const {
        if (numel() != 1) throw ShapeError("item() requires a scalar tensor, got shape " + shape_str(shape()));
        return node_->data[0];
    }
    T at(std::int64_t i) const { return node_->data[static_cast<std::size_t>(i)]; }
    T at(std::int64_t r, std::int64_t c) const {
        return node_->data[static_cast<std::size_t>(r * node_->shape[1] + c)];
    }

    void zero_grad() {
        if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    // Leaf-only: toggles gradient tracking (used to freeze base weights).
    void set_requires_grad(bool on) {
        if (!node_->leaf()) throw ShapeError("set_requires_grad applies to leaf tensors only");
        node_->requires_grad = on;
        node_->grad.assign(on ? node_->data.size() : 0, T(0));
    }

    // Same values, no tape history, gradients off.
    Tensor detach() const { return from_data(node_->shape, node_->data, false); }

    std::shared_ptr<Node> node() const { return node_; }

    // Internal: wrap an existing tape node.
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  private:
    std::shared_ptr<Node> node_;
};

// --- ops -------------------------------------------------------------------

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// x [m×k] with w [n×k] -> x·wᵀ [m×n]; weights stored out-major.
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
template <typename T> Tensor<T> silu(const Tensor<T>& a);
template <typename T> Tensor<T> gelu(const Tensor<T>& a);
// Row-wise RMS normalization with learned gain (1-D tensors are one row).
template <typename T> Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps = T(1e-6));
template <typename T> Tensor<T> softmax(const Tensor<T>& x);
// Row softmax over positions where mask[r*cols+c] != 0; masked entries get 0.
template <typename T> Tensor<T> masked_row_softmax(const Tensor<T>& scores, const std::vector<std::uint8_t>& mask);
template <typename T> Tensor<T> embedding_gather(const Tensor<T>& table, const std::vector<std::int32_t>& ids);
template <typename T> Tensor<T> row_slice(const Tensor<T>& x, std::int64_t row);
template <typename T> Tensor<T> col_slice(const Tensor<T>& x, std::int64_t col0, std::int64_t width);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& xs);
template <typename T> Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows);
template <typename T> Tensor<T> concat_cols(const std::vector<Tensor<T>>& xs);
// View with a new shape over the same element count; backward passes through.
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape new_shape);
// Element i of a rank-1 tensor as a rank-0 scalar.
template <typename T> Tensor<T> element(const Tensor<T>& x, std::int64_t i);
// Elementwise product by a rank-0 factor; differentiable in both arguments.
template <typename T> Tensor<T> scale_t(const Tensor<T>& x, const Tensor<T>& s);
// Rank-0 scalar repeated into a rank-1 tensor of length n.
template <typename T> Tensor<T> broadcast_scalar(const Tensor<T>& s, std::int64_t n);
template <typename T> Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
template <typename T> Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target);

// Reverse sweep from a scalar loss. Visits each reachable node exactly once;
// leaf gradients accumulate across calls until zeroed, intermediate gradients
// are reset at the start of each sweep.
template <typename T> void backward(const Tensor<T>& loss);

template <typename T> void zero_grads(const std::vector<Tensor<T>>& params);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace alope
