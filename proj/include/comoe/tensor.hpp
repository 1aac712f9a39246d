// SPDX-License-Identifier: Apache-2.0
#pragma once

// Minimal dense-tensor engine with reverse-mode automatic differentiation.
//
// Tensors are double precision, row-major, and immutable after forward
// construction except for gradient accumulation on the underlying node.
// Each op builds a graph node holding the forward values plus a closure
// that routes upstream gradients to its parents. backward() walks the
// graph once per call and *adds* into each requires-grad node, so two
// backward passes through the same node double its grad.

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "comoe/error.hpp"

namespace comoe {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::vector<double> grad;  // persistent accumulator, sized on first use
    std::vector<std::shared_ptr<Node>> parents;
    // Adds d(loss)/d(parent_i) into parent_slots[i] given upstream = d(loss)/d(self).
    // Slots are null for parents that do not require grad.
    std::function<void(const Node& self, const std::vector<double>& upstream,
                       const std::vector<std::vector<double>*>& parent_slots)>
        backprop;
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(std::vector<double> data, Shape shape, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    // Entries drawn i.i.d. N(0, stddev^2) from the supplied generator.
    static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev,
                        bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t size() const;
    std::size_t rank() const;
    std::size_t dim(std::size_t axis) const;
    bool is_scalar() const { return defined() && size() == 1 && rank() == 0; }

    const std::vector<double>& data() const;
    double value() const;  // rank-0 / single-element access
    double at(std::size_t i) const;
    double at(std::size_t row, std::size_t col) const;

    bool requires_grad() const;
    bool has_grad() const;
    const std::vector<double>& grad() const;
    void zero_grad();

    // In-place parameter update for leaf tensors (optimizer use only).
    void update_data(const std::vector<double>& new_values);

    std::shared_ptr<detail::Node> node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    std::shared_ptr<detail::Node> node_;

    friend Tensor make_op(Shape shape, std::vector<double> values,
                          std::vector<Tensor> parents,
                          decltype(detail::Node::backprop) backprop);
};

// Elementwise and linear-algebra ops. All validate shapes and throw
// ShapeError / DomainError with the offending shapes in the message.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
// v * s and v / s where s is a rank-0 tensor (gradient flows to both).
Tensor scale_by(const Tensor& v, const Tensor& s);
Tensor div_by(const Tensor& v, const Tensor& s);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor softmax(const Tensor& a, std::size_t axis = 0);
Tensor l2_normalize(const Tensor& a);
Tensor dot(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Builds a 1-D tensor out of rank-0 scalars.
Tensor stack(std::span<const Tensor> scalars);
Tensor gather(const Tensor& a, std::vector<std::size_t> indices);
// Single element of a 1-D tensor as a rank-0 tensor.
Tensor pick(const Tensor& a, std::size_t index);
Tensor logsumexp(const Tensor& a);
// log(exp(x) + c) for scalar x and constant c >= 0, evaluated stably.
Tensor log_add_const(const Tensor& x, double c);
Tensor cross_entropy(const Tensor& logits, std::size_t target);
// Inverted dropout on the input; identity when !training or rate == 0.
Tensor dropout(const Tensor& a, double rate, std::mt19937_64& rng, bool training);
// Same values, detached from the graph (no gradient flows past it).
Tensor detach(const Tensor& a);

// Reverse-mode pass from a scalar loss. Accumulates into .grad of every
// reachable requires-grad tensor. Throws ContractError on non-scalar loss.
void backward(const Tensor& loss);

}  // namespace comoe
