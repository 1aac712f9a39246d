// SPDX-License-Identifier: Apache-2.0
#include "comoe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace comoe {

using detail::Node;

std::string shape_to_string(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << "]";
    return os.str();
}

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

namespace {

std::shared_ptr<Node> make_node(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size())
        throw ShapeError("tensor data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_to_string(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    return n;
}

bool any_requires_grad(const std::vector<Tensor>& ts) {
    return std::any_of(ts.begin(), ts.end(), [](const Tensor& t) {
        return t.node() && t.node()->requires_grad;
    });
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
}

void add_into(std::vector<double>& dst, const std::vector<double>& src, double factor = 1.0) {
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += factor * src[i];
}

}  // namespace

Tensor make_op(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
               decltype(Node::backprop) backprop) {
    auto n = make_node(std::move(shape), std::move(values), any_requires_grad(parents));
    if (n->requires_grad) {
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    return Tensor(n);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return Tensor(make_node(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return Tensor(make_node(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(std::vector<double> data, Shape shape, bool requires_grad) {
    return Tensor(make_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return Tensor(make_node({}, {v}, requires_grad));
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> vals(n);
    for (auto& v : vals) v = dist(rng);
    return Tensor(make_node(std::move(shape), std::move(vals), requires_grad));
}

const Shape& Tensor::shape() const {
    if (!node_) throw ContractError("operation on empty tensor");
    return node_->shape;
}

std::size_t Tensor::size() const { return shape_numel(shape()); }
std::size_t Tensor::rank() const { return shape().size(); }

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size())
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(s));
    return s[axis];
}

const std::vector<double>& Tensor::data() const {
    if (!node_) throw ContractError("operation on empty tensor");
    return node_->values;
}

double Tensor::value() const {
    if (size() != 1)
        throw ContractError("value() requires a single-element tensor, shape is " +
                            shape_to_string(shape()));
    return node_->values[0];
}

double Tensor::at(std::size_t i) const {
    const auto& v = data();
    if (i >= v.size()) throw ShapeError("flat index " + std::to_string(i) + " out of range");
    return v[i];
}

double Tensor::at(std::size_t row, std::size_t col) const {
    if (rank() != 2) throw ShapeError("2-index access on tensor of shape " + shape_to_string(shape()));
    if (row >= shape()[0] || col >= shape()[1])
        throw ShapeError("index out of range for shape " + shape_to_string(shape()));
    return node_->values[row * shape()[1] + col];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) throw ContractError("tensor has no accumulated gradient");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_) node_->grad.clear();
}

void Tensor::update_data(const std::vector<double>& new_values) {
    if (!node_) throw ContractError("operation on empty tensor");
    if (new_values.size() != node_->values.size())
        throw ShapeError("update_data: length mismatch for shape " + shape_to_string(node_->shape));
    node_->values = new_values;
}

// ---------------------------------------------------------------------------
// Ops

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return make_op(a.shape(), std::move(out), {a, b},
                   [](const Node&, const std::vector<double>& up,
                      const std::vector<std::vector<double>*>& slots) {
                       if (slots[0]) add_into(*slots[0], up);
                       if (slots[1]) add_into(*slots[1], up);
                   });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return make_op(a.shape(), std::move(out), {a, b},
                   [](const Node&, const std::vector<double>& up,
                      const std::vector<std::vector<double>*>& slots) {
                       if (slots[0]) add_into(*slots[0], up);
                       if (slots[1]) add_into(*slots[1], up, -1.0);
                   });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return make_op(a.shape(), std::move(out), {a, b},
                   [](const Node& self, const std::vector<double>& up,
                      const std::vector<std::vector<double>*>& slots) {
                       const auto& av = self.parents[0]->values;
                       const auto& bv = self.parents[1]->values;
                       if (slots[0])
                           for (std::size_t i = 0; i < up.size(); ++i) (*slots[0])[i] += up[i] * bv[i];
                       if (slots[1])
                           for (std::size_t i = 0; i < up.size(); ++i) (*slots[1])[i] += up[i] * av[i];
                   });
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.data()[i];
    return make_op(a.shape(), std::move(out), {a},
                   [c](const Node&, const std::vector<double>& up,
                       const std::vector<std::vector<double>*>& slots) {
                       if (slots[0]) add_into(*slots[0], up, c);
                   });
}

Tensor scale_by(const Tensor& v, const Tensor& s) {
    if (s.size() != 1)
        throw ShapeError("scale_by: scale must be a scalar tensor, got shape " +
                         shape_to_string(s.shape()));
    const double sv = s.data()[0];
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v.data()[i] * sv;
    return make_op(v.shape(), std::move(out), {v, s},
                   [](const Node& self, const std::vector<double>& up,
                      const std::vector<std::vector<double>*>& slots) {
                       const auto& vv = self.parents[0]->values;
                       const double sc = self.parents[1]->values[0];
                       if (slots[0])
                           for (std::size_t i = 0; i < up.size(); ++i) (*slots[0])[i] += up[i] * sc;
                       if (slots[1]) {
                           double acc = 0.0;
                           for (std::size_t i = 0; i < up.size(); ++i) acc += up[i] * vv[i];
                           (*slots[1])[0] += acc;
                       }
                   });
}

Tensor div_by(const Tensor& v, const Tensor& s) {
    if (s.size() != 1)
        throw ShapeError("div_by: divisor must be a scalar tensor, got shape " +
                         shape_to_string(s.shape()));
    const double sv = s.data()[0];
    if (sv == 0.0) throw DomainError("div_by: division by zero");
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v.data()[i] / sv;
    return make_op(v.shape(), std::move(out), {v, s},
                   [](const Node& self, const std::vector<double>& up,
                      const std::vector<std::vector<double>*>& slots) {
                       const auto& vv = self.parents[0]->values;
                       const double sc = self.parents[1]->values[0];
                       if (slots[0])
                           for (std::size_t i = 0; i < up.size(); ++i) (*slots[0])[i] += up[i] / sc;
                       if (slots[1]) {
                           double acc = 0.0;
                           for (std::size_t i = 0; i < up.size(); ++i)
                               acc += up[i] * (-vv[i] / (sc * sc));
                           (*slots[1])[0] += acc;
                       }
                   });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || (b.rank() != 1 && b.rank() != 2))
        throw ShapeError("matmul: expected matrix x (matrix|vector), got " +
                         shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
    const std::size_t m = a.shape()[0];
    const std::size_t n = a.shape()[1];
    const bool vec = (b.rank() == 1);
    const std::size_t bn = vec ? b.shape()[0] : b.shape()[0];
    const std::size_t p = vec ? 1 : b.shape()[1];
    if (n != bn)
        throw ShapeError("matmul: inner dimensions disagree, " + shape_to_string(a.shape()) +
                         " x " + shape_to_string(b.shape()));

    std::vector<double> out(m * p, 0.0);
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < n; ++k) {
            const double aik = av[i * n + k];
            for (std::size_t j = 0; j < p; ++j) out[i * p + j] += aik * bv[k * p + j];
        }

    Shape out_shape = vec ? Shape{m} : Shape{m, p};
    return make_op(std::move(out_shape), std::move(out), {a, b},
                   [m, n, p](const Node& self, const std::vector<double>& up,
                             const std::vector<std::vector<double>*>& slots) {
                       const auto& av = self.parents[0]->values;
                       const auto& bv = self.parents[1]->values;
                       if (slots[0]) {  // dA = up . B^T
                           auto& ga = *slots[0];
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t k = 0; k < n; ++k) {
                                   double acc = 0.0;
                                   for (std::size_t j = 0; j < p; ++j)
                                       acc += up[i * p + j] * bv[k * p + j];
                                   ga[i * n + k] += acc;
                               }
                       }
                       if (slots[1]) {  // dB = A^T . up
                           auto& gb = *slots[1];
                           for (std::size_t k = 0; k < n; ++k)
                               for (std::size_t j = 0; j < p; ++j) {
                                   double acc = 0.0;
                                   for (std::size_t i = 0; i < m; ++i)
                                       acc += av[i * n + k] * up[i * p + j];
                                   gb[k * p + j] += acc;
                               }
                       }
                   });
}

Tensor exp(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
    return make_op(a.shape(), std::move(out), {a},
                   [](const Node& self, const std::vector<double>& up,
                      const std::vector<std::vector<double>*>& slots) {
                       if (slots[0])
                           for (std::size_t i = 0; i < up.size(); ++i)
                               (*slots[0])[i] += up[i] * self.values[i];
                   });
}

Tensor log(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = a.data()[i];
        if (v <= 0.0)
            throw DomainError("log: input " + std::to_string(v) + " at index " +
                              std::to_string(i) + " is not positive");
        out[i] = std::log(v);
    }
    return make_op(a.shape(), std::move(out), {a},
                   [](const Node& self, const std::vector<double>& up,
                      const std::vector<std::vector<double>*>& slots) {
                       const auto& av = self.parents[0]->values;
                       if (slots[0])
                           for (std::size_t i = 0; i < up.size(); ++i)
                               (*slots[0])[i] += up[i] / av[i];
                   });
}

Tensor tanh(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.data()[i]);
    return make_op(a.shape(), std::move(out), {a},
                   [](const Node& self, const std::vector<double>& up,
                      const std::vector<std::vector<double>*>& slots) {
                       if (slots[0])
                           for (std::size_t i = 0; i < up.size(); ++i) {
                               const double y = self.values[i];
                               (*slots[0])[i] += up[i] * (1.0 - y * y);
                           }
                   });
}

namespace {

// Stable softmax of one contiguous strided lane.
void softmax_lane(const double* in, double* out, std::size_t len, std::size_t stride) {
    double mx = in[0];
    for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, in[i * stride]);
    double denom = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
        out[i * stride] = std::exp(in[i * stride] - mx);
        denom += out[i * stride];
    }
    for (std::size_t i = 0; i < len; ++i) out[i * stride] /= denom;
}

void softmax_lane_backward(const double* y, const double* up, double* dst, std::size_t len,
                           std::size_t stride) {
    double dotv = 0.0;
    for (std::size_t i = 0; i < len; ++i) dotv += up[i * stride] * y[i * stride];
    for (std::size_t i = 0; i < len; ++i)
        dst[i * stride] += y[i * stride] * (up[i * stride] - dotv);
}

}  // namespace

Tensor softmax(const Tensor& a, std::size_t axis) {
    if (a.rank() == 0 || a.rank() > 2)
        throw ShapeError("softmax: supported on rank-1/rank-2 tensors, got " +
                         shape_to_string(a.shape()));
    if (axis >= a.rank())
        throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_to_string(a.shape()));

    std::vector<double> out(a.size());
    const auto& in = a.data();
    // lanes: the runs the softmax normalizes over
    std::size_t len, stride, lanes, lane_step;
    if (a.rank() == 1) {
        len = a.shape()[0]; stride = 1; lanes = 1; lane_step = 0;
    } else if (axis == 1) {
        len = a.shape()[1]; stride = 1; lanes = a.shape()[0]; lane_step = a.shape()[1];
    } else {
        len = a.shape()[0]; stride = a.shape()[1]; lanes = a.shape()[1]; lane_step = 1;
    }
    for (std::size_t l = 0; l < lanes; ++l)
        softmax_lane(in.data() + l * lane_step, out.data() + l * lane_step, len, stride);

    return make_op(a.shape(), std::move(out), {a},
                   [len, stride, lanes, lane_step](const Node& self, const std::vector<double>& up,
                                                   const std::vector<std::vector<double>*>& slots) {
                       if (!slots[0]) return;
                       for (std::size_t l = 0; l < lanes; ++l)
                           softmax_lane_backward(self.values.data() + l * lane_step,
                                                 up.data() + l * lane_step,
                                                 slots[0]->data() + l * lane_step, len, stride);
                   });
}

Tensor l2_normalize(const Tensor& a) {
    if (a.rank() != 1)
        throw ShapeError("l2_normalize: expected a vector, got " + shape_to_string(a.shape()));
    double nsq = 0.0;
    for (double v : a.data()) nsq += v * v;
    const double nrm = std::sqrt(nsq);
    if (nrm == 0.0) throw DomainError("l2_normalize: zero vector has no direction");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / nrm;
    return make_op(a.shape(), std::move(out), {a},
                   [nrm](const Node& self, const std::vector<double>& up,
                         const std::vector<std::vector<double>*>& slots) {
                       if (!slots[0]) return;
                       double dotv = 0.0;
                       for (std::size_t i = 0; i < up.size(); ++i) dotv += up[i] * self.values[i];
                       for (std::size_t i = 0; i < up.size(); ++i)
                           (*slots[0])[i] += (up[i] - self.values[i] * dotv) / nrm;
                   });
}

Tensor dot(const Tensor& a, const Tensor& b) {
    if (a.rank() != 1 || b.rank() != 1)
        throw ShapeError("dot: expected vectors, got " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()));
    require_same_shape(a, b, "dot");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a.data()[i] * b.data()[i];
    return make_op({}, {acc}, {a, b},
                   [](const Node& self, const std::vector<double>& up,
                      const std::vector<std::vector<double>*>& slots) {
                       const auto& av = self.parents[0]->values;
                       const auto& bv = self.parents[1]->values;
                       if (slots[0])
                           for (std::size_t i = 0; i < av.size(); ++i) (*slots[0])[i] += up[0] * bv[i];
                       if (slots[1])
                           for (std::size_t i = 0; i < bv.size(); ++i) (*slots[1])[i] += up[0] * av[i];
                   });
}

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    return make_op({}, {acc}, {a},
                   [](const Node&, const std::vector<double>& up,
                      const std::vector<std::vector<double>*>& slots) {
                       if (slots[0])
                           for (auto& g : *slots[0]) g += up[0];
                   });
}

Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw ContractError("mean of an empty tensor");
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    const double inv = 1.0 / static_cast<double>(a.size());
    return make_op({}, {acc * inv}, {a},
                   [inv](const Node&, const std::vector<double>& up,
                         const std::vector<std::vector<double>*>& slots) {
                       if (slots[0])
                           for (auto& g : *slots[0]) g += up[0] * inv;
                   });
}

Tensor stack(std::span<const Tensor> scalars) {
    if (scalars.empty()) throw ContractError("stack: empty input");
    std::vector<double> out;
    std::vector<Tensor> parents;
    out.reserve(scalars.size());
    parents.reserve(scalars.size());
    for (const auto& s : scalars) {
        if (s.size() != 1)
            throw ShapeError("stack: all inputs must be scalars, got shape " +
                             shape_to_string(s.shape()));
        out.push_back(s.data()[0]);
        parents.push_back(s);
    }
    return make_op({scalars.size()}, std::move(out), std::move(parents),
                   [](const Node&, const std::vector<double>& up,
                      const std::vector<std::vector<double>*>& slots) {
                       for (std::size_t i = 0; i < up.size(); ++i)
                           if (slots[i]) (*slots[i])[0] += up[i];
                   });
}

Tensor gather(const Tensor& a, std::vector<std::size_t> indices) {
    if (a.rank() != 1)
        throw ShapeError("gather: expected a vector, got " + shape_to_string(a.shape()));
    const std::size_t n = indices.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (indices[i] >= a.size())
            throw ShapeError("gather: index " + std::to_string(indices[i]) +
                             " out of range for shape " + shape_to_string(a.shape()));
        out[i] = a.data()[indices[i]];
    }
    return make_op({n}, std::move(out), {a},
                   [idx = std::move(indices)](const Node&, const std::vector<double>& up,
                                              const std::vector<std::vector<double>*>& slots) {
                       if (slots[0])
                           for (std::size_t i = 0; i < up.size(); ++i) (*slots[0])[idx[i]] += up[i];
                   });
}

Tensor pick(const Tensor& a, std::size_t index) {
    if (a.rank() != 1)
        throw ShapeError("pick: expected a vector, got " + shape_to_string(a.shape()));
    if (index >= a.size())
        throw ShapeError("pick: index " + std::to_string(index) + " out of range for shape " +
                         shape_to_string(a.shape()));
    return make_op({}, {a.data()[index]}, {a},
                   [index](const Node&, const std::vector<double>& up,
                           const std::vector<std::vector<double>*>& slots) {
                       if (slots[0]) (*slots[0])[index] += up[0];
                   });
}

Tensor logsumexp(const Tensor& a) {
    if (a.rank() != 1 || a.size() == 0)
        throw ShapeError("logsumexp: expected a non-empty vector, got " +
                         shape_to_string(a.shape()));
    double mx = a.data()[0];
    for (double v : a.data()) mx = std::max(mx, v);
    double acc = 0.0;
    for (double v : a.data()) acc += std::exp(v - mx);
    const double lse = mx + std::log(acc);
    return make_op({}, {lse}, {a},
                   [lse](const Node& self, const std::vector<double>& up,
                         const std::vector<std::vector<double>*>& slots) {
                       const auto& av = self.parents[0]->values;
                       if (slots[0])
                           for (std::size_t i = 0; i < av.size(); ++i)
                               (*slots[0])[i] += up[0] * std::exp(av[i] - lse);
                   });
}

Tensor log_add_const(const Tensor& x, double c) {
    if (x.size() != 1)
        throw ShapeError("log_add_const: expected a scalar, got shape " +
                         shape_to_string(x.shape()));
    if (c < 0.0) throw DomainError("log_add_const: constant must be nonnegative");
    const double xv = x.data()[0];
    double yv;
    if (c == 0.0) {
        yv = xv;
    } else {
        const double lc = std::log(c);
        const double m = std::max(xv, lc);
        yv = m + std::log(std::exp(xv - m) + std::exp(lc - m));
    }
    return make_op({}, {yv}, {x},
                   [yv](const Node& self, const std::vector<double>& up,
                        const std::vector<std::vector<double>*>& slots) {
                       // dy/dx = exp(x) / (exp(x) + c) = exp(x - y)
                       if (slots[0])
                           (*slots[0])[0] += up[0] * std::exp(self.parents[0]->values[0] - yv);
                   });
}

Tensor cross_entropy(const Tensor& logits, std::size_t target) {
    if (logits.rank() != 1 || logits.size() == 0)
        throw ShapeError("cross_entropy: logits must be a non-empty vector, got " +
                         shape_to_string(logits.shape()));
    if (target >= logits.size())
        throw ContractError("cross_entropy: target " + std::to_string(target) +
                            " out of range for " + std::to_string(logits.size()) + " classes");
    double mx = logits.data()[0];
    for (double v : logits.data()) mx = std::max(mx, v);
    double acc = 0.0;
    for (double v : logits.data()) acc += std::exp(v - mx);
    const double lse = mx + std::log(acc);
    const double loss = lse - logits.data()[target];
    return make_op({}, {loss}, {logits},
                   [target, lse](const Node& self, const std::vector<double>& up,
                                 const std::vector<std::vector<double>*>& slots) {
                       if (!slots[0]) return;
                       const auto& lv = self.parents[0]->values;
                       for (std::size_t i = 0; i < lv.size(); ++i) {
                           const double p = std::exp(lv[i] - lse);
                           (*slots[0])[i] += up[0] * (p - (i == target ? 1.0 : 0.0));
                       }
                   });
}

Tensor dropout(const Tensor& a, double rate, std::mt19937_64& rng, bool training) {
    if (rate < 0.0 || rate >= 1.0)
        throw ContractError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
    if (!training || rate == 0.0) return a;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double keep_scale = 1.0 / (1.0 - rate);
    std::vector<double> mask(a.size());
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < mask.size(); ++i) {
        mask[i] = (u(rng) < rate) ? 0.0 : keep_scale;
        out[i] = a.data()[i] * mask[i];
    }
    return make_op(a.shape(), std::move(out), {a},
                   [mask = std::move(mask)](const Node&, const std::vector<double>& up,
                                            const std::vector<std::vector<double>*>& slots) {
                       if (slots[0])
                           for (std::size_t i = 0; i < up.size(); ++i)
                               (*slots[0])[i] += up[i] * mask[i];
                   });
}

Tensor detach(const Tensor& a) {
    return Tensor::from(a.data(), a.shape(), false);
}

// ---------------------------------------------------------------------------
// Reverse pass

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1)
        throw ContractError("backward: loss must be a scalar, got shape " +
                            (loss.defined() ? shape_to_string(loss.shape()) : std::string("<empty>")));

    Node* root = loss.node().get();
    if (!root->requires_grad) return;  // nothing upstream wants gradients

    // Topological order: every node appears before any node that consumes it.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> dfs;
    dfs.emplace_back(root, 0);
    visited.insert(root);
    while (!dfs.empty()) {
        auto& [node, next] = dfs.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                dfs.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            dfs.pop_back();
        }
    }

    // Per-pass gradient flow, kept separate from the persistent accumulators
    // so repeated backward calls add exactly one pass each.
    std::unordered_map<Node*, std::vector<double>> flow;
    flow[root] = {1.0};

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        auto fit = flow.find(node);
        if (fit == flow.end() || !node->backprop) continue;
        std::vector<std::vector<double>*> slots(node->parents.size(), nullptr);
        for (std::size_t i = 0; i < node->parents.size(); ++i) {
            Node* p = node->parents[i].get();
            if (!p->requires_grad) continue;
            auto [pit, inserted] = flow.try_emplace(p);
            if (inserted) pit->second.assign(p->values.size(), 0.0);
            slots[i] = &pit->second;
        }
        node->backprop(*node, fit->second, slots);
    }

    for (auto& [node, g] : flow) {
        if (!node->requires_grad) continue;
        if (node->grad.empty()) node->grad.assign(node->values.size(), 0.0);
        add_into(node->grad, g);
    }
}

}  // namespace comoe
