// SPDX-License-Identifier: Apache-2.0
#include "esft/tensor.hpp"

#include <atomic>
#include <cmath>
#include <utility>

namespace esft {
namespace {

std::atomic<int64_t> next_id{1};

void validate_shape(const std::vector<int>& shape, size_t data_len) {
    for (int d : shape) {
        if (d <= 0) {
            throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
        }
    }
    if (shape_numel(shape) != static_cast<int64_t>(data_len)) {
        throw ShapeError("shape " + shape_str(shape) + " does not match data length " +
                         std::to_string(data_len));
    }
}

} // namespace

Tensor::Tensor(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    validate_shape(shape, data.size());
    impl_ = std::make_shared<TensorImpl>();
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
    impl_->id = next_id.fetch_add(1);
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)), 0.0);
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)), value);
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor({1}, {value}, requires_grad);
}

int Tensor::dim(int i) const {
    if (i < 0 || i >= ndim()) {
        throw ContractError("dim index " + std::to_string(i) + " out of range for " +
                            shape_str(impl_->shape));
    }
    return impl_->shape[static_cast<size_t>(i)];
}

int Tensor::rows() const {
    if (ndim() != 2) throw ContractError("rows() on non-2d tensor " + shape_str(impl_->shape));
    return impl_->shape[0];
}

int Tensor::cols() const {
    if (ndim() != 2) throw ContractError("cols() on non-2d tensor " + shape_str(impl_->shape));
    return impl_->shape[1];
}

double Tensor::value() const {
    if (numel() != 1) {
        throw ContractError("value() requires a scalar tensor, got " + shape_str(impl_->shape));
    }
    return impl_->data[0];
}

const std::vector<double>& Tensor::grad() const {
    if (impl_->grad.empty()) {
        throw ContractError("grad accessed before backward populated it");
    }
    return impl_->grad;
}

std::vector<double>& Tensor::grad_mut() const {
    if (impl_->grad.empty()) {
        impl_->grad.assign(impl_->data.size(), 0.0);
    }
    return impl_->grad;
}

void Tensor::zero_grad() const {
    if (!impl_->grad.empty()) {
        impl_->grad.assign(impl_->data.size(), 0.0);
    }
}

void Tape::record(std::string op, const std::vector<Tensor>& inputs, const Tensor& output,
                  std::function<void()> backward_fn) {
    TapeNode node;
    node.op = std::move(op);
    node.input_ids.reserve(inputs.size());
    for (const Tensor& t : inputs) node.input_ids.push_back(t.id());
    node.output_id = output.id();
    node.backward_fn = std::move(backward_fn);
    nodes_.push_back(std::move(node));
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    }
    loss.impl()->grad.assign(1, 1.0);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        it->backward_fn();
    }
}

void assert_finite(const Tensor& t, const std::string& op) {
    const std::vector<double>& d = t.data();
    for (size_t i = 0; i < d.size(); ++i) {
        if (!std::isfinite(d[i])) {
            throw InputError(op + " produced a non-finite value at flat index " + std::to_string(i));
        }
    }
}

} // namespace esft
