// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 tensors on a define-by-run gradient tape. A Tensor is a cheap
// shared handle; the tape records one node per primitive op and replays them
// in reverse for backward. Tensors are immutable after construction except
// through data_mut(), which exists for the optimizer step and for
// finite-difference perturbation in tests.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "esft/common.hpp"

namespace esft {

struct TensorImpl {
    std::vector<int> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad; // empty until first backward touch
    int64_t id = 0;
};

class Tensor {
public:
    Tensor() = default; // null handle
    Tensor(std::vector<int> shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const;
    // 2-d accessors; ContractError when the tensor is not 2-d.
    int rows() const;
    int cols() const;

    int64_t id() const { return impl_->id; }
    bool requires_grad() const { return impl_->requires_grad; }

    // A Tensor is a shared handle; const applies to the handle, so the
    // mutating accessors below stay callable on captured copies.
    const std::vector<double>& data() const { return impl_->data; }
    std::vector<double>& data_mut() const { return impl_->data; }
    double value() const; // scalar tensors only

    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<double>& grad() const;
    std::vector<double>& grad_mut() const; // zero-allocates on first use
    void zero_grad() const;

    TensorImpl* impl() const { return impl_.get(); }

private:
    std::shared_ptr<TensorImpl> impl_;
};

struct TapeNode {
    std::string op;
    std::vector<int64_t> input_ids;
    int64_t output_id;
    // Adds this node's contribution to the input grads; saved activations
    // live in the closure, which also keeps the tensors alive.
    std::function<void()> backward_fn;
};

class Tape {
public:
    void record(std::string op, const std::vector<Tensor>& inputs, const Tensor& output,
                std::function<void()> backward_fn);
    // Seeds grad(loss) = 1 and replays every node once in reverse order.
    // Grad buffers accumulate additively, so fan-out sums path gradients and
    // repeated backward calls require an explicit zero_grad in between.
    void backward(const Tensor& loss);
    size_t size() const { return nodes_.size(); }
    const std::vector<TapeNode>& nodes() const { return nodes_; }

private:
    std::vector<TapeNode> nodes_;
};

// Throws InputError naming the op and flat index of the first non-finite
// element, if any.
void assert_finite(const Tensor& t, const std::string& op);

} // namespace esft
