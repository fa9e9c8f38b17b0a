#pragma once

#include <functional>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "stf/common.hpp"

namespace stf {

class Tape;

using Shape = std::vector<i64>;

i64 shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense double-precision tensor, rank 0-4. Value-semantic: copies share the
// underlying buffer and copy-on-write on mutation, so tensors are cheap to
// pass around and safe to hand to other threads. A tensor may be attached to
// a gradient tape; detached tensors behave as constants in backward.
class Tensor {
public:
    Tensor() : Tensor(Shape{}) {}
    explicit Tensor(Shape shape);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);
    static Tensor from_data(Shape shape, std::vector<double> values);
    static Tensor identity(i64 n);

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    i64 extent(int axis) const { return shape_.at(static_cast<size_t>(axis)); }
    i64 size() const { return static_cast<i64>(data_->size()); }
    i64 rows() const;  // rank-2 only
    i64 cols() const;  // rank-2 only

    double value() const;  // requires size() == 1
    double operator()(i64 i) const;
    double operator()(i64 i, i64 j) const;
    double operator()(i64 i, i64 j, i64 k) const;

    std::span<const double> data() const { return {data_->data(), data_->size()}; }
    double* mutable_data();  // detaches shared buffers (copy-on-write)
    std::shared_ptr<const std::vector<double>> buffer() const { return data_; }

    bool attached() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    int node() const { return node_; }
    Tensor detached() const;
    void attach(Tape* tape, int node) { tape_ = tape; node_ = node; }

    bool all_finite() const;

private:
    friend Tensor reshape(const Tensor& t, Shape shape);

    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
    Tape* tape_ = nullptr;
    int node_ = -1;
};

// Gradient map produced by one backward pass; keyed by watched leaves.
// Asking for the gradient of a detached (or unreached) tensor yields zeros.
class Gradients {
public:
    Tensor of(const Tensor& t) const;

private:
    friend class Tape;
    const Tape* source_ = nullptr;
    std::unordered_map<int, Tensor> by_node_;
};

using BackwardFn = std::function<void(std::span<const double> grad_out, Tape&)>;

// Reverse-mode gradient tape. Ops append nodes in execution order (which is
// a valid topological order); backward replays the closures in reverse.
// Single-use: one backward pass consumes the tape. Not thread-safe; confine
// a tape to one thread per forward/backward pass.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Registers a trainable leaf; the returned tensor shares t's values.
    Tensor watch(const Tensor& t);

    // Runs reverse accumulation from a scalar loss and consumes the tape.
    Gradients backward(const Tensor& loss);

    // Recording API used by op implementations.
    int record(i64 out_numel, BackwardFn fn);
    std::span<double> grad_buffer(int node);

    bool consumed() const { return consumed_; }
    std::size_t num_nodes() const { return nodes_.size(); }

private:
    struct NodeRec {
        i64 numel;
        BackwardFn fn;
    };
    std::vector<NodeRec> nodes_;
    std::vector<std::vector<double>> grads_;
    std::vector<std::pair<int, Shape>> watched_;
    bool consumed_ = false;
};

// ---- differentiable op set -------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double c);
Tensor add_rowvec(const Tensor& m, const Tensor& v);  // m[r x c] + v[c] per row

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& m);
Tensor permute(const Tensor& t, const std::vector<int>& axes);
Tensor reshape(const Tensor& t, Shape shape);

Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& m, i64 from, i64 to);
Tensor slice_cols(const Tensor& m, i64 from, i64 to);
Tensor pad_rows(const Tensor& m, i64 total_rows);  // appends zero rows

Tensor softmax_rows(const Tensor& m);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
Tensor relu(const Tensor& t);
Tensor abs(const Tensor& t);

Tensor sum_all(const Tensor& t);
Tensor mean_all(const Tensor& t);

// Gathers rows of table by index; gradient scatter-adds into the table.
Tensor lookup_rows(const Tensor& table, std::span<const i64> indices);

// Mean over m contiguous row blocks of equal length; requires rows % m == 0.
Tensor segment_mean_rows(const Tensor& m, i64 segments);

constexpr double kLayerNormEps = 1e-5;

}  // namespace stf
