#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cbq {

using Shape = std::vector<std::size_t>;

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct TensorNode;

/// Dense double-precision tensor participating in reverse-mode autodiff.
/// Handles share the underlying node; the graph is rebuilt on every forward
/// pass (define-by-run). Leaf tensors stay mutable through data() so an
/// optimizer can update parameters in place between passes.
class Tensor {
  public:
    Tensor() = default;

    static Tensor from(std::vector<double> data, Shape shape, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t numel() const;
    std::span<const double> data() const;
    std::span<double> data();
    bool requires_grad() const;

    /// True once backward() has deposited a gradient here.
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    double item() const;

    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
    const std::shared_ptr<TensorNode>& node() const { return node_; }

  private:
    std::shared_ptr<TensorNode> node_;
};

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward;

    std::size_t numel() const { return data.size(); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

/// Build an op node. requires_grad is inferred from the parents; when no
/// parent needs gradients the node records neither parents nor a backward
/// rule, so pure inference passes carry no tape.
Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(TensorNode&)> backward);

/// Populate gradients of every requires_grad tensor reachable from `loss`.
/// `loss` must be scalar. Gradients accumulate until zero_grad().
void backward(const Tensor& loss);

// elementwise with trailing-dimension broadcasting
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double c);
Tensor shift(const Tensor& a, double c);
Tensor neg(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return shift(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return shift(a, -c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_rows(const Tensor& a);  // [m x n] -> [m]

/// Numerically stabilized softmax along the last axis (rows for 2-D input).
Tensor softmax_rows(const Tensor& a);

Tensor log_t(const Tensor& a);
Tensor exp_t(const Tensor& a);
Tensor sqrt_t(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor abs_t(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double exponent);
Tensor gelu(const Tensor& a);

/// Subgradient convention: gradient 1 strictly inside (lo, hi), 0 outside
/// and at the exact boundary.
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor clamp_min(const Tensor& a, double lo);

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps = 1e-8);

Tensor embedding(const Tensor& table, const std::vector<int>& ids);
Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1);
Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1);
Tensor concat_cols(const std::vector<Tensor>& parts);

/// Forward pass returns forward_value; the backward pass routes the whole
/// incoming gradient to gradient_carrier and none to forward_value's inputs.
Tensor straight_through(const Tensor& forward_value, const Tensor& gradient_carrier);

/// Mean over rows of -log softmax(logits)[target]; fused analytic backward.
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets);

Tensor reshape(const Tensor& a, Shape shape);

/// Copy of the data as a fresh constant leaf (no gradient history).
Tensor detach(const Tensor& a);

std::string shape_str(const Shape& s);

}  // namespace cbq
