#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace icd {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class DimensionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

struct TensorImpl;

// One recorded operation. `backward` reads out.grad and accumulates into the
// gradients of `inputs`. The closure never owns `out`, so no cycles form.
struct Node {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::function<void(TensorImpl& out)> backward;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated iff requires_grad
    bool requires_grad = false;
    std::shared_ptr<Node> node;  // null for leaves and detached tensors

    // Gradient buffer of this tensor, allocating it on first use.
    double* grad_ptr();
};

/// Dense row-major float64 tensor with reverse-mode autodiff.
///
/// Copies share storage (handle semantics); use clone() for a deep copy.
class Tensor {
public:
    Tensor();
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double value, bool requires_grad = false);
    static Tensor from(const Shape& shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    const Shape& shape() const { return impl_->shape; }
    std::size_t dim() const { return impl_->shape.size(); }
    std::size_t size(std::size_t axis) const;
    std::size_t numel() const { return impl_->data.size(); }

    std::span<double> data() { return impl_->data; }
    std::span<const double> data() const { return impl_->data; }
    double item() const;
    double at(std::size_t i) const { return impl_->data.at(i); }
    double at(std::size_t r, std::size_t c) const;

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool on);
    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    void zero_grad();
    bool is_leaf() const { return impl_->node == nullptr; }

    Tensor clone() const;

    /// Accumulates d(this)/d(leaf) into every reachable leaf that requires
    /// grad. `this` must be a scalar. The graph is kept alive until the last
    /// handle to the result is dropped, so backward may be called again.
    void backward() const;

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
    bool same(const Tensor& other) const { return impl_ == other.impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Operations. All shapes are checked; mismatches throw DimensionError.
// ---------------------------------------------------------------------------

Tensor detach(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

// a: [R×C], bias: [C]
Tensor add_row_bias(const Tensor& a, const Tensor& bias);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& shape);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor square(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor row_mean(const Tensor& x);  // [R×C] -> [R]

// Last-axis softmax with max subtraction. Works on any rank >= 1.
Tensor softmax(const Tensor& x);

inline constexpr double kLayerNormEps = 1e-5;
// Parameter-free layer norm over the last axis of a [R×C] tensor.
Tensor layernorm_pf(const Tensor& x, double eps = kLayerNormEps);

// Row / column slicing and concatenation on 2-D tensors.
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

// x: [Cin×H×W], weight: [Cout×Cin×k×k], bias: [Cout] -> [Cout×Ho×Wo]
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              std::size_t stride, std::size_t pad);

// Elementwise binary cross-entropy on logits; numerically stable.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

}  // namespace icd
