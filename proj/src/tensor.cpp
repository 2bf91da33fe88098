#include "icd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace icd {

using ImplPtr = std::shared_ptr<TensorImpl>;

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

double* TensorImpl::grad_ptr() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad.data();
}

namespace {

void check_shape(const Shape& shape) {
    for (auto e : shape) {
        if (e == 0) throw DimensionError("zero extent in shape " + shape_str(shape));
    }
}

// Builds an op result. A node is recorded only if some input needs grad.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<ImplPtr> inputs,
                   std::function<void(TensorImpl&)> backward) {
    auto out = std::make_shared<TensorImpl>();
    out->shape = std::move(shape);
    out->data = std::move(data);
    bool needs = std::any_of(inputs.begin(), inputs.end(),
                             [](const ImplPtr& p) { return p->requires_grad; });
    if (needs) {
        out->requires_grad = true;
        out->node = std::make_shared<Node>(Node{std::move(inputs), std::move(backward)});
    }
    return Tensor(out);
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

void require_2d(const Tensor& a, const char* op) {
    if (a.dim() != 2) {
        throw DimensionError(std::string(op) + ": expected 2-D tensor, got " +
                             shape_str(a.shape()));
    }
}

// Elementwise unary op helper: f gives the value, df(x, y) the local slope.
template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
    const auto& xd = x.impl()->data;
    std::vector<double> out(xd.size());
    for (std::size_t i = 0; i < xd.size(); ++i) out[i] = f(xd[i]);
    ImplPtr xi = x.impl();
    return make_result(x.shape(), std::move(out), {xi}, [xi, df](TensorImpl& o) {
        if (!xi->requires_grad) return;
        double* g = xi->grad_ptr();
        for (std::size_t i = 0; i < o.data.size(); ++i) {
            g[i] += o.grad[i] * df(xi->data[i], o.data[i]);
        }
    });
}

// c[M×N] += a[M×K] * b[K×N]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[M×K] += a[M×N] * b[K×N]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double* brow = b + p * n;
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += arow[j] * brow[j];
            c[i * k + p] += s;
        }
    }
}

// c[K×N] += a[M×K]^T * b[M×N]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            if (av == 0.0) continue;
            double* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor() : impl_(std::make_shared<TensorImpl>()) {
    impl_->shape = {1};
    impl_->data = {0.0};
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
    return from(shape, std::vector<double>(shape_numel(shape), value), requires_grad);
}

Tensor Tensor::from(const Shape& shape, std::vector<double> data, bool requires_grad) {
    check_shape(shape);
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = shape;
    impl->data = std::move(data);
    Tensor t(impl);
    t.set_requires_grad(requires_grad);
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

std::size_t Tensor::size(std::size_t axis) const {
    if (axis >= dim()) throw DimensionError("axis out of range for " + shape_str(shape()));
    return shape()[axis];
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar " + shape_str(shape()));
    return impl_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
    require_2d(*this, "at");
    if (r >= shape()[0] || c >= shape()[1]) throw DimensionError("index out of range");
    return impl_->data[r * shape()[1] + c];
}

void Tensor::set_requires_grad(bool on) {
    if (!is_leaf()) throw ContractError("requires_grad can only be changed on leaves");
    impl_->requires_grad = on;
    if (on) {
        impl_->grad.assign(impl_->data.size(), 0.0);
    } else {
        impl_->grad.clear();
    }
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
    return from(shape(), impl_->data, false);
}

void Tensor::backward() const {
    if (numel() != 1) {
        throw ContractError("backward() requires a scalar loss, got " + shape_str(shape()));
    }
    if (!impl_->requires_grad) return;
    if (!impl_->node) {
        impl_->grad_ptr()[0] += 1.0;
        return;
    }

    // Iterative post-order DFS gives a topological order (inputs first).
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    seen.insert(impl_.get());
    while (!stack.empty()) {
        auto& [cur, next] = stack.back();
        if (cur->node && next < cur->node->inputs.size()) {
            TensorImpl* in = cur->node->inputs[next++].get();
            if (in->node && !seen.count(in)) {
                seen.insert(in);
                stack.emplace_back(in, 0);
            }
            continue;
        }
        order.push_back(cur);
        stack.pop_back();
    }

    for (TensorImpl* t : order) t->grad.assign(t->data.size(), 0.0);
    impl_->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        (*it)->node->backward(**it);
    }
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

Tensor detach(const Tensor& x) {
    return Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), false);
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
    ImplPtr ai = a.impl(), bi = b.impl();
    return make_result(a.shape(), std::move(out), {ai, bi}, [ai, bi](TensorImpl& o) {
        for (auto* in : {ai.get(), bi.get()}) {
            if (!in->requires_grad) continue;
            double* g = in->grad_ptr();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
    ImplPtr ai = a.impl(), bi = b.impl();
    return make_result(a.shape(), std::move(out), {ai, bi}, [ai, bi](TensorImpl& o) {
        if (ai->requires_grad) {
            double* g = ai->grad_ptr();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        }
        if (bi->requires_grad) {
            double* g = bi->grad_ptr();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
    ImplPtr ai = a.impl(), bi = b.impl();
    return make_result(a.shape(), std::move(out), {ai, bi}, [ai, bi](TensorImpl& o) {
        if (ai->requires_grad) {
            double* g = ai->grad_ptr();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * bi->data[i];
        }
        if (bi->requires_grad) {
            double* g = bi->grad_ptr();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * ai->data[i];
        }
    });
}

Tensor scale(const Tensor& a, double s) {
    return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor add_row_bias(const Tensor& a, const Tensor& bias) {
    require_2d(a, "add_row_bias");
    const std::size_t rows = a.size(0), cols = a.size(1);
    if (bias.numel() != cols) {
        throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) +
                             " does not fit " + shape_str(a.shape()));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bias.at(c);
    ImplPtr ai = a.impl(), bi = bias.impl();
    return make_result(a.shape(), std::move(out), {ai, bi}, [ai, bi, rows, cols](TensorImpl& o) {
        if (ai->requires_grad) {
            double* g = ai->grad_ptr();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        }
        if (bi->requires_grad) {
            double* g = bi->grad_ptr();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) g[c] += o.grad[r * cols + c];
        }
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
    std::vector<double> out(m * n, 0.0);
    gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    ImplPtr ai = a.impl(), bi = b.impl();
    return make_result({m, n}, std::move(out), {ai, bi}, [ai, bi, m, k, n](TensorImpl& o) {
        if (ai->requires_grad) gemm_nt(o.grad.data(), bi->data.data(), ai->grad_ptr(), m, n, k);
        if (bi->requires_grad) gemm_tn(ai->data.data(), o.grad.data(), bi->grad_ptr(), m, k, n);
    });
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    const std::size_t r = a.size(0), c = a.size(1);
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.at(i * c + j);
    ImplPtr ai = a.impl();
    return make_result({c, r}, std::move(out), {ai}, [ai, r, c](TensorImpl& o) {
        if (!ai->requires_grad) return;
        double* g = ai->grad_ptr();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[j * r + i];
    });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
    check_shape(shape);
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                             shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    ImplPtr ai = a.impl();
    return make_result(shape, std::move(out), {ai}, [ai](TensorImpl& o) {
        if (!ai->requires_grad) return;
        double* g = ai->grad_ptr();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    });
}

Tensor relu(const Tensor& x) {
    return unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
                 [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
    return unary(
        x,
        [](double v) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
    return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
    return unary(x, [](double v) { return std::log(v); },
                 [](double v, double) { return 1.0 / v; });
}

Tensor abs(const Tensor& x) {
    return unary(x, [](double v) { return std::fabs(v); },
                 [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& x) {
    return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    return unary(x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
                 [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    ImplPtr xi = x.impl();
    return make_result({1}, {s}, {xi}, [xi](TensorImpl& o) {
        if (!xi->requires_grad) return;
        double* g = xi->grad_ptr();
        for (std::size_t i = 0; i < xi->data.size(); ++i) g[i] += o.grad[0];
    });
}

Tensor mean(const Tensor& x) {
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor row_mean(const Tensor& x) {
    require_2d(x, "row_mean");
    const std::size_t rows = x.size(0), cols = x.size(1);
    std::vector<double> out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += x.at(r * cols + c);
        out[r] = s / static_cast<double>(cols);
    }
    ImplPtr xi = x.impl();
    return make_result({rows}, std::move(out), {xi}, [xi, rows, cols](TensorImpl& o) {
        if (!xi->requires_grad) return;
        double* g = xi->grad_ptr();
        const double inv = 1.0 / static_cast<double>(cols);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += o.grad[r] * inv;
    });
}

Tensor softmax(const Tensor& x) {
    const std::size_t width = x.shape().back();
    const std::size_t rows = x.numel() / width;
    std::vector<double> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data().data() + r * width;
        double* y = out.data() + r * width;
        double mx = in[0];
        for (std::size_t c = 1; c < width; ++c) mx = std::max(mx, in[c]);
        double z = 0.0;
        for (std::size_t c = 0; c < width; ++c) {
            y[c] = std::exp(in[c] - mx);
            z += y[c];
        }
        for (std::size_t c = 0; c < width; ++c) y[c] /= z;
    }
    ImplPtr xi = x.impl();
    return make_result(x.shape(), std::move(out), {xi}, [xi, rows, width](TensorImpl& o) {
        if (!xi->requires_grad) return;
        double* g = xi->grad_ptr();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = o.data.data() + r * width;
            const double* gy = o.grad.data() + r * width;
            double dot = 0.0;
            for (std::size_t c = 0; c < width; ++c) dot += gy[c] * y[c];
            for (std::size_t c = 0; c < width; ++c) g[r * width + c] += y[c] * (gy[c] - dot);
        }
    });
}

Tensor layernorm_pf(const Tensor& x, double eps) {
    require_2d(x, "layernorm_pf");
    const std::size_t rows = x.size(0), cols = x.size(1);
    if (cols < 2) throw DimensionError("layernorm_pf: need at least 2 features per row");
    std::vector<double> out(x.numel());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data().data() + r * cols;
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += in[c];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mu) * (in[c] - mu);
        var /= static_cast<double>(cols);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = inv;
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = (in[c] - mu) * inv;
    }
    ImplPtr xi = x.impl();
    return make_result(x.shape(), std::move(out), {xi}, [xi, rows, cols, inv_std](TensorImpl& o) {
        if (!xi->requires_grad) return;
        double* g = xi->grad_ptr();
        const double n = static_cast<double>(cols);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = o.data.data() + r * cols;
            const double* gy = o.grad.data() + r * cols;
            double mg = 0.0, mgy = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                mg += gy[c];
                mgy += gy[c] * y[c];
            }
            mg /= n;
            mgy /= n;
            for (std::size_t c = 0; c < cols; ++c) {
                g[r * cols + c] += (*inv_std)[r] * (gy[c] - mg - y[c] * mgy);
            }
        }
    });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
    require_2d(a, "slice_rows");
    if (begin >= end || end > a.size(0)) throw DimensionError("slice_rows: bad range");
    const std::size_t cols = a.size(1);
    std::vector<double> out(a.data().begin() + begin * cols, a.data().begin() + end * cols);
    ImplPtr ai = a.impl();
    return make_result({end - begin, cols}, std::move(out), {ai}, [ai, begin, cols](TensorImpl& o) {
        if (!ai->requires_grad) return;
        double* g = ai->grad_ptr() + begin * cols;
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
    require_2d(a, "slice_cols");
    if (begin >= end || end > a.size(1)) throw DimensionError("slice_cols: bad range");
    const std::size_t rows = a.size(0), cols = a.size(1), w = end - begin;
    std::vector<double> out(rows * w);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < w; ++c) out[r * w + c] = a.at(r * cols + begin + c);
    ImplPtr ai = a.impl();
    return make_result({rows, w}, std::move(out), {ai}, [ai, rows, cols, begin, w](TensorImpl& o) {
        if (!ai->requires_grad) return;
        double* g = ai->grad_ptr();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c) g[r * cols + begin + c] += o.grad[r * w + c];
    });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    const std::size_t cols = parts.front().shape().back();
    std::size_t rows = 0;
    std::vector<ImplPtr> inputs;
    for (const auto& p : parts) {
        require_2d(p, "concat_rows");
        if (p.size(1) != cols) throw DimensionError("concat_rows: column mismatch");
        rows += p.size(0);
        inputs.push_back(p.impl());
    }
    std::vector<double> out;
    out.reserve(rows * cols);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return make_result({rows, cols}, std::move(out), inputs, [inputs](TensorImpl& o) {
        std::size_t off = 0;
        for (const auto& in : inputs) {
            const std::size_t n = in->data.size();
            if (in->requires_grad) {
                double* g = in->grad_ptr();
                for (std::size_t i = 0; i < n; ++i) g[i] += o.grad[off + i];
            }
            off += n;
        }
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    require_2d(parts.front(), "concat_cols");
    const std::size_t rows = parts.front().size(0);
    std::size_t cols = 0;
    std::vector<ImplPtr> inputs;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        require_2d(p, "concat_cols");
        if (p.size(0) != rows) throw DimensionError("concat_cols: row mismatch");
        cols += p.size(1);
        widths.push_back(p.size(1));
        inputs.push_back(p.impl());
    }
    std::vector<double> out(rows * cols);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < widths[k]; ++c)
                out[r * cols + off + c] = parts[k].at(r * widths[k] + c);
        off += widths[k];
    }
    return make_result({rows, cols}, std::move(out), inputs,
                       [inputs, widths, rows, cols](TensorImpl& o) {
                           std::size_t off = 0;
                           for (std::size_t k = 0; k < inputs.size(); ++k) {
                               if (inputs[k]->requires_grad) {
                                   double* g = inputs[k]->grad_ptr();
                                   for (std::size_t r = 0; r < rows; ++r)
                                       for (std::size_t c = 0; c < widths[k]; ++c)
                                           g[r * widths[k] + c] += o.grad[r * cols + off + c];
                               }
                               off += widths[k];
                           }
                       });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t pad) {
    if (x.dim() != 3 || weight.dim() != 4 || weight.size(1) != x.size(0) ||
        weight.size(2) != weight.size(3) || bias.numel() != weight.size(0)) {
        throw DimensionError("conv2d: incompatible input " + shape_str(x.shape()) +
                             ", weight " + shape_str(weight.shape()) + ", bias " +
                             shape_str(bias.shape()));
    }
    if (stride == 0) throw DimensionError("conv2d: stride must be positive");
    const std::size_t cin = x.size(0), h = x.size(1), w = x.size(2);
    const std::size_t cout = weight.size(0), k = weight.size(2);
    if (h + 2 * pad < k || w + 2 * pad < k) throw DimensionError("conv2d: kernel larger than input");
    const std::size_t ho = (h + 2 * pad - k) / stride + 1;
    const std::size_t wo = (w + 2 * pad - k) / stride + 1;
    const std::size_t rdim = cin * k * k, pdim = ho * wo;

    // im2col: cols[r, p] with r = (ci, ky, kx), p = (oy, ox)
    auto cols = std::make_shared<std::vector<double>>(rdim * pdim, 0.0);
    const double* xd = x.data().data();
    for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                double* row = cols->data() + ((ci * k + ky) * k + kx) * pdim;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                        if (ix < 0 || ix >= static_cast<long>(w)) continue;
                        row[oy * wo + ox] = xd[(ci * h + iy) * w + ix];
                    }
                }
            }

    std::vector<double> out(cout * pdim, 0.0);
    for (std::size_t co = 0; co < cout; ++co)
        std::fill(out.begin() + co * pdim, out.begin() + (co + 1) * pdim, bias.at(co));
    gemm_nn(weight.data().data(), cols->data(), out.data(), cout, rdim, pdim);

    ImplPtr xi = x.impl(), wi = weight.impl(), bi = bias.impl();
    return make_result(
        {cout, ho, wo}, std::move(out), {xi, wi, bi},
        [=](TensorImpl& o) {
            const double* go = o.grad.data();
            if (bi->requires_grad) {
                double* g = bi->grad_ptr();
                for (std::size_t co = 0; co < cout; ++co)
                    for (std::size_t p = 0; p < pdim; ++p) g[co] += go[co * pdim + p];
            }
            if (wi->requires_grad) gemm_nt(go, cols->data(), wi->grad_ptr(), cout, pdim, rdim);
            if (xi->requires_grad) {
                std::vector<double> dcols(rdim * pdim, 0.0);
                gemm_tn(wi->data.data(), go, dcols.data(), cout, rdim, pdim);
                double* g = xi->grad_ptr();
                for (std::size_t ci = 0; ci < cin; ++ci)
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const double* row = dcols.data() + ((ci * k + ky) * k + kx) * pdim;
                            for (std::size_t oy = 0; oy < ho; ++oy) {
                                const long iy =
                                    static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                                if (iy < 0 || iy >= static_cast<long>(h)) continue;
                                for (std::size_t ox = 0; ox < wo; ++ox) {
                                    const long ix =
                                        static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                                    if (ix < 0 || ix >= static_cast<long>(w)) continue;
                                    g[(ci * h + iy) * w + ix] += row[oy * wo + ox];
                                }
                            }
                        }
            }
        });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    require_same(logits, targets, "bce_with_logits");
    std::vector<double> out(logits.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double z = logits.at(i), t = targets.at(i);
        out[i] = std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::fabs(z)));
    }
    ImplPtr zi = logits.impl(), ti = targets.impl();
    return make_result(logits.shape(), std::move(out), {zi, ti}, [zi, ti](TensorImpl& o) {
        if (zi->requires_grad) {
            double* g = zi->grad_ptr();
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                const double z = zi->data[i];
                const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                                          : std::exp(z) / (1.0 + std::exp(z));
                g[i] += o.grad[i] * (s - ti->data[i]);
            }
        }
        if (ti->requires_grad) {
            double* g = ti->grad_ptr();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i] * zi->data[i];
        }
    });
}

}  // namespace icd
