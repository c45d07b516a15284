#include "cbq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>
#include <utility>

namespace cbq {

namespace {

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

void check_positive_extents(const Shape& s) {
    for (std::size_t d : s) {
        if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(s));
    }
}

// Trailing-dimension broadcast plan: strides aligned to the output rank,
// zero stride on broadcast dimensions.
struct BcPlan {
    Shape out;
    std::vector<std::size_t> sa, sb;
    std::size_t n = 1;
};

std::vector<std::size_t> contiguous_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

BcPlan broadcast_plan(const Shape& a, const Shape& b) {
    const std::size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
    BcPlan p;
    p.out.assign(r, 1);
    for (std::size_t d = 0; d < r; ++d) {
        const std::size_t da = d + ra >= r ? a[d + ra - r] : 1;
        const std::size_t db = d + rb >= r ? b[d + rb - r] : 1;
        if (da != db && da != 1 && db != 1) {
            throw ShapeError("shapes not broadcast-compatible: " + shape_str(a) + " vs " +
                             shape_str(b));
        }
        p.out[d] = std::max(da, db);
    }
    const auto sta = contiguous_strides(a);
    const auto stb = contiguous_strides(b);
    p.sa.assign(r, 0);
    p.sb.assign(r, 0);
    for (std::size_t d = 0; d < r; ++d) {
        if (d + ra >= r && a[d + ra - r] != 1) p.sa[d] = sta[d + ra - r];
        if (d + rb >= r && b[d + rb - r] != 1) p.sb[d] = stb[d + rb - r];
    }
    p.n = shape_numel(p.out);
    return p;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void bc_for_each(const BcPlan& p, F&& f) {
    const std::size_t rank = p.out.size();
    if (rank == 0) {
        f(std::size_t{0}, std::size_t{0}, std::size_t{0});
        return;
    }
    std::vector<std::size_t> idx(rank, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t lin = 0; lin < p.n; ++lin) {
        f(lin, ia, ib);
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            ia += p.sa[d];
            ib += p.sb[d];
            if (idx[d] < p.out[d]) break;
            ia -= p.sa[d] * p.out[d];
            ib -= p.sb[d] * p.out[d];
            idx[d] = 0;
        }
    }
}

enum class BinaryKind { Add, Sub, Mul, Div };

Tensor binary_op(BinaryKind kind, const Tensor& a, const Tensor& b) {
    const auto plan = broadcast_plan(a.shape(), b.shape());
    std::vector<double> out(plan.n);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    if (a.shape() == b.shape()) {
        const std::size_t n = plan.n;
        switch (kind) {
            case BinaryKind::Add:
                for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i];
                break;
            case BinaryKind::Sub:
                for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] - pb[i];
                break;
            case BinaryKind::Mul:
                for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i];
                break;
            case BinaryKind::Div:
                for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] / pb[i];
                break;
        }
    } else {
        bc_for_each(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
            switch (kind) {
                case BinaryKind::Add: out[o] = pa[ia] + pb[ib]; break;
                case BinaryKind::Sub: out[o] = pa[ia] - pb[ib]; break;
                case BinaryKind::Mul: out[o] = pa[ia] * pb[ib]; break;
                case BinaryKind::Div: out[o] = pa[ia] / pb[ib]; break;
            }
        });
    }
    return make_op(plan.out, std::move(out), {a, b}, [kind, plan](TensorNode& self) {
        TensorNode& na = *self.parents[0];
        TensorNode& nb = *self.parents[1];
        const double* g = self.grad.data();
        const double* pa = na.data.data();
        const double* pb = nb.data.data();
        double* ga = na.requires_grad ? na.grad.data() : nullptr;
        double* gb = nb.requires_grad ? nb.grad.data() : nullptr;
        bc_for_each(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
            switch (kind) {
                case BinaryKind::Add:
                    if (ga) ga[ia] += g[o];
                    if (gb) gb[ib] += g[o];
                    break;
                case BinaryKind::Sub:
                    if (ga) ga[ia] += g[o];
                    if (gb) gb[ib] -= g[o];
                    break;
                case BinaryKind::Mul:
                    if (ga) ga[ia] += g[o] * pb[ib];
                    if (gb) gb[ib] += g[o] * pa[ia];
                    break;
                case BinaryKind::Div:
                    if (ga) ga[ia] += g[o] / pb[ib];
                    if (gb) gb[ib] -= g[o] * pa[ia] / (pb[ib] * pb[ib]);
                    break;
            }
        });
    });
}

// Elementwise unary op from a value/derivative pair.
template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& a, Fwd&& fwd, Bwd&& dfdx) {
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    const double* pa = a.data().data();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(pa[i]);
    return make_op(a.shape(), std::move(out), {a}, [dfdx](TensorNode& self) {
        TensorNode& na = *self.parents[0];
        if (!na.requires_grad) return;
        const double* g = self.grad.data();
        const double* x = na.data.data();
        const double* y = self.data.data();
        double* gx = na.grad.data();
        for (std::size_t i = 0; i < self.numel(); ++i) gx[i] += g[i] * dfdx(x[i], y[i]);
    });
}

}  // namespace

std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) r += " x ";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

Tensor Tensor::from(std::vector<double> data, Shape shape, bool requires_grad) {
    check_positive_extents(shape);
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("data of length " + std::to_string(data.size()) +
                         " does not fill shape " + shape_str(shape));
    }
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    check_positive_extents(shape);
    const std::size_t n = shape_numel(shape);
    return from(std::vector<double>(n, value), std::move(shape), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({value}, Shape{1}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->data.size(); }
std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::data() { return node_->data; }
bool Tensor::requires_grad() const { return node_->requires_grad; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw std::logic_error("tensor holds no gradient");
    return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() requires a scalar tensor, got " + shape_str(shape()));
    return node_->data[0];
}

Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(TensorNode&)> backward) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    bool rg = false;
    for (const auto& p : parents) rg = rg || (p.defined() && p.requires_grad());
    if (rg) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (const auto& p : parents) n->parents.push_back(p.node());
        n->backward = std::move(backward);
    }
    return Tensor(std::move(n));
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ShapeError("backward requires a scalar loss");
    }
    TensorNode* root = loss.node().get();
    if (!root->requires_grad) return;

    // Post-order DFS over requires_grad nodes; reversing it yields a valid
    // reverse-execution visit order where each node is handled exactly once.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen{root};
    std::vector<std::pair<TensorNode*, std::size_t>> stack{{root, 0}};
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            TensorNode* p = n->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (!n->backward) continue;
        for (auto& p : n->parents) {
            if (p->requires_grad) p->ensure_grad();
        }
        n->backward(*n);
    }
}

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(BinaryKind::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(BinaryKind::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(BinaryKind::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(BinaryKind::Div, a, b); }

Tensor scale(const Tensor& a, double c) {
    return unary_op(
        a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor shift(const Tensor& a, double c) {
    return unary_op(
        a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2) {
        throw ShapeError("matmul requires 2-D operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    const std::size_t n2 = b.shape()[0], p = b.shape()[1];
    if (n != n2) {
        throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    std::vector<double> out(m * p, 0.0);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t k = 0; k < n; ++k) {
            const double aik = pa[i * n + k];
            const double* brow = pb + k * p;
            double* orow = out.data() + i * p;
            for (std::size_t j = 0; j < p; ++j) orow[j] += aik * brow[j];
        }
    }
    return make_op({m, p}, std::move(out), {a, b}, [m, n, p](TensorNode& self) {
        TensorNode& na = *self.parents[0];
        TensorNode& nb = *self.parents[1];
        const double* g = self.grad.data();
        if (na.requires_grad) {
            // dA = g . B^T
            const double* pb = nb.data.data();
            double* ga = na.grad.data();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < p; ++j) {
                    const double gij = g[i * p + j];
                    const double* bcol = pb + j;
                    for (std::size_t k = 0; k < n; ++k) ga[i * n + k] += gij * bcol[k * p];
                }
            }
        }
        if (nb.requires_grad) {
            // dB = A^T . g
            const double* pa = na.data.data();
            double* gb = nb.grad.data();
            for (std::size_t k = 0; k < n; ++k) {
                for (std::size_t i = 0; i < m; ++i) {
                    const double aik = pa[i * n + k];
                    const double* grow = g + i * p;
                    double* brow = gb + k * p;
                    for (std::size_t j = 0; j < p; ++j) brow[j] += aik * grow[j];
                }
            }
        }
    });
}

Tensor transpose(const Tensor& a) {
    if (a.shape().size() != 2) throw ShapeError("transpose requires 2-D input");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(m * n);
    const double* pa = a.data().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = pa[i * n + j];
    return make_op({n, m}, std::move(out), {a}, [m, n](TensorNode& self) {
        TensorNode& na = *self.parents[0];
        if (!na.requires_grad) return;
        const double* g = self.grad.data();
        double* ga = na.grad.data();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
}

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return make_op({1}, {s}, {a}, [](TensorNode& self) {
        TensorNode& na = *self.parents[0];
        if (!na.requires_grad) return;
        const double g = self.grad[0];
        for (double& v : na.grad) v += g;
    });
}

Tensor mean_all(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.numel());
    double s = 0.0;
    for (double v : a.data()) s += v;
    return make_op({1}, {s * inv}, {a}, [inv](TensorNode& self) {
        TensorNode& na = *self.parents[0];
        if (!na.requires_grad) return;
        const double g = self.grad[0] * inv;
        for (double& v : na.grad) v += g;
    });
}

Tensor sum_rows(const Tensor& a) {
    if (a.shape().size() != 2) throw ShapeError("sum_rows requires 2-D input");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(m, 0.0);
    const double* pa = a.data().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i] += pa[i * n + j];
    return make_op({m}, std::move(out), {a}, [m, n](TensorNode& self) {
        TensorNode& na = *self.parents[0];
        if (!na.requires_grad) return;
        const double* g = self.grad.data();
        double* ga = na.grad.data();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i];
    });
}

Tensor softmax_rows(const Tensor& a) {
    const auto& s = a.shape();
    if (s.size() > 2) throw ShapeError("softmax_rows supports 1-D or 2-D input");
    const std::size_t rows = s.size() == 2 ? s[0] : 1;
    const std::size_t cols = s.size() == 2 ? s[1] : s[0];
    std::vector<double> out(rows * cols);
    const double* pa = a.data().data();
    for (std::size_t i = 0; i < rows; ++i) {
        const double* x = pa + i * cols;
        double* y = out.data() + i * cols;
        double mx = x[0];
        for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        const double inv = 1.0 / z;
        for (std::size_t j = 0; j < cols; ++j) y[j] *= inv;
    }
    return make_op(s, std::move(out), {a}, [rows, cols](TensorNode& self) {
        TensorNode& na = *self.parents[0];
        if (!na.requires_grad) return;
        const double* g = self.grad.data();
        const double* p = self.data.data();
        double* ga = na.grad.data();
        for (std::size_t i = 0; i < rows; ++i) {
            const double* gi = g + i * cols;
            const double* pi = p + i * cols;
            double dot = 0.0;
            for (std::size_t j = 0; j < cols; ++j) dot += gi[j] * pi[j];
            double* go = ga + i * cols;
            for (std::size_t j = 0; j < cols; ++j) go[j] += pi[j] * (gi[j] - dot);
        }
    });
}

Tensor log_t(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor exp_t(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor sqrt_t(const Tensor& a) {
    // gradient floored near zero so distance(f, f) stays differentiable
    return unary_op(
        a, [](double x) { return std::sqrt(x); },
        [](double, double y) { return 0.5 / std::max(y, 1e-12); });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor abs_t(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor pow_scalar(const Tensor& a, double exponent) {
    return unary_op(
        a, [exponent](double x) { return std::pow(x, exponent); },
        [exponent](double x, double) {
            if (x == 0.0) return exponent == 1.0 ? 1.0 : 0.0;
            return exponent * std::pow(x, exponent - 1.0);
        });
}

Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return unary_op(
        a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [](double x, double) {
            const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            return cdf + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
        });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    return unary_op(
        a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
        [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Tensor clamp_min(const Tensor& a, double lo) {
    return unary_op(
        a, [lo](double x) { return std::max(x, lo); },
        [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const auto& s = x.shape();
    if (s.size() > 2) throw ShapeError("layer_norm_rows supports 1-D or 2-D input");
    const std::size_t rows = s.size() == 2 ? s[0] : 1;
    const std::size_t cols = s.size() == 2 ? s[1] : s[0];
    if (gamma.numel() != cols || beta.numel() != cols) {
        throw ShapeError("layer norm parameter length does not match feature count");
    }
    std::vector<double> out(rows * cols);
    std::vector<double> xhat(rows * cols);
    std::vector<double> inv_std(rows);
    const double* px = x.data().data();
    const double* pg = gamma.data().data();
    const double* pb = beta.data().data();
    for (std::size_t i = 0; i < rows; ++i) {
        const double* xi = px + i * cols;
        double mean = 0.0;
        for (std::size_t j = 0; j < cols; ++j) mean += xi[j];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            const double d = xi[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[i] = inv;
        for (std::size_t j = 0; j < cols; ++j) {
            const double xh = (xi[j] - mean) * inv;
            xhat[i * cols + j] = xh;
            out[i * cols + j] = pg[j] * xh + pb[j];
        }
    }
    return make_op(s, std::move(out), {x, gamma, beta},
                   [rows, cols, xhat = std::move(xhat),
                    inv_std = std::move(inv_std)](TensorNode& self) {
                       TensorNode& nx = *self.parents[0];
                       TensorNode& ng = *self.parents[1];
                       TensorNode& nb = *self.parents[2];
                       const double* g = self.grad.data();
                       const double* pg = ng.data.data();
                       for (std::size_t i = 0; i < rows; ++i) {
                           const double* gi = g + i * cols;
                           const double* xh = xhat.data() + i * cols;
                           if (ng.requires_grad || nb.requires_grad) {
                               for (std::size_t j = 0; j < cols; ++j) {
                                   if (ng.requires_grad) ng.grad[j] += gi[j] * xh[j];
                                   if (nb.requires_grad) nb.grad[j] += gi[j];
                               }
                           }
                           if (nx.requires_grad) {
                               double mean_gg = 0.0, mean_ggx = 0.0;
                               for (std::size_t j = 0; j < cols; ++j) {
                                   const double gg = gi[j] * pg[j];
                                   mean_gg += gg;
                                   mean_ggx += gg * xh[j];
                               }
                               mean_gg /= static_cast<double>(cols);
                               mean_ggx /= static_cast<double>(cols);
                               double* gx = nx.grad.data() + i * cols;
                               for (std::size_t j = 0; j < cols; ++j) {
                                   const double gg = gi[j] * pg[j];
                                   gx[j] += inv_std[i] * (gg - mean_gg - xh[j] * mean_ggx);
                               }
                           }
                       }
                   });
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    if (table.shape().size() != 2) throw ShapeError("embedding table must be 2-D");
    const std::size_t v = table.shape()[0], h = table.shape()[1];
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= v) {
            throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                                    std::to_string(v));
        }
    }
    const std::size_t t = ids.size();
    std::vector<double> out(t * h);
    const double* pt = table.data().data();
    for (std::size_t i = 0; i < t; ++i) {
        std::copy_n(pt + static_cast<std::size_t>(ids[i]) * h, h, out.data() + i * h);
    }
    return make_op({t, h}, std::move(out), {table}, [ids, h](TensorNode& self) {
        TensorNode& nt = *self.parents[0];
        if (!nt.requires_grad) return;
        const double* g = self.grad.data();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            double* row = nt.grad.data() + static_cast<std::size_t>(ids[i]) * h;
            const double* gi = g + i * h;
            for (std::size_t j = 0; j < h; ++j) row[j] += gi[j];
        }
    });
}

Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
    if (a.shape().size() != 2) throw ShapeError("slice_rows requires 2-D input");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (r0 >= r1 || r1 > m) throw ShapeError("bad row range in slice_rows");
    const std::size_t h = r1 - r0;
    std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(r0 * n),
                            a.data().begin() + static_cast<std::ptrdiff_t>(r1 * n));
    return make_op({h, n}, std::move(out), {a}, [r0, n, h](TensorNode& self) {
        TensorNode& na = *self.parents[0];
        if (!na.requires_grad) return;
        const double* g = self.grad.data();
        double* ga = na.grad.data() + r0 * n;
        for (std::size_t i = 0; i < h * n; ++i) ga[i] += g[i];
    });
}

Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
    if (a.shape().size() != 2) throw ShapeError("slice_cols requires 2-D input");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (c0 >= c1 || c1 > n) throw ShapeError("bad column range in slice_cols");
    const std::size_t w = c1 - c0;
    std::vector<double> out(m * w);
    const double* pa = a.data().data();
    for (std::size_t i = 0; i < m; ++i)
        std::copy_n(pa + i * n + c0, w, out.data() + i * w);
    return make_op({m, w}, std::move(out), {a}, [m, n, c0, w](TensorNode& self) {
        TensorNode& na = *self.parents[0];
        if (!na.requires_grad) return;
        const double* g = self.grad.data();
        for (std::size_t i = 0; i < m; ++i) {
            double* row = na.grad.data() + i * n + c0;
            const double* gi = g + i * w;
            for (std::size_t j = 0; j < w; ++j) row[j] += gi[j];
        }
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols needs at least one part");
    const std::size_t m = parts[0].shape()[0];
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.shape().size() != 2 || p.shape()[0] != m) {
            throw ShapeError("concat_cols parts must be 2-D with matching row counts");
        }
        total += p.shape()[1];
    }
    std::vector<double> out(m * total);
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.shape()[1];
        const double* pd = p.data().data();
        for (std::size_t i = 0; i < m; ++i) std::copy_n(pd + i * w, w, out.data() + i * total + off);
        off += w;
    }
    std::vector<Tensor> parents(parts.begin(), parts.end());
    return make_op({m, total}, std::move(out), std::move(parents), [m, total](TensorNode& self) {
        const double* g = self.grad.data();
        std::size_t off = 0;
        for (auto& pn : self.parents) {
            const std::size_t w = pn->shape[1];
            if (pn->requires_grad) {
                for (std::size_t i = 0; i < m; ++i) {
                    double* row = pn->grad.data() + i * w;
                    const double* gi = g + i * total + off;
                    for (std::size_t j = 0; j < w; ++j) row[j] += gi[j];
                }
            }
            off += w;
        }
    });
}

Tensor straight_through(const Tensor& forward_value, const Tensor& gradient_carrier) {
    if (forward_value.shape() != gradient_carrier.shape()) {
        throw ShapeError("straight_through shapes differ: " + shape_str(forward_value.shape()) +
                         " vs " + shape_str(gradient_carrier.shape()));
    }
    std::vector<double> out(forward_value.data().begin(), forward_value.data().end());
    return make_op(forward_value.shape(), std::move(out), {gradient_carrier},
                   [](TensorNode& self) {
                       TensorNode& nc = *self.parents[0];
                       if (!nc.requires_grad) return;
                       const double* g = self.grad.data();
                       for (std::size_t i = 0; i < self.numel(); ++i) nc.grad[i] += g[i];
                   });
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.shape().size() != 2) throw ShapeError("cross_entropy_rows requires 2-D logits");
    const std::size_t t = logits.shape()[0], v = logits.shape()[1];
    if (targets.size() != t) throw ShapeError("target count does not match logit rows");
    for (int y : targets) {
        if (y < 0 || static_cast<std::size_t>(y) >= v) {
            throw std::out_of_range("target id outside vocabulary");
        }
    }
    const double* pl = logits.data().data();
    double total = 0.0;
    std::vector<double> probs(t * v);
    for (std::size_t i = 0; i < t; ++i) {
        const double* x = pl + i * v;
        double mx = x[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            probs[i * v + j] = std::exp(x[j] - mx);
            z += probs[i * v + j];
        }
        const double inv = 1.0 / z;
        for (std::size_t j = 0; j < v; ++j) probs[i * v + j] *= inv;
        total += std::log(z) + mx - x[targets[i]];
    }
    total /= static_cast<double>(t);
    return make_op({1}, {total}, {logits},
                   [t, v, targets, probs = std::move(probs)](TensorNode& self) {
                       TensorNode& nl = *self.parents[0];
                       if (!nl.requires_grad) return;
                       const double g = self.grad[0] / static_cast<double>(t);
                       for (std::size_t i = 0; i < t; ++i) {
                           double* row = nl.grad.data() + i * v;
                           const double* pi = probs.data() + i * v;
                           for (std::size_t j = 0; j < v; ++j) row[j] += g * pi[j];
                           row[targets[i]] -= g;
                       }
                   });
}

Tensor reshape(const Tensor& a, Shape shape) {
    check_positive_extents(shape);
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return make_op(std::move(shape), std::move(out), {a}, [](TensorNode& self) {
        TensorNode& na = *self.parents[0];
        if (!na.requires_grad) return;
        for (std::size_t i = 0; i < self.numel(); ++i) na.grad[i] += self.grad[i];
    });
}

Tensor detach(const Tensor& a) {
    return Tensor::from(std::vector<double>(a.data().begin(), a.data().end()), a.shape(), false);
}

}  // namespace cbq
