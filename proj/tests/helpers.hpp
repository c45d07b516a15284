#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "cbq/rng.hpp"
#include "cbq/tensor.hpp"

namespace cbqtest {

inline double rel_err(double got, double want) {
    const double denom = std::max({std::fabs(got), std::fabs(want), 1e-12});
    return std::fabs(got - want) / denom;
}

/// Central finite difference of f() w.r.t. coordinate i of leaf tensor x.
inline double fd_grad(const std::function<double()>& f, cbq::Tensor& x, std::size_t i,
                      double h = 1e-4) {
    auto d = x.data();
    const double orig = d[i];
    d[i] = orig + h;
    const double fp = f();
    d[i] = orig - h;
    const double fm = f();
    d[i] = orig;
    return (fp - fm) / (2.0 * h);
}

inline cbq::Tensor random_tensor(cbq::Rng& rng, cbq::Shape shape, bool requires_grad = true,
                                 double scale = 1.0) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> data(n);
    for (auto& v : data) v = rng.normal(0.0, scale);
    return cbq::Tensor::from(std::move(data), std::move(shape), requires_grad);
}

// Scalar reference loop for trailing-dimension broadcasting.
inline bool ref_broadcast_shape(const cbq::Shape& a, const cbq::Shape& b, cbq::Shape& out) {
    const std::size_t r = std::max(a.size(), b.size());
    out.assign(r, 1);
    for (std::size_t d = 0; d < r; ++d) {
        const std::size_t da = d + a.size() >= r ? a[d + a.size() - r] : 1;
        const std::size_t db = d + b.size() >= r ? b[d + b.size() - r] : 1;
        if (da != db && da != 1 && db != 1) return false;
        out[d] = std::max(da, db);
    }
    return true;
}

inline std::vector<double> ref_broadcast_op(char op, const cbq::Shape& ashape,
                                            const std::vector<double>& a,
                                            const cbq::Shape& bshape,
                                            const std::vector<double>& b, cbq::Shape& out_shape) {
    ref_broadcast_shape(ashape, bshape, out_shape);
    const std::size_t rank = out_shape.size();
    std::size_t total = 1;
    for (auto d : out_shape) total *= d;
    std::vector<double> out(total);
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t lin = 0; lin < total; ++lin) {
        auto src_index = [&](const cbq::Shape& s) {
            std::size_t off = 0, stride = 1;
            for (std::size_t d = s.size(); d-- > 0;) {
                const std::size_t od = d + rank - s.size();
                const std::size_t coord = s[d] == 1 ? 0 : idx[od];
                off += coord * stride;
                stride *= s[d];
            }
            return off;
        };
        const double x = a[src_index(ashape)];
        const double y = b[src_index(bshape)];
        switch (op) {
            case '+': out[lin] = x + y; break;
            case '-': out[lin] = x - y; break;
            case '*': out[lin] = x * y; break;
            case '/': out[lin] = x / y; break;
        }
        for (std::size_t d = rank; d-- > 0;) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
        }
    }
    return out;
}

}  // namespace cbqtest
