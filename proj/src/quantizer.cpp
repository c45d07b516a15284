#include "cbq/quantizer.hpp"

#include <algorithm>
#include <cmath>

#include "cbq/errors.hpp"

namespace cbq {

namespace {

constexpr double kStepFloor = 1e-8;

double apply_rounding(double v, Rounding r) {
    return r == Rounding::Nearest ? std::nearbyint(v) : std::floor(v);
}

struct GroupInfo {
    std::size_t groups;
    std::size_t inner;  // elements sharing a group are contiguous runs of `inner`
    std::size_t extent;
};

GroupInfo group_info(const Shape& shape, const QuantSpec& spec) {
    if (spec.granularity == Granularity::PerTensor) return {1, 1, 1};
    if (spec.channel_axis >= shape.size()) {
        throw ConfigError("per-channel axis " + std::to_string(spec.channel_axis) +
                          " invalid for shape " + shape_str(shape));
    }
    std::size_t inner = 1;
    for (std::size_t d = spec.channel_axis + 1; d < shape.size(); ++d) inner *= shape[d];
    return {shape[spec.channel_axis], inner, shape[spec.channel_axis]};
}

std::size_t group_of(const GroupInfo& gi, std::size_t element) {
    if (gi.groups == 1) return 0;
    return (element / gi.inner) % gi.extent;
}

void check_steps_positive(const QuantState& state) {
    for (double s : state.step.data()) {
        if (!(s > 0.0)) throw ConfigError("quantization step must be strictly positive");
    }
}

}  // namespace

void QuantSpec::validate() const {
    if (bits < 2 || bits > 16) {
        throw ConfigError("bit-width must lie in [2, 16], got " + std::to_string(bits));
    }
}

QuantSpec weight_spec(int bits, Granularity g, std::size_t axis) {
    QuantSpec s;
    s.bits = bits;
    s.rounding = Rounding::Floor;
    s.granularity = g;
    s.channel_axis = axis;
    s.target = QuantTarget::Weight;
    s.validate();
    return s;
}

QuantSpec act_spec(int bits, Granularity g, std::size_t axis) {
    QuantSpec s;
    s.bits = bits;
    s.rounding = Rounding::Nearest;
    s.granularity = g;
    s.channel_axis = axis;
    s.target = QuantTarget::Activation;
    s.validate();
    return s;
}

std::size_t quant_groups(const Shape& shape, const QuantSpec& spec) {
    return group_info(shape, spec).groups;
}

std::size_t quant_group_of(const Shape& shape, const QuantSpec& spec, std::size_t element) {
    return group_of(group_info(shape, spec), element);
}

QuantState init_step(const Tensor& values, const QuantSpec& spec) {
    spec.validate();
    if (values.numel() == 0) throw ConfigError("cannot initialize steps from an empty tensor");
    const auto gi = group_info(values.shape(), spec);
    std::vector<double> maxabs(gi.groups, 0.0);
    const auto data = values.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
        const std::size_t g = group_of(gi, i);
        maxabs[g] = std::max(maxabs[g], std::fabs(data[i]));
    }
    std::vector<double> step(gi.groups);
    for (std::size_t g = 0; g < gi.groups; ++g) {
        step[g] = std::max(maxabs[g] / spec.q_max(), kStepFloor);
    }
    return QuantState{Tensor::from(std::move(step), {gi.groups}, true)};
}

QuantState init_step_from_maxima(const std::vector<double>& channel_maxabs,
                                 const QuantSpec& spec) {
    spec.validate();
    if (channel_maxabs.empty()) throw ConfigError("no channel maxima to initialize steps from");
    std::vector<double> step;
    if (spec.granularity == Granularity::PerTensor) {
        double mx = 0.0;
        for (double m : channel_maxabs) mx = std::max(mx, std::fabs(m));
        step.push_back(std::max(mx / spec.q_max(), kStepFloor));
    } else {
        step.reserve(channel_maxabs.size());
        for (double m : channel_maxabs) {
            step.push_back(std::max(std::fabs(m) / spec.q_max(), kStepFloor));
        }
    }
    const std::size_t n = step.size();
    return QuantState{Tensor::from(std::move(step), {n}, true)};
}

namespace {

// Shared forward/backward for plain and compensated fake quantization.
Tensor fake_quant_impl(const Tensor& x, const QuantState& state, const Tensor* comp,
                       const QuantSpec& spec) {
    spec.validate();
    check_steps_positive(state);
    const auto gi = group_info(x.shape(), spec);
    if (state.step.numel() != gi.groups) {
        throw ConfigError("step count " + std::to_string(state.step.numel()) +
                          " does not match group count " + std::to_string(gi.groups));
    }
    if (comp && comp->shape() != x.shape()) {
        throw ShapeError("compensation shape " + shape_str(comp->shape()) +
                         " does not match input " + shape_str(x.shape()));
    }
    const double qmin = spec.q_min(), qmax = spec.q_max();
    const Rounding rmode = spec.rounding;

    const auto xs = x.data();
    const auto ss = state.step.data();
    const double* as = comp ? comp->data().data() : nullptr;
    std::vector<double> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double d = ss[group_of(gi, i)];
        const double v = xs[i] / d;
        const double u = apply_rounding(v, rmode) + (as ? as[i] : 0.0);
        out[i] = d * std::clamp(u, qmin, qmax);
    }

    std::vector<Tensor> parents = comp ? std::vector<Tensor>{x, state.step, *comp}
                                       : std::vector<Tensor>{x, state.step};
    return make_op(x.shape(), std::move(out), std::move(parents),
                   [gi, qmin, qmax, rmode, has_comp = comp != nullptr](TensorNode& self) {
                       TensorNode& nx = *self.parents[0];
                       TensorNode& nstep = *self.parents[1];
                       TensorNode* ncomp = has_comp ? self.parents[2].get() : nullptr;
                       const double* g = self.grad.data();
                       const double* xs = nx.data.data();
                       const double* ss = nstep.data.data();
                       const double* as = ncomp ? ncomp->data.data() : nullptr;
                       for (std::size_t i = 0; i < self.numel(); ++i) {
                           const std::size_t grp = group_of(gi, i);
                           const double d = ss[grp];
                           const double v = xs[i] / d;
                           const bool inside = v > qmin && v < qmax;
                           if (nx.requires_grad && inside) nx.grad[i] += g[i];
                           if (nstep.requires_grad) {
                               // exact derivative while no element crosses a
                               // rounding boundary: the clamped lattice value
                               // (q_min / q_max at the clamped ends)
                               const double u = apply_rounding(v, rmode) + (as ? as[i] : 0.0);
                               nstep.grad[grp] += g[i] * std::clamp(u, qmin, qmax);
                           }
                           if (ncomp && ncomp->requires_grad && inside) ncomp->grad[i] += g[i] * d;
                       }
                   });
}

}  // namespace

Tensor fake_quant(const Tensor& x, const QuantState& state, const QuantSpec& spec) {
    return fake_quant_impl(x, state, nullptr, spec);
}

Tensor fake_quant_compensated(const Tensor& x, const QuantState& state, const Tensor& comp,
                              const QuantSpec& spec) {
    return fake_quant_impl(x, state, &comp, spec);
}

IntTensor integer_codes(const Tensor& x, const QuantState& state, const QuantSpec& spec,
                        const std::vector<double>* comp) {
    spec.validate();
    check_steps_positive(state);
    const auto gi = group_info(x.shape(), spec);
    if (comp && comp->size() != x.numel()) {
        throw ShapeError("compensation size does not match input");
    }
    const double qmin = spec.q_min(), qmax = spec.q_max();
    const auto xs = x.data();
    const auto ss = state.step.data();
    IntTensor codes;
    codes.shape = x.shape();
    codes.values.resize(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double d = ss[group_of(gi, i)];
        const double u = apply_rounding(xs[i] / d, spec.rounding) + (comp ? (*comp)[i] : 0.0);
        codes.values[i] = static_cast<std::int32_t>(std::clamp(u, qmin, qmax));
    }
    return codes;
}

}  // namespace cbq
