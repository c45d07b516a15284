#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "cbq/tensor.hpp"

namespace cbq {

enum class Granularity { PerTensor, PerChannel };
enum class Rounding { Nearest, Floor };
enum class QuantTarget { Weight, Activation };

struct QuantSpec {
    int bits = 8;
    Rounding rounding = Rounding::Nearest;
    Granularity granularity = Granularity::PerTensor;
    std::size_t channel_axis = 0;
    QuantTarget target = QuantTarget::Activation;

    double q_min() const { return -static_cast<double>(1 << (bits - 1)); }
    double q_max() const { return static_cast<double>((1 << (bits - 1)) - 1); }
    void validate() const;
};

// Weights round towards negative infinity (their residual is handled by the
// compensation matrix); activations round to nearest.
QuantSpec weight_spec(int bits, Granularity g = Granularity::PerTensor, std::size_t axis = 0);
QuantSpec act_spec(int bits, Granularity g = Granularity::PerTensor, std::size_t axis = 0);

/// Learnable step sizes: one value per quantization group (a single entry
/// for per-tensor, one per channel otherwise). Kept strictly positive by
/// projection after each optimizer update.
struct QuantState {
    Tensor step;
};

struct IntTensor {
    Shape shape;
    std::vector<std::int32_t> values;
};

/// Step sizes initialized to max|values|/q_max per group, floored at 1e-8.
QuantState init_step(const Tensor& values, const QuantSpec& spec);

/// Same rule, but from preccollected per-channel absolute maxima (the
/// calibration pass records those instead of full activation tensors).
QuantState init_step_from_maxima(const std::vector<double>& channel_maxabs,
                                 const QuantSpec& spec);

/// Quantize-dequantize: step * clamp(round_mode(x/step), q_min, q_max).
/// Straight-through on the rounding for the input (gradient 1 strictly
/// inside the clamp range, 0 outside). The step gradient is the clamped
/// lattice value: the exact derivative of the output wherever no element
/// crosses a rounding boundary, which reduces to q_min / q_max at the
/// clamped ends.
Tensor fake_quant(const Tensor& x, const QuantState& state, const QuantSpec& spec);

/// fake_quant with an additive compensation term on the integer lattice:
/// step * clamp(round_mode(x/step) + A, q_min, q_max). Gradient through A
/// is smooth (scaled by step) inside the range.
Tensor fake_quant_compensated(const Tensor& x, const QuantState& state, const Tensor& comp,
                              const QuantSpec& spec);

/// Clamped lattice codes; step * codes reproduces fake_quant bit-exactly.
/// When `comp` is given its entries are added on the lattice before the
/// clamp (used at export with the binarized compensation matrix).
IntTensor integer_codes(const Tensor& x, const QuantState& state, const QuantSpec& spec,
                        const std::vector<double>* comp = nullptr);

/// Group count and element->group mapping for a spec applied to a shape.
std::size_t quant_groups(const Shape& shape, const QuantSpec& spec);
std::size_t quant_group_of(const Shape& shape, const QuantSpec& spec, std::size_t element);

}  // namespace cbq
