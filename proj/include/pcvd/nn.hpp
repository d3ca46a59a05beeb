#pragma once

// Parameter containers shared by the learnable modules.

#include <random>
#include <string>

#include "pcvd/checkpoint.hpp"
#include "pcvd/tensor.hpp"

namespace pcvd {

/// Glorot-uniform leaf tensor that takes gradients.
Tensor glorot(Shape shape, Index fan_in, Index fan_out, std::mt19937_64& rng);

/// Registers a parameter under `prefix + name`; the map shares storage with the module.
void register_param(ParameterMap& out, const std::string& name, const Tensor& t);

/// y = x W + b for x [n x in].
struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  static Linear init(Index in, Index out, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(ParameterMap& out, const std::string& prefix) const;
};

/// Copies values from `src` into the matching entries of `dst`.
/// Throws FormatError when names or shapes differ.
void load_parameters(ParameterMap& dst, const ParameterMap& src);

}  // namespace pcvd
