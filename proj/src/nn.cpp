#include "pcvd/nn.hpp"

#include <algorithm>
#include <cmath>

namespace pcvd {

Tensor glorot(Shape shape, Index fan_in, Index fan_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = Tensor::uniform(std::move(shape), rng, -bound, bound);
  t.set_requires_grad();
  return t;
}

void register_param(ParameterMap& out, const std::string& name, const Tensor& t) {
  if (!out.emplace(name, t).second) throw ContractError("duplicate parameter name " + name);
}

Linear Linear::init(Index in, Index out, std::mt19937_64& rng) {
  Linear l;
  l.weight = glorot({in, out}, in, out, rng);
  l.bias = Tensor::zeros({out});
  l.bias.set_requires_grad();
  return l;
}

Tensor Linear::operator()(const Tensor& x) const { return matmul(x, weight) + bias; }

void Linear::collect(ParameterMap& out, const std::string& prefix) const {
  register_param(out, prefix + ".weight", weight);
  register_param(out, prefix + ".bias", bias);
}

void load_parameters(ParameterMap& dst, const ParameterMap& src) {
  if (dst.size() != src.size())
    throw FormatError("checkpoint holds " + std::to_string(src.size()) + " tensors, model expects " +
                          std::to_string(dst.size()),
                      0);
  for (auto& [name, t] : dst) {
    const auto it = src.find(name);
    if (it == src.end()) throw FormatError("checkpoint is missing parameter " + name, 0);
    if (it->second.shape() != t.shape())
      throw FormatError("parameter " + name + " has shape " + shape_string(it->second.shape()) + ", expected " +
                            shape_string(t.shape()),
                        0);
    std::ranges::copy(it->second.values(), t.mutable_values().begin());
  }
}

}  // namespace pcvd
