#pragma once

#include <string>
#include <vector>

#include "agentmixer/autodiff.hpp"
#include "agentmixer/params.hpp"
#include "agentmixer/rng.hpp"

namespace agentmixer {

// Weights live in a ParamStore; the layer keeps pointers, so the store must outlive it
// and must not be copied out from under it.
struct Linear {
  Tensor* weight = nullptr;  // [in x out]
  Tensor* bias = nullptr;    // [1 x out]
  std::size_t in = 0, out = 0;

  // Weights ~ N(0, gain^2 / in), bias zero.
  static Linear create(ParamStore& store, const std::string& path, std::size_t in,
                       std::size_t out, Rng& rng, double gain);
  Var operator()(Tape& tape, const Var& x) const;
};

struct LayerNormParams {
  Tensor* gain = nullptr;   // [1 x d], ones
  Tensor* shift = nullptr;  // [1 x d], zeros
  double eps = 1e-5;

  static LayerNormParams create(ParamStore& store, const std::string& path, std::size_t dim);
  Var operator()(Tape& tape, const Var& x) const;
};

// Fully connected stack with an activation between layers and none after the last.
struct Mlp {
  std::vector<Linear> layers;
  Activation act = Activation::relu;

  static Mlp create(ParamStore& store, const std::string& path, std::size_t in,
                    const std::vector<std::size_t>& hidden, std::size_t out, Rng& rng,
                    double out_gain, Activation act = Activation::relu);
  Var operator()(Tape& tape, const Var& x) const;
  std::size_t in_dim() const { return layers.front().in; }
  std::size_t out_dim() const { return layers.back().out; }
};

}  // namespace agentmixer
