#include "agentmixer/nn.hpp"

#include <cmath>

namespace agentmixer {

Linear Linear::create(ParamStore& store, const std::string& path, std::size_t in,
                      std::size_t out, Rng& rng, double gain) {
  Tensor w = Tensor::matrix(in, out);
  const double sd = gain / std::sqrt(static_cast<double>(in));
  for (double& v : w.values()) v = sd * rng.normal();
  Linear layer;
  layer.weight = &store.add(path + "/w", std::move(w));
  layer.bias = &store.add(path + "/b", Tensor::matrix(1, out));
  layer.in = in;
  layer.out = out;
  return layer;
}

Var Linear::operator()(Tape& tape, const Var& x) const {
  return linear(x, tape.param(*weight), tape.param(*bias));
}

LayerNormParams LayerNormParams::create(ParamStore& store, const std::string& path,
                                        std::size_t dim) {
  LayerNormParams ln;
  ln.gain = &store.add(path + "/gain", Tensor::matrix(1, dim, 1.0));
  ln.shift = &store.add(path + "/shift", Tensor::matrix(1, dim));
  return ln;
}

Var LayerNormParams::operator()(Tape& tape, const Var& x) const {
  return layer_norm(x, tape.param(*gain), tape.param(*shift), eps);
}

Mlp Mlp::create(ParamStore& store, const std::string& path, std::size_t in,
                const std::vector<std::size_t>& hidden, std::size_t out, Rng& rng,
                double out_gain, Activation act) {
  Mlp mlp;
  mlp.act = act;
  std::size_t prev = in;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    mlp.layers.push_back(
        Linear::create(store, path + "/l" + std::to_string(i), prev, hidden[i], rng, std::sqrt(2.0)));
    prev = hidden[i];
  }
  mlp.layers.push_back(
      Linear::create(store, path + "/l" + std::to_string(hidden.size()), prev, out, rng, out_gain));
  return mlp;
}

Var Mlp::operator()(Tape& tape, const Var& x) const {
  Var h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](tape, h);
    if (i + 1 < layers.size()) h = activate(h, act);
  }
  return h;
}

}  // namespace agentmixer
