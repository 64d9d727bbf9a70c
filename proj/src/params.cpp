#include "agentmixer/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace agentmixer {

Tensor& ParamStore::add(const std::string& path, Tensor init) {
  if (params_.count(path)) throw ConfigError("duplicate parameter path '" + path + "'");
  init.set_requires_grad(true);
  return params_.emplace(path, std::move(init)).first->second;
}

Tensor& ParamStore::get(const std::string& path) {
  auto it = params_.find(path);
  if (it == params_.end()) throw ConfigError("unknown parameter path '" + path + "'");
  return it->second;
}

const Tensor& ParamStore::get(const std::string& path) const {
  auto it = params_.find(path);
  if (it == params_.end()) throw ConfigError("unknown parameter path '" + path + "'");
  return it->second;
}

std::vector<std::string> ParamStore::paths_with_prefix(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [path, _] : params_)
    if (path.compare(0, prefix.size(), prefix) == 0) out.push_back(path);
  return out;
}

std::size_t ParamStore::value_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : params_) t.zero_grad();
}

Adam::Adam(std::vector<std::string> paths, AdamConfig config)
    : paths_(std::move(paths)), config_(config) {}

void Adam::step(ParamStore& store) {
  check_finite_grads(store, paths_);
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (const std::string& path : paths_) {
    Tensor& p = store.get(path);
    if (!p.has_grad()) continue;
    auto& [m, v] = moments_[path];
    if (m.empty()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    auto g = p.grad();
    auto w = p.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] + config_.weight_decay * w[i];
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
      w[i] -= config_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
    }
  }
}

void adam_step(ParamStore& store, Adam& state) {
  state.step(store);
  ++store.step;
}

void check_finite_grads(const ParamStore& store, const std::vector<std::string>& paths) {
  for (const std::string& path : paths) {
    const Tensor& p = store.get(path);
    for (double g : p.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + path + "'");
    }
  }
}

double clip_grad_norm(ParamStore& store, const std::vector<std::string>& paths, double max_norm) {
  double sq = 0.0;
  for (const std::string& path : paths)
    for (double g : store.get(path).grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) {
    check_finite_grads(store, paths);
    throw NumericError("non-finite gradient norm");
  }
  if (norm > max_norm) {
    const double s = max_norm / (norm + 1e-6);
    for (const std::string& path : paths)
      for (double& g : store.get(path).grad()) g *= s;
  }
  return norm;
}

namespace {

constexpr char kMagic[8] = {'A', 'G', 'M', 'X', 'C', 'K', 'P', 'T'};

template <class T>
void put(std::ostream& out, T v) {
  if constexpr (std::endian::native == std::endian::big) {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    out.write(b, sizeof(T));
  } else {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
}

template <class T>
T get_raw(std::istream& in, const std::filesystem::path& file) {
  char b[sizeof(T)];
  if (!in.read(b, sizeof(T))) throw ConfigError("truncated checkpoint " + file.string());
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
  }
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& file, const ParamStore& store,
                     const CheckpointHeader& header) {
  const std::filesystem::path tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write checkpoint " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, header.format_version);
    put<std::uint64_t>(out, header.step);
    put<std::uint64_t>(out, header.rng_seed);
    put<std::uint64_t>(out, store.size());
    for (const auto& [path, t] : store.entries()) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(path.size()));
      out.write(path.data(), static_cast<std::streamsize>(path.size()));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
      for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
      for (double v : t.values()) put<double>(out, v);
    }
    if (!out) throw ConfigError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, file);
}

Checkpoint read_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + file.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw ConfigError("not a checkpoint file: " + file.string());
  }
  Checkpoint ckpt;
  ckpt.header.format_version = get_raw<std::uint32_t>(in, file);
  if (ckpt.header.format_version != 1) {
    throw ConfigError("unsupported checkpoint format version " +
                      std::to_string(ckpt.header.format_version));
  }
  ckpt.header.step = get_raw<std::uint64_t>(in, file);
  ckpt.header.rng_seed = get_raw<std::uint64_t>(in, file);
  const auto n = get_raw<std::uint64_t>(in, file);
  for (std::uint64_t k = 0; k < n; ++k) {
    const auto len = get_raw<std::uint32_t>(in, file);
    std::string path(len, '\0');
    if (!in.read(path.data(), len)) throw ConfigError("truncated checkpoint " + file.string());
    const auto rank = get_raw<std::uint32_t>(in, file);
    Shape shape(rank);
    for (auto& d : shape) d = get_raw<std::uint64_t>(in, file);
    Tensor t(shape);
    for (double& v : t.values()) v = get_raw<double>(in, file);
    ckpt.params.emplace(std::move(path), std::move(t));
  }
  return ckpt;
}

void load_into(ParamStore& store, const Checkpoint& ckpt) {
  for (auto& [path, t] : store.entries()) {
    auto it = ckpt.params.find(path);
    if (it == ckpt.params.end()) throw ConfigError("checkpoint lacks parameter '" + path + "'");
    if (it->second.shape() != t.shape()) {
      throw ConfigError("checkpoint parameter '" + path + "' has shape " +
                        shape_string(it->second.shape()) + ", expected " + shape_string(t.shape()));
    }
    std::copy(it->second.values().begin(), it->second.values().end(), t.values().begin());
  }
  store.step = ckpt.header.step;
}

}  // namespace agentmixer
