#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "m2/params.hpp"
#include "m2/tensor.hpp"

namespace m2 {

enum class InitKind { GlorotUniform, He, MemoryKey, MemoryValue, Zero, One };

// How a parameter tensor is initialized. `rows x cols` is the tensor shape;
// fans default to rows/cols.
struct ParamSpec {
  InitKind kind = InitKind::GlorotUniform;
  std::size_t rows = 1;
  std::size_t cols = 1;
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
  std::size_t n_memory = 0;  // memory kinds: number of slots
  std::size_t d_k = 0;       // memory-key kind: per-head key width
  std::uint64_t seed = 0;
};

// Glorot: U(+-sqrt(6/(fan_in+fan_out))). He: N(0, 2/fan_in). Memory keys:
// N(0, 1/d_k). Memory values: N(0, 1/n_memory). Deterministic per seed.
template <typename T>
Tensor<T> init_tensor(const ParamSpec& spec);

// Transformer warmup schedule: d^-0.5 * min(step^-0.5, step * warmup^-1.5).
double warmup_lr(std::uint64_t step, std::size_t d_model, std::uint64_t warmup);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

// Per-parameter Adam moments for one ParamStore.
template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(const ParamStore<T>& params, AdamConfig config);

  // One bias-corrected step over every trainable parameter. Throws
  // NumericError naming the parameter if a gradient is not finite; the
  // parameters are left untouched in that case.
  void step(ParamStore<T>& params, const std::vector<Tensor<T>>& grads, double lr);

  std::uint64_t steps() const { return step_; }
  const AdamConfig& config() const { return config_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }

 private:
  AdamConfig config_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  std::uint64_t step_ = 0;
};

// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h for every element of x.
// f must return a single-element tensor (ContractError otherwise).
Tensor<double> finite_diff_grad(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                                const Tensor<double>& x, double h = 1e-5);
Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f, const Tensor<double>& x,
                                double h = 1e-5);

// Elementwise |a-b| / max(|a|, |b|, floor), maximized over all elements.
double max_relative_error(const Tensor<double>& a, const Tensor<double>& b, double floor = 1e-6);

// Checkpoint container: manifest text plus named little-endian float32
// arrays. The byte layout is described in docs/formats.md.
struct Checkpoint {
  std::string manifest;
  ParamStore<float> params;
};

void write_checkpoint(const std::string& path, const std::string& manifest, const ParamStore<float>& params);
Checkpoint read_checkpoint(const std::string& path);
std::vector<std::uint8_t> serialize_params(const ParamStore<float>& params);

}  // namespace m2
