#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "qarv/tensor.hpp"

namespace qarv::nn {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
};

// Owns every trainable tensor of a model under a unique, stable name.
template <typename T>
class ParameterStore {
 public:
  Tensor<T> add(const std::string& name, Shape shape);

  std::vector<Parameter<T>>& params() { return params_; }
  const std::vector<Parameter<T>>& params() const { return params_; }
  const Parameter<T>* find(const std::string& name) const;
  Parameter<T>* find(const std::string& name);
  std::size_t total_elements() const;

  void zero_grad();

 private:
  std::vector<Parameter<T>> params_;
};

// Deterministic initializers. std distributions are implementation-defined,
// so values are derived directly from the engine's bits.
class InitRng {
 public:
  explicit InitRng(std::uint64_t seed) : engine_(seed) {}
  double uniform();  // [0, 1)
  double normal();
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0;
};

template <typename T>
void init_uniform(Tensor<T>& t, InitRng& rng, double bound);
template <typename T>
void init_constant(Tensor<T>& t, double value);

struct AdamOptions {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamOptions options;
  std::uint64_t step_count = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(const std::string& param)
      : std::runtime_error("non-finite gradient in parameter '" + param + "'"), param_(param) {}
  const std::string& param() const { return param_; }

 private:
  std::string param_;
};

// Applies one Adam update with bias correction at the state's current lr.
// Throws NonFiniteGradient (without touching any parameter) if a gradient is
// NaN or infinite.
template <typename T>
void adam_step(ParameterStore<T>& store, AdamState<T>& state);

// Rescales all gradients jointly when their global L2 norm exceeds max_norm.
// Returns the norm before clipping.
template <typename T>
double clip_global_norm(ParameterStore<T>& store, double max_norm);

template <typename T>
struct EmaState {
  double decay = 0.9999;
  std::vector<std::vector<T>> shadow;
};

template <typename T>
EmaState<T> ema_init(const ParameterStore<T>& store, double decay);
// shadow <- decay * shadow + (1 - decay) * value
template <typename T>
void ema_update(EmaState<T>& state, const ParameterStore<T>& store);

}  // namespace qarv::nn
