#include "qarv/params.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace qarv::nn {

template <typename T>
Tensor<T> ParameterStore<T>::add(const std::string& name, Shape shape) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  Tensor<T> t(std::move(shape));
  t.set_requires_grad(true);
  t.zero_grad();
  params_.push_back({name, t});
  return t;
}

template <typename T>
const Parameter<T>* ParameterStore<T>::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

template <typename T>
Parameter<T>* ParameterStore<T>::find(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

template <typename T>
std::size_t ParameterStore<T>::total_elements() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

double InitRng::uniform() {
  return double(engine_() >> 11) * 0x1.0p-53;
}

double InitRng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  spare_ = r * std::sin(2 * std::numbers::pi * u2);
  has_spare_ = true;
  return r * std::cos(2 * std::numbers::pi * u2);
}

template <typename T>
void init_uniform(Tensor<T>& t, InitRng& rng, double bound) {
  for (auto& v : t.mutable_values()) v = T((2 * rng.uniform() - 1) * bound);
}

template <typename T>
void init_constant(Tensor<T>& t, double value) {
  for (auto& v : t.mutable_values()) v = T(value);
}

template <typename T>
void adam_step(ParameterStore<T>& store, AdamState<T>& state) {
  auto& params = store.params();
  if (state.first_moment.size() != params.size()) {
    state.first_moment.clear();
    state.second_moment.clear();
    for (auto& p : params) {
      state.first_moment.emplace_back(p.value.numel(), T(0));
      state.second_moment.emplace_back(p.value.numel(), T(0));
    }
  }
  for (auto& p : params) {
    for (T g : p.value.grad())
      if (!std::isfinite(g)) throw NonFiniteGradient(p.name);
  }

  ++state.step_count;
  const auto& o = state.options;
  const double t = double(state.step_count);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto value = params[k].value.mutable_values();
    auto grad = params[k].value.grad();
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    if (m.size() != value.size()) throw std::logic_error("adam: moment shape mismatch");
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      const double mi = o.beta1 * m[i] + (1 - o.beta1) * g;
      const double vi = o.beta2 * v[i] + (1 - o.beta2) * g * g;
      m[i] = T(mi);
      v[i] = T(vi);
      value[i] = T(value[i] - o.lr * (mi / c1) / (std::sqrt(vi / c2) + o.eps));
    }
  }
}

template <typename T>
double clip_global_norm(ParameterStore<T>& store, double max_norm) {
  double sq = 0;
  for (auto& p : store.params())
    for (T g : p.value.grad()) sq += double(g) * double(g);
  const double norm = std::sqrt(sq);
  if (std::isfinite(norm) && norm > max_norm) {
    const T factor = T(max_norm / norm);
    for (auto& p : store.params())
      for (auto& g : p.value.grad()) g *= factor;
  }
  return norm;
}

template <typename T>
EmaState<T> ema_init(const ParameterStore<T>& store, double decay) {
  if (!(decay > 0 && decay < 1)) throw std::invalid_argument("ema decay must lie in (0, 1)");
  EmaState<T> s;
  s.decay = decay;
  for (const auto& p : store.params())
    s.shadow.emplace_back(p.value.values().begin(), p.value.values().end());
  return s;
}

template <typename T>
void ema_update(EmaState<T>& state, const ParameterStore<T>& store) {
  const auto& params = store.params();
  if (state.shadow.size() != params.size()) throw std::logic_error("ema: parameter count mismatch");
  const T d = T(state.decay);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto value = params[k].value.values();
    auto& sh = state.shadow[k];
    if (sh.size() != value.size()) throw std::logic_error("ema: shape mismatch");
    for (std::size_t i = 0; i < sh.size(); ++i) sh[i] = d * sh[i] + (T(1) - d) * value[i];
  }
}

#define QARV_INSTANTIATE_PARAMS(T)                                          \
  template class ParameterStore<T>;                                         \
  template void init_uniform(Tensor<T>&, InitRng&, double);                 \
  template void init_constant(Tensor<T>&, double);                          \
  template void adam_step(ParameterStore<T>&, AdamState<T>&);               \
  template double clip_global_norm(ParameterStore<T>&, double);             \
  template EmaState<T> ema_init(const ParameterStore<T>&, double);          \
  template void ema_update(EmaState<T>&, const ParameterStore<T>&);

QARV_INSTANTIATE_PARAMS(float)
QARV_INSTANTIATE_PARAMS(double)

}  // namespace qarv::nn
