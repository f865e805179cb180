#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "histocap/archive.hpp"
#include "histocap/params.hpp"

namespace histocap {

// Clamps every gradient coordinate into [−clip, clip].
template <typename T>
void clip_gradients(const std::vector<Tensor<T>>& params, double clip) {
  const T c = static_cast<T>(clip);
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (auto& g : p.mutable_grad()) g = std::clamp(g, -c, c);
  }
}

template <typename T>
struct ParamGroup {
  std::string name;
  ParamList<T> params;
  double lr = 1e-3;
};

// Bias-corrected Adam over named parameter groups sharing one step counter.
template <typename T>
class Adam {
 public:
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit Adam(std::vector<ParamGroup<T>> groups) : groups_(std::move(groups)) {
    for (const auto& g : groups_) {
      for (const auto& p : g.params) {
        m_.emplace_back(p.tensor.numel(), T(0));
        v_.emplace_back(p.tensor.numel(), T(0));
      }
    }
  }

  std::vector<ParamGroup<T>>& groups() { return groups_; }
  const std::vector<ParamGroup<T>>& groups() const { return groups_; }
  std::size_t step_count() const { return step_; }

  void scale_learning_rates(double factor) {
    for (auto& g : groups_) g.lr *= factor;
  }

  // Parameters without a gradient are treated as having gradient 0.
  void step() {
    ++step_;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
    std::size_t k = 0;
    for (auto& g : groups_) {
      for (auto& p : g.params) {
        auto& m = m_[k];
        auto& v = v_[k];
        ++k;
        auto values = p.tensor.data();
        const bool has = p.tensor.has_grad();
        const auto grad = has ? p.tensor.grad() : std::span<const T>{};
        for (std::size_t i = 0; i < values.size(); ++i) {
          const double gi = has ? static_cast<double>(grad[i]) : 0.0;
          const double mi = beta1 * static_cast<double>(m[i]) + (1.0 - beta1) * gi;
          const double vi = beta2 * static_cast<double>(v[i]) + (1.0 - beta2) * gi * gi;
          m[i] = static_cast<T>(mi);
          v[i] = static_cast<T>(vi);
          const double update = g.lr * (mi / c1) / (std::sqrt(vi / c2) + eps);
          values[i] = static_cast<T>(static_cast<double>(values[i]) - update);
        }
      }
    }
  }

  void zero_grad() {
    for (auto& g : groups_)
      for (auto& p : g.params) p.tensor.clear_grad();
  }

  // Moments are kept at parameter precision, so f32 models checkpoint exactly.
  void save_to(TensorMap& out) const {
    std::size_t k = 0;
    for (const auto& g : groups_) {
      for (const auto& p : g.params) {
        put_tensor(out, "adam.m." + p.name, Tensor<T>(p.tensor.shape(), m_[k]));
        put_tensor(out, "adam.v." + p.name, Tensor<T>(p.tensor.shape(), v_[k]));
        ++k;
      }
    }
  }

  void load_from(const TensorMap& in, std::size_t step) {
    std::size_t k = 0;
    for (const auto& g : groups_) {
      for (const auto& p : g.params) {
        m_[k] = take_tensor<T>(in, "adam.m." + p.name, p.tensor.shape()).values();
        v_[k] = take_tensor<T>(in, "adam.v." + p.name, p.tensor.shape()).values();
        ++k;
      }
    }
    step_ = step;
  }

 private:
  std::vector<ParamGroup<T>> groups_;
  std::vector<std::vector<T>> m_, v_;
  std::size_t step_ = 0;
};

enum class ScheduleEvent { None, Improved, Decay, Stop };

inline std::string to_string(ScheduleEvent e) {
  switch (e) {
    case ScheduleEvent::Improved: return "improved";
    case ScheduleEvent::Decay: return "lr_decay";
    case ScheduleEvent::Stop: return "early_stop";
    case ScheduleEvent::None: break;
  }
  return "";
}

// Validation-score plateau tracking. A decay fires when `plateau_patience`
// consecutive epochs fail to beat the best score, and the plateau counter
// restarts; training stops after `stop_patience` consecutive misses.
struct PlateauSchedule {
  std::size_t plateau_patience = 8;
  std::size_t stop_patience = 20;
  double decay = 0.8;

  double best = -std::numeric_limits<double>::infinity();
  std::size_t since_decay = 0;
  std::size_t since_best = 0;

  // Returns Stop when training must end (taking precedence over Decay).
  ScheduleEvent observe(double score) {
    if (score > best) {
      best = score;
      since_decay = 0;
      since_best = 0;
      return ScheduleEvent::Improved;
    }
    ++since_decay;
    ++since_best;
    if (since_best >= stop_patience) return ScheduleEvent::Stop;
    if (since_decay >= plateau_patience) {
      since_decay = 0;
      return ScheduleEvent::Decay;
    }
    return ScheduleEvent::None;
  }
};

}  // namespace histocap
