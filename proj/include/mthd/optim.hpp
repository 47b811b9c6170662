// Adam with L2 weight decay, and the exponential moving average that ties
// the teacher to the student.
#pragma once

#include "mthd/hetero_net.hpp"

#include <cmath>

namespace mthd {

struct AdamConfig {
  double learning_rate = 1.25e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-5;  // added to the gradient as wd * theta
};

template <typename Scalar>
struct AdamState {
  Vector<Scalar> first_moment;
  Vector<Scalar> second_moment;
  long step = 0;
};

template <typename Scalar>
void adam_step(Vector<Scalar>& params, const Vector<Scalar>& grad, AdamState<Scalar>& state,
               const AdamConfig& config) {
  if (grad.size() != params.size()) throw ShapeMismatch("adam_step: gradient size mismatch");
  if (state.first_moment.size() != params.size()) {
    state.first_moment = Vector<Scalar>::Zero(params.size());
    state.second_moment = Vector<Scalar>::Zero(params.size());
    state.step = 0;
  }
  ++state.step;
  const auto b1 = static_cast<Scalar>(config.beta1);
  const auto b2 = static_cast<Scalar>(config.beta2);
  const Vector<Scalar> g = grad + static_cast<Scalar>(config.weight_decay) * params;
  state.first_moment = b1 * state.first_moment + (Scalar(1) - b1) * g;
  state.second_moment = b2 * state.second_moment + (Scalar(1) - b2) * g.cwiseProduct(g);
  const double c1 = 1 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1 - std::pow(config.beta2, static_cast<double>(state.step));
  const auto step_size = static_cast<Scalar>(config.learning_rate / c1);
  const auto eps = static_cast<Scalar>(config.epsilon);
  const auto inv_sqrt_c2 = static_cast<Scalar>(1.0 / std::sqrt(c2));
  params.array() -= step_size * state.first_moment.array() /
                    (state.second_moment.array().sqrt() * inv_sqrt_c2 + eps);
}

/// teacher <- alpha * teacher + (1 - alpha) * student. The student is untouched.
template <typename Scalar>
void ema_update(Vector<Scalar>& teacher, const Vector<Scalar>& student, double alpha) {
  if (teacher.size() != student.size()) throw ShapeMismatch("ema_update: parameter size mismatch");
  if (!(alpha >= 0 && alpha <= 1)) throw std::invalid_argument("ema_update: alpha must be in [0, 1]");
  const auto a = static_cast<Scalar>(alpha);
  const auto b = static_cast<Scalar>(1 - alpha);
  teacher = a * teacher + b * student;
}

template <typename Scalar>
void ema_update(Parameters<Scalar>& teacher, const Parameters<Scalar>& student, double alpha) {
  if (!(teacher.config == student.config))
    throw ShapeMismatch("ema_update: teacher and student configs differ");
  ema_update(teacher.values, student.values, alpha);
}

}  // namespace mthd
