#include "dkfac/kfac.hpp"

#include <algorithm>
#include <cmath>

namespace dkfac::kfac {

namespace {
constexpr double kDenominatorFloor = 1e-12;
}

std::string to_string(InverseMethod m) { return m == InverseMethod::eigen ? "eigen" : "inverse"; }

InverseMethod parse_inverse_method(const std::string& s) {
  if (s == "eigen") return InverseMethod::eigen;
  if (s == "inverse") return InverseMethod::inverse;
  throw ValueError("unknown inverse method '" + s + "' (expected eigen or inverse)");
}

int KfacConfig::effective_factor_interval() const {
  if (factor_interval) return *factor_interval;
  return std::max(1, decomp_interval / 10);
}

void KfacConfig::validate() const {
  if (!(damping >= 0.0) || !std::isfinite(damping)) throw ValueError("kfac.damping must be finite and >= 0");
  if (!(running_avg > 0.0 && running_avg <= 1.0)) throw ValueError("kfac.running_avg must lie in (0, 1]");
  if (!(kl_clip > 0.0)) throw ValueError("kfac.kl_clip must be positive");
  if (decomp_interval < 1) throw ValueError("kfac.decomp_interval must be >= 1");
  if (factor_interval && *factor_interval < 1) throw ValueError("kfac.factor_interval must be >= 1");
  if (effective_factor_interval() > decomp_interval) {
    throw ValueError("kfac.factor_interval must not exceed kfac.decomp_interval");
  }
  for (const auto& m : damping_decay) {
    if (!(m.multiplier > 0.0 && m.multiplier <= 1.0)) throw ValueError("kfac.damping_decay multipliers must be in (0, 1]");
    if (m.epoch < 0) throw ValueError("kfac.damping_decay epochs must be >= 0");
  }
  for (const auto& m : interval_decay) {
    if (!(m.multiplier > 0.0)) throw ValueError("kfac.interval_decay multipliers must be positive");
    if (m.epoch < 0) throw ValueError("kfac.interval_decay epochs must be >= 0");
  }
}

Schedule apply_schedules(const KfacConfig& config, int epoch) {
  double damping = config.damping;
  for (const auto& m : config.damping_decay)
    if (m.epoch <= epoch) damping *= m.multiplier;

  double interval = config.decomp_interval;
  for (const auto& m : config.interval_decay)
    if (m.epoch <= epoch) interval *= m.multiplier;
  const int decomp = std::max(1, static_cast<int>(std::lround(interval)));

  int factor = config.factor_interval ? std::min(*config.factor_interval, decomp) : std::max(1, decomp / 10);
  return Schedule{damping, decomp, factor};
}

template <typename Scalar>
Matrix<Scalar> covariance(const Matrix<Scalar>& rows) {
  Matrix<Scalar> c = rows.transpose() * rows / Scalar(rows.rows());
  return (c + c.transpose()) / Scalar(2);
}

template <typename Scalar>
void update_factors(LayerKfacState<Scalar>& state, const Matrix<Scalar>& a_batch, const Matrix<Scalar>& g_batch,
                    Scalar xi) {
  if (a_batch.rows() != a_batch.cols() || g_batch.rows() != g_batch.cols()) {
    throw DimensionError("update_factors: batch factors must be square");
  }
  if (state.have_factors &&
      (a_batch.rows() != state.a_factor.rows() || g_batch.rows() != state.g_factor.rows())) {
    throw DimensionError("update_factors: factor dimensions changed for layer " + std::to_string(state.layer_id));
  }
  if (!state.have_factors) {
    state.a_factor = a_batch;
    state.g_factor = g_batch;
    state.have_factors = true;
  } else {
    state.a_factor = xi * a_batch + (Scalar(1) - xi) * state.a_factor;
    state.g_factor = xi * g_batch + (Scalar(1) - xi) * state.g_factor;
  }
  state.a_factor = (state.a_factor + state.a_factor.transpose()) / Scalar(2);
  state.g_factor = (state.g_factor + state.g_factor.transpose()) / Scalar(2);
}

template <typename Scalar>
void update_factors(LayerKfacState<Scalar>& state, const nn::LayerCapture<Scalar>& capture, Scalar xi) {
  if (capture.a_prev.rows() != capture.g_out.rows()) {
    throw DimensionError("update_factors: a_prev and g_out row counts differ");
  }
  if (capture.grad.size() != 0 &&
      (capture.grad.rows() != capture.g_out.cols() || capture.grad.cols() != capture.a_prev.cols())) {
    throw DimensionError("update_factors: capture shapes do not match the layer gradient");
  }
  update_factors(state, covariance(capture.a_prev), covariance(capture.g_out), xi);
}

template <typename Scalar>
Matrix<Scalar> precondition_eigen(const SymEig<Scalar>& a_eig, const SymEig<Scalar>& g_eig,
                                  const Matrix<Scalar>& grad, Scalar damping) {
  if (grad.rows() != g_eig.dim() || grad.cols() != a_eig.dim()) {
    throw DimensionError("precondition_eigen: gradient is " + std::to_string(grad.rows()) + "x" +
                         std::to_string(grad.cols()) + " but factors are " + std::to_string(g_eig.dim()) + " and " +
                         std::to_string(a_eig.dim()));
  }
  const Vector<Scalar> la = a_eig.lambda.cwiseMax(Scalar(0));
  const Vector<Scalar> lg = g_eig.lambda.cwiseMax(Scalar(0));
  Matrix<Scalar> v1 = g_eig.q.transpose() * grad * a_eig.q;
  Matrix<Scalar> denom = (lg * la.transpose()).array() + damping;
  denom = denom.cwiseMax(Scalar(kDenominatorFloor));
  Matrix<Scalar> v2 = v1.cwiseQuotient(denom);
  return g_eig.q * v2 * a_eig.q.transpose();
}

template <typename Scalar>
Matrix<Scalar> precondition_eigen(const LayerKfacState<Scalar>& state, const Matrix<Scalar>& grad, Scalar damping) {
  if (!state.a_eig || !state.g_eig) {
    throw StateError("precondition_eigen: layer " + std::to_string(state.layer_id) +
                     " has no cached decompositions");
  }
  return precondition_eigen(*state.a_eig, *state.g_eig, grad, damping);
}

template <typename Scalar>
Matrix<Scalar> damped_inverse(const Matrix<Scalar>& factor, Scalar damping) {
  Matrix<Scalar> damped = factor;
  damped.diagonal().array() += damping;
  return linalg::inverse(damped);
}

template <typename Scalar>
Matrix<Scalar> precondition_factored_inverse(const LayerKfacState<Scalar>& state, const Matrix<Scalar>& grad,
                                             Scalar damping) {
  if (!state.have_factors) {
    throw StateError("precondition_factored_inverse: layer " + std::to_string(state.layer_id) + " has no factors");
  }
  if (grad.rows() != state.g_factor.rows() || grad.cols() != state.a_factor.rows()) {
    throw DimensionError("precondition_factored_inverse: gradient shape does not match factors");
  }
  return damped_inverse(state.g_factor, damping) * grad * damped_inverse(state.a_factor, damping);
}

template <typename Scalar>
Scalar scale_grads(std::span<Matrix<Scalar>> preconditioned, std::span<const Matrix<Scalar>> raw, Scalar lr,
                   Scalar kl_clip) {
  if (preconditioned.size() != raw.size()) throw DimensionError("scale_grads: layer lists differ in length");
  Scalar sum = 0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (preconditioned[i].rows() != raw[i].rows() || preconditioned[i].cols() != raw[i].cols()) {
      throw DimensionError("scale_grads: shape mismatch at layer " + std::to_string(i));
    }
    sum += std::abs(preconditioned[i].cwiseProduct(raw[i]).sum());
  }
  const Scalar denom = lr * lr * sum;
  Scalar nu = 1;
  if (denom > Scalar(0) && std::isfinite(static_cast<double>(denom))) {
    nu = std::min(Scalar(1), std::sqrt(kl_clip / denom));
  }
  if (nu != Scalar(1))
    for (auto& p : preconditioned) p *= nu;
  return nu;
}

template <typename Scalar>
bool identical(const LayerKfacState<Scalar>& x, const LayerKfacState<Scalar>& y) {
  auto same_eig = [](const std::optional<SymEig<Scalar>>& a, const std::optional<SymEig<Scalar>>& b) {
    return a.has_value() == b.has_value() && (!a || *a == *b);
  };
  auto same_mat = [](const std::optional<Matrix<Scalar>>& a, const std::optional<Matrix<Scalar>>& b) {
    return a.has_value() == b.has_value() && (!a || linalg::identical(*a, *b));
  };
  return x.layer_id == y.layer_id && x.have_factors == y.have_factors && x.a_owner == y.a_owner &&
         x.g_owner == y.g_owner && linalg::identical(x.a_factor, y.a_factor) &&
         linalg::identical(x.g_factor, y.g_factor) && same_eig(x.a_eig, y.a_eig) && same_eig(x.g_eig, y.g_eig) &&
         same_mat(x.a_inv, y.a_inv) && same_mat(x.g_inv, y.g_inv);
}

#define DKFAC_INSTANTIATE_KFAC(S)                                                                              \
  template Matrix<S> covariance<S>(const Matrix<S>&);                                                         \
  template void update_factors<S>(LayerKfacState<S>&, const Matrix<S>&, const Matrix<S>&, S);                 \
  template void update_factors<S>(LayerKfacState<S>&, const nn::LayerCapture<S>&, S);                         \
  template Matrix<S> precondition_eigen<S>(const SymEig<S>&, const SymEig<S>&, const Matrix<S>&, S);          \
  template Matrix<S> precondition_eigen<S>(const LayerKfacState<S>&, const Matrix<S>&, S);                    \
  template Matrix<S> damped_inverse<S>(const Matrix<S>&, S);                                                  \
  template Matrix<S> precondition_factored_inverse<S>(const LayerKfacState<S>&, const Matrix<S>&, S);         \
  template S scale_grads<S>(std::span<Matrix<S>>, std::span<const Matrix<S>>, S, S);                        \
  template bool identical<S>(const LayerKfacState<S>&, const LayerKfacState<S>&);

DKFAC_INSTANTIATE_KFAC(float)
DKFAC_INSTANTIATE_KFAC(double)

}  // namespace dkfac::kfac
