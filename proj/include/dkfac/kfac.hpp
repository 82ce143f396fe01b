#pragma once

// Kronecker-factored preconditioning for one layer.
//
// Gradients are out x in matrices V. With row-major vec, the layer's curvature
// block is kron(G, A) and the damped preconditioned gradient is
//
//   unvec((kron(G, A) + damping * I)^-1 vec(V)) = Q_G [(Q_G^T V Q_A) / (l_G l_A^T + damping)] Q_A^T
//
// which only needs the eigendecompositions of the two factors. The explicit
// path instead damps each factor separately: (G + dI)^-1 V (A + dI)^-1.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dkfac/linalg.hpp"
#include "dkfac/nn.hpp"

namespace dkfac::kfac {

enum class InverseMethod { eigen, inverse };

std::string to_string(InverseMethod m);
InverseMethod parse_inverse_method(const std::string& s);

struct Milestone {
  int epoch = 0;
  double multiplier = 1.0;
  bool operator==(const Milestone&) const = default;
};

struct KfacConfig {
  double damping = 1e-3;
  // Weight of the newest batch estimate in the running average.
  double running_avg = 0.95;
  double kl_clip = 1e-3;
  // Iterations between eigendecomposition refreshes (kfac-update-freq).
  int decomp_interval = 10;
  // Iterations between factor refreshes; derived as decomp_interval / 10
  // (at least 1) when unset.
  std::optional<int> factor_interval;
  std::vector<Milestone> damping_decay;
  std::vector<Milestone> interval_decay;
  InverseMethod method = InverseMethod::eigen;

  int effective_factor_interval() const;
  void validate() const;
  bool operator==(const KfacConfig&) const = default;
};

struct Schedule {
  double damping;
  int decomp_interval;
  int factor_interval;
};

/// Hyper-parameters in effect at `epoch`: every milestone at or before it
/// applies its multiplier once.
Schedule apply_schedules(const KfacConfig& config, int epoch);

template <typename Scalar>
struct LayerKfacState {
  int layer_id = 0;
  Matrix<Scalar> a_factor;
  Matrix<Scalar> g_factor;
  std::optional<SymEig<Scalar>> a_eig;
  std::optional<SymEig<Scalar>> g_eig;
  // Damped inverses for InverseMethod::inverse.
  std::optional<Matrix<Scalar>> a_inv;
  std::optional<Matrix<Scalar>> g_inv;
  int a_owner = 0;
  int g_owner = 0;
  bool have_factors = false;
};

/// Bitwise comparison of factors, caches and ownership.
template <typename Scalar>
bool identical(const LayerKfacState<Scalar>& x, const LayerKfacState<Scalar>& y);

/// Batch estimate rows^T rows / rows.count, symmetrized.
template <typename Scalar>
Matrix<Scalar> covariance(const Matrix<Scalar>& rows);

/// Running average of the Kronecker factors:
///   a <- xi * A_batch + (1 - xi) * a   (same for g)
/// The first call takes the batch estimate directly.
template <typename Scalar>
void update_factors(LayerKfacState<Scalar>& state, const nn::LayerCapture<Scalar>& capture, Scalar xi);

/// Same update from precomputed batch estimates.
template <typename Scalar>
void update_factors(LayerKfacState<Scalar>& state, const Matrix<Scalar>& a_batch, const Matrix<Scalar>& g_batch,
                    Scalar xi);

template <typename Scalar>
Matrix<Scalar> precondition_eigen(const SymEig<Scalar>& a_eig, const SymEig<Scalar>& g_eig,
                                  const Matrix<Scalar>& grad, Scalar damping);

/// Uses the cached (possibly stale) decompositions in `state`.
template <typename Scalar>
Matrix<Scalar> precondition_eigen(const LayerKfacState<Scalar>& state, const Matrix<Scalar>& grad, Scalar damping);

/// (G + dI)^-1 grad (A + dI)^-1 from the current factors.
template <typename Scalar>
Matrix<Scalar> precondition_factored_inverse(const LayerKfacState<Scalar>& state, const Matrix<Scalar>& grad,
                                             Scalar damping);

template <typename Scalar>
Matrix<Scalar> damped_inverse(const Matrix<Scalar>& factor, Scalar damping);

/// Rescales every preconditioned gradient in place by
///   nu = min(1, sqrt(kl_clip / (lr^2 * sum_i |<P_i, G_i>|)))
/// and returns nu. A zero denominator gives nu = 1.
template <typename Scalar>
Scalar scale_grads(std::span<Matrix<Scalar>> preconditioned, std::span<const Matrix<Scalar>> raw, Scalar lr,
                   Scalar kl_clip);

}  // namespace dkfac::kfac
