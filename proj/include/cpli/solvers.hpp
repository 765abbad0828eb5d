#pragma once

#include "cpli/tensor.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace cpli {

/// Design matrix and target of an l1-penalised least-squares problem
///   minimise ||b - A beta||^2 + lambda ||beta||_1
/// with the Gram matrix, A^T b and column norms cached for coordinate descent.
template <typename Scalar>
class WeightedSystem {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  WeightedSystem() = default;

  template <typename DerivedA, typename DerivedB>
  WeightedSystem(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b)
      : a_(a), b_(b) {
    if (a_.rows() < 1 || a_.cols() < 1) {
      throw std::invalid_argument("weighted system needs at least one row and one column");
    }
    if (b_.size() != a_.rows()) {
      throw std::invalid_argument("weighted system target length " + std::to_string(b_.size()) +
                                  " does not match row count " + std::to_string(a_.rows()));
    }
    if (!a_.allFinite() || !b_.allFinite()) {
      throw std::invalid_argument("weighted system contains NaN or Inf");
    }
    gram_.noalias() = a_.transpose() * a_;
    corr_.noalias() = a_.transpose() * b_;
    col_norms_ = a_.colwise().norm().transpose();
  }

  const Matrix& a() const { return a_; }
  const Vector& b() const { return b_; }
  const Matrix& gram() const { return gram_; }
  /// A^T b.
  const Vector& correlations() const { return corr_; }
  const Vector& column_norms() const { return col_norms_; }
  Eigen::Index rows() const { return a_.rows(); }
  Eigen::Index cols() const { return a_.cols(); }

  bool zero_column(Eigen::Index j) const { return gram_(j, j) == Scalar(0); }

  std::size_t nonzero_columns() const {
    std::size_t n = 0;
    for (Eigen::Index j = 0; j < cols(); ++j) n += !zero_column(j);
    return n;
  }

  Scalar residual_squared(const Vector& beta) const { return (b_ - a_ * beta).squaredNorm(); }

  Scalar objective(const Vector& beta, Scalar lambda) const {
    return residual_squared(beta) + lambda * beta.template lpNorm<1>();
  }

  /// 2 max_j |A_j^T b|: the smallest lambda at which beta = 0 is optimal.
  Scalar lambda_max() const { return Scalar(2) * corr_.cwiseAbs().maxCoeff(); }

 private:
  Matrix a_;
  Vector b_;
  Matrix gram_;
  Vector corr_;
  Vector col_norms_;
};

template <typename Scalar>
struct LassoResult {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> beta;
  bool converged = false;
  int sweeps = 0;
};

template <typename Scalar>
Scalar soft_threshold(Scalar x, Scalar t) {
  if (x > t) return x - t;
  if (x < -t) return x + t;
  return Scalar(0);
}

/// Cyclic coordinate descent in ascending column order. Each coordinate is
/// minimised exactly, so no sweep increases the objective. All-zero columns
/// are pinned to zero. Stops when the largest coordinate change of a sweep is
/// below `tol` or after `max_sweeps` sweeps (then `converged` is false).
template <typename Scalar>
LassoResult<Scalar> lasso_coordinate_descent(
    const WeightedSystem<Scalar>& sys, std::type_identity_t<Scalar> lambda,
    const std::type_identity_t<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>& beta_init,
    int max_sweeps = 10000, std::type_identity_t<Scalar> tol = Scalar(1e-9)) {
  if (!(lambda >= Scalar(0))) throw std::invalid_argument("lasso: lambda must be >= 0");
  if (beta_init.size() != sys.cols()) {
    throw std::invalid_argument("lasso: beta_init length " + std::to_string(beta_init.size()) +
                                " does not match column count " + std::to_string(sys.cols()));
  }
  const auto& gram = sys.gram();
  const auto& corr = sys.correlations();
  const Eigen::Index p = sys.cols();
  const Scalar half_lambda = lambda / Scalar(2);

  LassoResult<Scalar> r;
  r.beta = beta_init;
  for (Eigen::Index j = 0; j < p; ++j) {
    if (sys.zero_column(j)) r.beta[j] = Scalar(0);
  }
  // grad_part = G beta, maintained incrementally.
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> g_beta = gram * r.beta;

  for (r.sweeps = 0; r.sweeps < max_sweeps;) {
    Scalar max_delta = 0;
    for (Eigen::Index j = 0; j < p; ++j) {
      const Scalar gjj = gram(j, j);
      if (gjj == Scalar(0)) continue;
      const Scalar old = r.beta[j];
      const Scalar rho = corr[j] - (g_beta[j] - gjj * old);
      const Scalar updated = soft_threshold(rho, half_lambda) / gjj;
      const Scalar delta = updated - old;
      if (delta != Scalar(0)) {
        r.beta[j] = updated;
        g_beta += delta * gram.col(j);
        max_delta = std::max(max_delta, std::abs(delta));
      }
    }
    ++r.sweeps;
    if (max_delta < tol) {
      r.converged = true;
      break;
    }
  }
  return r;
}

struct LambdaSearchOptions {
  double rho = 1.3;
  /// Absolute floor; a negative value selects 1e-6 * lambda_max.
  double lambda_floor = -1.0;
  double tol = 1e-9;
  int max_sweeps = 10000;
  int max_grid_steps = 2000;
};

template <typename Scalar>
struct SelectionResult {
  /// LASSO solution at lambda_final.
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> beta;
  /// Selected channels, ascending: the nonzeros of beta plus any backfilled columns.
  std::vector<std::size_t> support;
  std::vector<std::size_t> backfilled;
  Scalar lambda_final = 0;
  Scalar lambda_floor = 0;
  /// ||b - A beta|| at lambda_final.
  Scalar residual_norm = 0;
  /// Unpenalised least-squares residual norm using only the support columns.
  Scalar support_residual_norm = 0;
  std::size_t lasso_support_size = 0;
  int grid_steps = 0;
  bool converged = true;
  /// Budget exceeded the number of nonzero columns.
  bool budget_warning = false;
};

template <typename Scalar>
std::size_t count_nonzero(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& v) {
  return static_cast<std::size_t>((v.array() != Scalar(0)).count());
}

/// Least-squares fit of b on the given columns, via the cached Gram matrix.
/// Returns the coefficients (zero outside `cols`).
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> fit_on_columns(const WeightedSystem<Scalar>& sys,
                                                         const std::vector<std::size_t>& cols) {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  Vector full = Vector::Zero(sys.cols());
  if (cols.empty()) return full;
  const auto k = static_cast<Eigen::Index>(cols.size());
  Matrix g(k, k);
  Vector c(k);
  for (Eigen::Index r = 0; r < k; ++r) {
    c[r] = sys.correlations()[static_cast<Eigen::Index>(cols[r])];
    for (Eigen::Index s = 0; s < k; ++s) {
      g(r, s) = sys.gram()(static_cast<Eigen::Index>(cols[r]), static_cast<Eigen::Index>(cols[s]));
    }
  }
  // Semidefinite-safe: complete orthogonal decomposition gives the minimum-norm solution.
  const Vector w = g.completeOrthogonalDecomposition().solve(c);
  for (Eigen::Index r = 0; r < k; ++r) full[static_cast<Eigen::Index>(cols[r])] = w[r];
  return full;
}

/// Raises lambda along lambda_floor * rho^k (warm-started) until the LASSO
/// support fits in `budget`, then backfills greedily by |A_j^T r| until the
/// support holds min(budget, nonzero columns) entries.
template <typename Scalar>
SelectionResult<Scalar> lambda_search(const WeightedSystem<Scalar>& sys, std::size_t budget,
                                      const LambdaSearchOptions& opt = {}) {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  const auto p = static_cast<std::size_t>(sys.cols());
  if (budget < 1 || budget > p) {
    throw std::invalid_argument("lambda_search: budget " + std::to_string(budget) +
                                " outside [1, " + std::to_string(p) + "]");
  }
  if (!(opt.rho > 1.0)) throw std::invalid_argument("lambda_search: rho must be > 1");

  SelectionResult<Scalar> res;
  const std::size_t live = sys.nonzero_columns();
  res.budget_warning = budget > live;
  const std::size_t target = std::min(budget, live);

  const Scalar lmax = sys.lambda_max();
  res.lambda_floor = opt.lambda_floor >= 0 ? Scalar(opt.lambda_floor) : Scalar(1e-6) * lmax;

  Vector beta = Vector::Zero(sys.cols());
  Scalar lambda = res.lambda_floor;
  for (int k = 0;; ++k) {
    auto lr = lasso_coordinate_descent(sys, lambda, beta, opt.max_sweeps, Scalar(opt.tol));
    beta = std::move(lr.beta);
    res.converged = res.converged && lr.converged;
    res.grid_steps = k + 1;
    if (count_nonzero(beta) <= budget || lambda == Scalar(0)) break;
    if (k + 1 >= opt.max_grid_steps) {
      throw std::runtime_error("lambda_search: grid exhausted before support fit the budget");
    }
    lambda *= Scalar(opt.rho);
  }
  res.beta = beta;
  res.lambda_final = lambda;
  res.residual_norm = std::sqrt(sys.residual_squared(beta));
  res.lasso_support_size = count_nonzero(beta);

  for (std::size_t j = 0; j < p; ++j) {
    if (beta[static_cast<Eigen::Index>(j)] != Scalar(0)) res.support.push_back(j);
  }
  // A tiny lambda floor can still leave more nonzeros than the budget when
  // lambda reached zero; keep the largest-magnitude ones.
  if (res.support.size() > budget) {
    std::stable_sort(res.support.begin(), res.support.end(), [&](std::size_t x, std::size_t y) {
      return std::abs(beta[static_cast<Eigen::Index>(x)]) >
             std::abs(beta[static_cast<Eigen::Index>(y)]);
    });
    res.support.resize(budget);
    std::sort(res.support.begin(), res.support.end());
  }

  // Greedy backfill, refitting on the support after each addition.
  while (res.support.size() < target) {
    const Vector w = res.support.empty() ? Vector(Vector::Zero(sys.cols()))
                                         : fit_on_columns(sys, res.support);
    const Vector score = sys.correlations() - sys.gram() * w;  // A^T r
    std::size_t best = p;
    Scalar best_score = -1;
    for (std::size_t j = 0; j < p; ++j) {
      if (sys.zero_column(static_cast<Eigen::Index>(j))) continue;
      if (std::binary_search(res.support.begin(), res.support.end(), j)) continue;
      const Scalar s = std::abs(score[static_cast<Eigen::Index>(j)]);
      if (s > best_score) {
        best_score = s;
        best = j;
      }
    }
    res.support.insert(std::upper_bound(res.support.begin(), res.support.end(), best), best);
    res.backfilled.push_back(best);
  }

  const Vector w = fit_on_columns(sys, res.support);
  res.support_residual_norm = std::sqrt(std::max(Scalar(0), sys.residual_squared(w)));
  return res;
}

/// Unpenalised residual of the least-squares fit restricted to `cols`.
template <typename Scalar>
Scalar subset_residual_squared(const WeightedSystem<Scalar>& sys,
                               const std::vector<std::size_t>& cols) {
  return sys.residual_squared(fit_on_columns(sys, cols));
}

struct KktReport {
  double max_violation = 0;  // worst excess over the allowed slack
  double scale = 0;
  bool ok = true;
};

/// Stationarity certificate of a LASSO solution:
///   beta_j != 0: |2 A_j^T(A beta - b) + lambda sign(beta_j)| <= tol * scale
///   beta_j == 0: |2 A_j^T(A beta - b)| <= lambda + tol * scale
/// with scale = max column norm * ||b||.
template <typename Scalar>
KktReport kkt_check(const WeightedSystem<Scalar>& sys,
                    const std::type_identity_t<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>& beta,
                    std::type_identity_t<Scalar> lambda,
                    double tol = 1e-6) {
  KktReport rep;
  rep.scale = static_cast<double>(sys.column_norms().maxCoeff() * sys.b().norm());
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> grad =
      Scalar(2) * (sys.gram() * beta - sys.correlations());
  const double slack = tol * rep.scale;
  for (Eigen::Index j = 0; j < beta.size(); ++j) {
    double excess;
    if (beta[j] != Scalar(0)) {
      const Scalar sgn = beta[j] > 0 ? Scalar(1) : Scalar(-1);
      excess = std::abs(static_cast<double>(grad[j] + lambda * sgn)) - slack;
    } else {
      excess = std::abs(static_cast<double>(grad[j])) - static_cast<double>(lambda) - slack;
    }
    rep.max_violation = std::max(rep.max_violation, excess);
    if (excess > 0) rep.ok = false;
  }
  return rep;
}

template <typename Scalar>
struct RefitResult {
  /// One column of coefficients per target column.
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> weights;
  Scalar damping = 0;
  bool escalated = false;
};

/// Solves (P^T P + eps I) w_i = P^T t_i for every target column via Cholesky.
/// When the factorisation fails or is numerically singular the damping is
/// raised to 1e-8 * trace(P^T P) / cols and the solve retried.
template <typename DerivedP, typename DerivedT>
RefitResult<typename DerivedP::Scalar> least_squares_refit(const Eigen::MatrixBase<DerivedP>& patches,
                                                           const Eigen::MatrixBase<DerivedT>& targets,
                                                           typename DerivedP::Scalar damping = 0) {
  using Scalar = typename DerivedP::Scalar;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  if (patches.rows() != targets.rows()) {
    throw std::invalid_argument("least_squares_refit: patches have " +
                                std::to_string(patches.rows()) + " rows, targets " +
                                std::to_string(targets.rows()));
  }
  if (!(damping >= Scalar(0))) throw std::invalid_argument("least_squares_refit: damping < 0");
  const Eigen::Index n = patches.cols();

  RefitResult<Scalar> r;
  r.damping = damping;
  const Matrix normal = patches.transpose() * patches;
  const Matrix rhs = patches.transpose() * targets;
  const Scalar trace = normal.trace();
  if (trace == Scalar(0)) {
    r.weights = Matrix::Zero(n, targets.cols());
    return r;
  }

  auto attempt = [&](Scalar eps) -> bool {
    Matrix m = normal;
    m.diagonal().array() += eps;
    Eigen::LLT<Matrix> llt(m);
    if (llt.info() != Eigen::Success || llt.rcond() < Scalar(1e-13)) return false;
    r.weights = llt.solve(rhs);
    return r.weights.allFinite();
  };

  if (attempt(damping)) return r;
  r.escalated = true;
  r.damping = std::max(damping, Scalar(1e-8) * trace / static_cast<Scalar>(n));
  for (int tries = 0; tries < 8; ++tries) {
    if (attempt(r.damping)) return r;
    r.damping *= Scalar(100);
  }
  throw std::runtime_error("least_squares_refit: normal equations not positive definite");
}

struct RefitCheck {
  double gradient_norm = 0;  // ||P^T (t - P w)||
  double bound = 0;          // eps ||w|| + tol * scale
  bool ok = true;
};

/// Orthogonality of the refit residual to the patch column space.
/// scale = ||P||_F (||t||_F + ||P||_F ||w||_F).
template <typename DerivedP, typename DerivedT, typename DerivedW>
RefitCheck refit_orthogonality(const Eigen::MatrixBase<DerivedP>& patches,
                               const Eigen::MatrixBase<DerivedT>& targets,
                               const Eigen::MatrixBase<DerivedW>& weights, double damping,
                               double tol = 1e-8) {
  RefitCheck c;
  const double pn = patches.norm();
  c.gradient_norm = (patches.transpose() * (targets - patches * weights)).norm();
  const double scale = pn * (targets.norm() + pn * weights.norm());
  c.bound = damping * weights.norm() + tol * scale;
  c.ok = c.gradient_norm <= c.bound;
  return c;
}

/// Refit reshaped into conv filters [c_out, kept, kh, kw]. `patches` columns
/// are laid out (kept channel, ky, kx); `targets` has one column per output channel.
template <typename DerivedP, typename DerivedT>
Tensor refit_conv_filters(const Eigen::MatrixBase<DerivedP>& patches,
                          const Eigen::MatrixBase<DerivedT>& targets, std::size_t kept,
                          std::size_t kh, std::size_t kw, double damping,
                          double* damping_used = nullptr) {
  if (static_cast<std::size_t>(patches.cols()) != kept * kh * kw) {
    throw std::invalid_argument("refit_conv_filters: patch width does not match kept*kh*kw");
  }
  const auto r = least_squares_refit(patches, targets, damping);
  if (damping_used) *damping_used = r.damping;
  Tensor w({static_cast<std::size_t>(targets.cols()), kept, kh, kw});
  w.matrix() = r.weights.transpose();
  return w;
}

}  // namespace cpli
