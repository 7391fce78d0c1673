"""Optimal control variates: scalar coefficient, multi-dimensional lambda, combined estimator.

All empirical moments use the 1/N convention and are taken about the sample
mean, i.e. ``gram`` is the sample covariance of the control variates and
``cross`` their sample covariance with the target.  With exact moments the
control variates have zero mean and these coincide with ``E[T T^T]`` and
``E[m T]``.

Two independent routes solve for lambda: a Cholesky solve of the normal
equations (:func:`solve_lambda_direct`) and modified Gram-Schmidt followed by
per-direction scalar fits and back-substitution (:func:`solve_lambda_orthogonal`).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from . import estimators as est
from .errors import DegenerateControl, DimensionMismatch, LengthMismatch, SingularGram
from .exact import ValueTables, exact_expectation
from .mdp import SoftmaxPolicy, TabularMDP, TrajectoryBatch, sample_batch

log = logging.getLogger(__name__)

DEGENERATE_VAR = 1e-14
CONDITION_CAP = 1e12
PILOT_STREAM = 1


def optimal_alpha(m_samples: Sequence[float], t_samples: Sequence[float], tau: float = 0.0) -> tuple[float, float]:
    """Variance-minimising coefficient for ``m - alpha * (t - tau)`` and the m/t correlation.

    ``tau`` does not affect the coefficient; it only centres the control
    variate when the caller forms the adjusted samples (see :func:`adjust`).
    """
    m = np.asarray(m_samples, dtype=float)
    t = np.asarray(t_samples, dtype=float)
    if m.shape != t.shape or m.ndim != 1:
        raise LengthMismatch(f"m has shape {m.shape}, t has shape {t.shape}")
    if m.size < 2:
        raise LengthMismatch("need at least two samples")
    mc, tc = m - m.mean(), t - t.mean()
    var_t = float(tc @ tc) / t.size
    if var_t <= DEGENERATE_VAR:
        raise DegenerateControl(f"control variate has variance {var_t:.3g}")
    var_m = float(mc @ mc) / m.size
    cov = float(mc @ tc) / m.size
    alpha = cov / var_t
    rho = cov / math.sqrt(var_m * var_t) if var_m > 0 else 0.0
    return alpha, rho


def adjust(m_samples, t_samples, coef, tau=0.0) -> np.ndarray:
    """Adjusted samples ``m - coef . (t - tau)``; ``t`` may be ``(N,)`` or ``(N, d)``."""
    m = np.asarray(m_samples, dtype=float)
    t = np.asarray(t_samples, dtype=float)
    if t.ndim == 1:
        return m - float(coef) * (t - tau)
    return m - (t - tau) @ np.asarray(coef, dtype=float)


def population_variance(x) -> float:
    x = np.asarray(x, dtype=float)
    d = x - math.fsum(x) / x.size
    return math.fsum(d * d) / x.size


@dataclass(frozen=True, eq=False)
class CVSolution:
    lam: np.ndarray
    gram: np.ndarray
    cross: np.ndarray
    variance_before: float
    variance_after: float  # from the closed form Var(m) - cross^T gram^-1 cross
    variance_measured: float  # re-measured on the adjusted samples
    condition_number: float
    method: str = "direct"

    @property
    def d(self) -> int:
        return self.lam.size

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "lambda": self.lam.tolist(),
            "gram": self.gram.reshape(-1).tolist(),
            "cross": self.cross.tolist(),
            "variance_before": self.variance_before,
            "variance_after": self.variance_after,
            "variance_measured": self.variance_measured,
            "condition_number": self.condition_number,
        }


def _prepare(m_samples, t_samples) -> tuple[np.ndarray, np.ndarray]:
    m = np.asarray(m_samples, dtype=float)
    t = np.asarray(t_samples, dtype=float)
    if t.ndim == 1:
        t = t[:, None]
    if m.ndim != 1 or t.ndim != 2 or t.shape[0] != m.shape[0]:
        raise LengthMismatch(f"m has shape {m.shape}, control variates have shape {t.shape}")
    n, d = t.shape
    if d < 1 or n < d + 1:
        raise LengthMismatch(f"need at least d+1 = {d + 1} samples, got {n}")
    return m, t


def _moments(m: np.ndarray, t: np.ndarray):
    n = m.size
    mc = m - m.mean()
    tc = t - t.mean(axis=0)
    gram = tc.T @ tc / n
    gram = (gram + gram.T) / 2
    cross = tc.T @ mc / n
    return mc, tc, gram, cross, float(mc @ mc) / n


def _condition(gram: np.ndarray) -> float:
    eig = np.linalg.eigvalsh(gram)
    if eig[-1] <= 0 or eig[0] <= 0:
        return math.inf
    return float(eig[-1] / eig[0])


def solve_lambda_direct(m_samples, t_samples, condition_cap: float = CONDITION_CAP) -> CVSolution:
    """Optimal lambda from the normal equations ``gram @ lam = cross`` (Cholesky solve).

    Raises :class:`SingularGram` when the control variates are (numerically)
    linearly dependent, i.e. the Gram condition number exceeds ``condition_cap``.
    """
    m, t = _prepare(m_samples, t_samples)
    mc, tc, gram, cross, var_m = _moments(m, t)
    cond = _condition(gram)
    if not cond <= condition_cap:
        raise SingularGram(f"Gram matrix condition number {cond:.3g} exceeds {condition_cap:.3g}")
    try:
        lam = linalg.cho_solve(linalg.cho_factor(gram), cross)
    except linalg.LinAlgError as exc:
        raise SingularGram(str(exc)) from exc
    after = var_m - float(cross @ lam)
    return CVSolution(
        lam=lam,
        gram=gram,
        cross=cross,
        variance_before=var_m,
        variance_after=max(after, 0.0),
        variance_measured=population_variance(adjust(m, t, lam)),
        condition_number=cond,
        method="direct",
    )


def solve_lambda_orthogonal(m_samples, t_samples, pivot_tol: float = 1e-12) -> CVSolution:
    """Optimal lambda by modified Gram-Schmidt on the centred control variates.

    The columns are orthogonalised as ``tc = W @ R`` (``R`` unit upper
    triangular), each orthogonal direction gets its own scalar coefficient
    ``<m, W_k> / <W_k, W_k>``, and ``R @ lam = coefs`` maps back to the
    original basis.  The residual variance is accumulated from the decoupled
    directions, independently of the normal-equations formula.
    """
    m, t = _prepare(m_samples, t_samples)
    mc, tc, gram, cross, var_m = _moments(m, t)
    n, d = tc.shape
    W = tc.copy()
    R = np.eye(d)
    sq = np.empty(d)
    for k in range(d):
        ref = float(tc[:, k] @ tc[:, k]) / n
        for i in range(k):
            R[i, k] = float(W[:, i] @ W[:, k]) / n / sq[i]
            W[:, k] -= R[i, k] * W[:, i]
        sq[k] = float(W[:, k] @ W[:, k]) / n
        if ref <= 0 or sq[k] <= pivot_tol * ref:
            raise SingularGram(f"Gram-Schmidt pivot {k} collapsed (relative norm {sq[k] / ref if ref else 0:.3g})")
    coefs = (W.T @ mc / n) / sq
    lam = linalg.solve_triangular(R, coefs, unit_diagonal=True)
    after = var_m - math.fsum(coefs**2 * sq)
    return CVSolution(
        lam=lam,
        gram=gram,
        cross=cross,
        variance_before=var_m,
        variance_after=max(after, 0.0),
        variance_measured=population_variance(adjust(m, t, lam)),
        condition_number=_condition(gram),
        method="orthogonal",
    )


def residual_inner_products(m_samples, t_samples, lam) -> tuple[np.ndarray, float]:
    """Centred inner products of the residual ``m - lam . t`` with each control variate.

    Returns them together with the scale ``max_i ||m_c|| * ||t_c,i||`` they
    should be compared against.
    """
    m, t = _prepare(m_samples, t_samples)
    n = m.size
    r = adjust(m, t, lam)
    rc = r - r.mean()
    tc = t - t.mean(axis=0)
    mc = m - m.mean()
    inner = tc.T @ rc / n
    scale = math.sqrt(float(mc @ mc) / n) * np.sqrt((tc * tc).sum(axis=0) / n)
    return inner, float(scale.max())


# ---------------------------------------------------------------------------
# basis of zero-mean control variates and the combined estimator

BASIS_NAMES = ("const", "value", "advantage")


# a weight function maps a batch to (N, T) per-step weights w_t; the induced
# control variate is sum_t gamma**t * score(s_t, a_t) * w_t
WeightFn = Callable[[TrajectoryBatch], np.ndarray]


@dataclass(frozen=True, eq=False)
class CVBasis:
    """Ordered per-step weight functions, each inducing a zero-mean control variate
    ``sum_t gamma**t * score(s_t, a_t) * w_t``."""

    functions: tuple
    labels: tuple

    def __post_init__(self):
        if len(self.functions) < 1:
            raise ValueError("a basis needs at least one function")
        if len(self.functions) != len(self.labels):
            raise ValueError("functions and labels differ in length")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f"basis labels must be unique: {self.labels}")

    @classmethod
    def from_phis(cls, phis: Sequence[est.Phi], labels: Sequence[str]) -> "CVBasis":
        """Basis from state-action functions ``phi(t, s, a)``."""
        return cls(tuple(_phi_weights(f) for f in phis), tuple(labels))

    @property
    def d(self) -> int:
        return len(self.functions)

    def verify_zero_mean(self, mdp: TabularMDP, policy: SoftmaxPolicy, tol: float = 1e-10) -> np.ndarray:
        """Exact mean of every induced control variate; raises if any exceeds ``tol``."""
        means = np.stack(
            [
                exact_expectation(mdp, policy, lambda b, f=f: est.score_weighted_draws(b, policy, f(b)))
                for f in self.functions
            ]
        )
        worst = float(np.abs(means).max())
        if worst > tol:
            raise ValueError(f"basis control variates are not zero-mean (max |mean| {worst:.3g})")
        return means


def _phi_weights(phi: est.Phi) -> WeightFn:
    return lambda batch: est.phi_weights(phi, batch)


def phi_const(t, s, a):
    return 1.0


def phi_value(tables: ValueTables) -> est.Phi:
    def phi(t, s, a):
        return tables.v[t, s]

    return phi


def advantage_correction(tables: ValueTables) -> WeightFn:
    """Weights ``R_t - adv[t, s_t, a_t]``: REINFORCE minus this control variate is A-AC."""

    def weights(batch: TrajectoryBatch) -> np.ndarray:
        t = np.arange(batch.horizon)[None, :]
        return batch.returns - tables.adv[t, batch.states, batch.actions]

    return weights


def make_basis(
    spec: Sequence[str],
    tables: ValueTables,
    mdp: TabularMDP | None = None,
    policy: SoftmaxPolicy | None = None,
) -> CVBasis:
    """Build a basis from names in ``{const, value, advantage}``.

    ``const`` and ``value`` are the state functions 1 and ``v[t, s]``.
    ``advantage`` is the return-dependent correction of :func:`advantage_correction`;
    the bare advantage ``adv[t, s, a]`` cannot be used since its score-weighted
    sum has mean equal to the policy gradient, not zero.

    When ``mdp`` and ``policy`` are given the zero-mean property is verified
    by enumeration (skipped if the MDP is too large to enumerate).
    """
    builders = {
        "const": lambda: _phi_weights(phi_const),
        "value": lambda: _phi_weights(phi_value(tables)),
        "advantage": lambda: advantage_correction(tables),
    }
    unknown = [name for name in spec if name not in builders]
    if unknown:
        raise ValueError(f"unknown basis function(s) {unknown}; expected a subset of {list(BASIS_NAMES)}")
    basis = CVBasis(tuple(builders[name]() for name in spec), tuple(spec))
    if mdp is not None and policy is not None:
        from .exact import is_enumerable

        if is_enumerable(mdp):
            basis.verify_zero_mean(mdp, policy)
    return basis


def control_variate_features(batch: TrajectoryBatch, policy: SoftmaxPolicy, basis: CVBasis) -> np.ndarray:
    """``(N, D, d)`` array: control variate ``i`` for gradient coordinate ``j`` on each trajectory."""
    return np.stack([est.score_weighted_draws(batch, policy, f(batch)) for f in basis.functions], axis=-1)


def combined_draws(
    batch: TrajectoryBatch, policy: SoftmaxPolicy, basis: CVBasis, lam: np.ndarray
) -> np.ndarray:
    """REINFORCE draws with per-coordinate control variates removed: ``m_j - lam_j . T_j``."""
    lam = np.asarray(lam, dtype=float)
    D = policy.n_states * policy.n_actions
    if lam.shape != (D, basis.d):
        raise DimensionMismatch(f"lambda has shape {lam.shape}, expected {(D, basis.d)}")
    feats = control_variate_features(batch, policy, basis)
    return est.reinforce_draws(batch, policy) - np.einsum("ndk,dk->nd", feats, lam)


def combined_estimator_sample(traj, policy: SoftmaxPolicy, tables, basis: CVBasis, lam) -> np.ndarray:
    del tables  # the basis already closes over the tables it needs
    return combined_draws(TrajectoryBatch.of([traj]), policy, basis, lam)[0]


@dataclass(frozen=True, eq=False)
class CombinedFit:
    lam: np.ndarray  # (D, d)
    solutions: list = field(default_factory=list)  # CVSolution or None per coordinate
    degraded: list = field(default_factory=list)  # coordinates that fell back to lambda = 0
    n_pilot: int = 0


def fit_combined_from_batch(batch: TrajectoryBatch, policy: SoftmaxPolicy, basis: CVBasis) -> CombinedFit:
    m = est.reinforce_draws(batch, policy)
    feats = control_variate_features(batch, policy, basis)
    D = m.shape[1]
    lam = np.zeros((D, basis.d))
    solutions, degraded = [], []
    for j in range(D):
        try:
            sol = solve_lambda_direct(m[:, j], feats[:, j, :])
        except SingularGram as exc:
            log.warning("coordinate %d: singular Gram matrix, using lambda = 0 (%s)", j, exc.message)
            solutions.append(None)
            degraded.append(j)
            continue
        lam[j] = sol.lam
        solutions.append(sol)
    return CombinedFit(lam=lam, solutions=solutions, degraded=degraded, n_pilot=len(batch))


def fit_combined(
    mdp: TabularMDP,
    policy: SoftmaxPolicy,
    tables: ValueTables,
    basis: CVBasis,
    n_pilot: int,
    seed: int,
    stream: int = PILOT_STREAM,
) -> CombinedFit:
    """Fit per-coordinate lambda on ``n_pilot`` trajectories drawn from the pilot stream."""
    del tables
    if n_pilot < 10 * basis.d:
        raise ValueError(f"n_pilot must be at least 10*d = {10 * basis.d}, got {n_pilot}")
    return fit_combined_from_batch(sample_batch(mdp, policy, seed, n_pilot, stream=stream), policy, basis)
