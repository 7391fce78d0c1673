"""Seeded Monte-Carlo experiments over the estimators and the statistical checks.

All estimators in one experiment are evaluated on the same trajectory set
(stream 0 of ``master_seed``); the COMBINED estimator fits its coefficients on
the disjoint pilot stream first.  Whenever the MDP is small enough to
enumerate, each check is also run in exact mode and a check passes only if
both modes pass.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import control_variates as cv
from . import estimators as est
from .config import ExperimentConfig
from .errors import BudgetExceeded, MissingEstimator, OracleUnavailable
from .estimators import EstimatorId
from .exact import (
    ExactGradient,
    ValueTables,
    enumeration_budget,
    exact_moments,
    exact_policy_gradient,
    exact_values,
    is_enumerable,
    trajectory_space_size,
)
from .mdp import SoftmaxPolicy, TabularMDP, load_mdp, sample_batch

EVAL_STREAM = 0
THETA_STREAM = 2
EXACT_TOL = 1e-10
CSV_COLUMNS = ("estimator", "coord", "mean", "variance", "z")


def _fsum_columns(x: np.ndarray) -> np.ndarray:
    return np.array([math.fsum(x[:, j]) for j in range(x.shape[1])])


@dataclass(frozen=True, eq=False)
class EstimatorStats:
    estimator: EstimatorId
    mean: np.ndarray
    per_coord_variance: np.ndarray
    total_variance: float
    n: int
    max_abs_z: float | None = None

    @classmethod
    def from_draws(cls, estimator, draws: np.ndarray, oracle: ExactGradient | None = None) -> "EstimatorStats":
        """Moments with compensated summation in a fixed per-coordinate order (1/N convention)."""
        n = draws.shape[0]
        mean = _fsum_columns(draws) / n
        dev = draws - mean
        var = _fsum_columns(dev * dev) / n
        stats = cls(EstimatorId.parse(str(estimator)), mean, var, math.fsum(var), n)
        if oracle is not None:
            z = z_scores(stats, oracle)
            return cls(stats.estimator, mean, var, stats.total_variance, n, float(np.max(np.abs(z))))
        return stats

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator.value,
            "n": self.n,
            "mean": self.mean.tolist(),
            "per_coord_variance": self.per_coord_variance.tolist(),
            "total_variance": self.total_variance,
            "max_abs_z": _finite_or_none(self.max_abs_z),
        }


def _finite_or_none(x):
    if x is None or not math.isfinite(x):
        return None if x is None else repr(x)
    return x


def z_scores(stats: EstimatorStats, oracle: ExactGradient, tol: float = EXACT_TOL) -> np.ndarray:
    """Per-coordinate z of the sample mean against the exact gradient.

    Zero-variance coordinates get ``z = 0`` on exact agreement (within ``tol``)
    and ``z = inf`` otherwise.
    """
    diff = stats.mean - oracle.grad
    z = np.zeros_like(diff)
    pos = stats.per_coord_variance > 0
    z[pos] = diff[pos] / np.sqrt(stats.per_coord_variance[pos] / stats.n)
    z[~pos] = np.where(np.abs(diff[~pos]) <= tol, 0.0, np.inf)
    return z


@dataclass
class CheckResult:
    name: str
    passed: bool
    mode: str  # "statistical", "exact" or "both"
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "mode": self.mode, "passed": self.passed, "details": self.details}


def unbiasedness_check(
    stats: EstimatorStats, oracle: ExactGradient | None, threshold: float = 4.0, min_n: int = 1000
) -> CheckResult:
    """Pass iff every per-coordinate ``|z| < threshold``."""
    if oracle is None:
        raise OracleUnavailable("exact gradient unavailable (MDP exceeds the enumeration budget)")
    if stats.n < min_n:
        raise ValueError(f"unbiasedness check needs n >= {min_n}, got {stats.n}")
    z = z_scores(stats, oracle)
    max_z = float(np.max(np.abs(z)))
    return CheckResult(
        f"unbiased[{stats.estimator.value}]",
        bool(max_z < threshold),
        "statistical",
        {"z": [_finite_or_none(float(x)) for x in z], "max_abs_z": _finite_or_none(max_z), "threshold": threshold},
    )


def exact_unbiasedness_check(estimator, exact_mean: np.ndarray, oracle: ExactGradient, tol: float = EXACT_TOL) -> CheckResult:
    err = float(np.max(np.abs(exact_mean - oracle.grad)))
    return CheckResult(
        f"unbiased[{EstimatorId.parse(str(estimator)).value}]", err <= tol, "exact", {"max_abs_error": err, "tol": tol}
    )


ORDERED_PAIRS = ((EstimatorId.AAC, EstimatorId.TDAC), (EstimatorId.QAC, EstimatorId.REINFORCE))
REPORTED_PAIRS = ((EstimatorId.QAC, EstimatorId.AAC), (EstimatorId.TDAC, EstimatorId.REINFORCE))


def variance_ordering_check(
    total_variances: Mapping, margin: float = 0.02, atol: float = 0.0, mode: str = "statistical"
) -> CheckResult:
    """Var(AAC) <= Var(TDAC) and Var(QAC) <= Var(REINFORCE), each up to ``(1 + margin)`` and ``atol``.

    ``total_variances`` maps estimator ids (or names) to trace-of-covariance
    values, or holds :class:`EstimatorStats`.  The QAC/AAC and TDAC/REINFORCE
    pairs are reported without any assertion.
    """
    tv = {}
    for key, value in (total_variances.items() if isinstance(total_variances, Mapping) else ((s.estimator, s) for s in total_variances)):
        tv[EstimatorId.parse(str(key))] = value.total_variance if isinstance(value, EstimatorStats) else float(value)
    missing = sorted({e.value for pair in ORDERED_PAIRS for e in pair} - {e.value for e in tv})
    if missing:
        raise MissingEstimator(f"ordering check needs {', '.join(missing)}")
    orderings, ok = [], True
    for lo, hi in ORDERED_PAIRS:
        holds = bool(tv[lo] <= tv[hi] * (1 + margin) + atol)
        ok &= holds
        orderings.append({"lhs": lo.value, "rhs": hi.value, "lhs_variance": tv[lo], "rhs_variance": tv[hi], "holds": holds})
    unasserted = [
        {"a": a.value, "b": b.value, "a_variance": tv[a], "b_variance": tv[b]}
        for a, b in REPORTED_PAIRS
        if a in tv and b in tv
    ]
    return CheckResult("variance_ordering", ok, mode, {"margin": margin, "atol": atol, "orderings": orderings, "unasserted": unasserted})


def null_term_check(
    mdp: TabularMDP,
    policy: SoftmaxPolicy,
    phi_spec: Sequence[str] = ("const", "value"),
    tables: ValueTables | None = None,
    tol: float = EXACT_TOL,
    budget: int | None = None,
) -> CheckResult:
    """Exact mean of the score-weighted sum for each named weight function is zero."""
    from .exact import exact_expectation

    if tables is None:
        tables = exact_values(mdp, policy)
    basis = cv.make_basis(list(phi_spec), tables)
    means = {}
    for label, weights in zip(basis.labels, basis.functions):
        means[label] = exact_expectation(
            mdp, policy, lambda b, f=weights: est.score_weighted_draws(b, policy, f(b)), budget
        )
    worst = max(float(np.max(np.abs(m))) for m in means.values())
    return CheckResult(
        "null_term", worst <= tol, "exact", {"means": {k: v.tolist() for k, v in means.items()}, "max_abs": worst, "tol": tol}
    )


def projection_residual_check(samples_m, samples_T, lam=None, rtol: float = 1e-8) -> CheckResult:
    """Residual ``m - lam . T`` is orthogonal (centred inner product) to every control variate.

    Fits lambda with the direct solver when not given.  Inner products are
    compared against ``rtol * ||m|| * ||T_i||`` (centred norms).
    """
    if lam is None:
        lam = cv.solve_lambda_direct(samples_m, samples_T).lam
    inner, scale = cv.residual_inner_products(samples_m, samples_T, lam)
    worst = float(np.max(np.abs(inner)))
    return CheckResult(
        "projection_residual",
        worst <= rtol * scale,
        "statistical",
        {"inner_products": inner.tolist(), "scale": scale, "rtol": rtol, "lambda": np.atleast_1d(lam).tolist()},
    )


# ---------------------------------------------------------------------------
# experiment


def initial_theta(config: ExperimentConfig, mdp: TabularMDP) -> np.ndarray:
    scale = config.theta_scale
    if scale == 0.0:
        return np.zeros(mdp.dim)
    gen = np.random.Generator(np.random.Philox(key=[config.master_seed, THETA_STREAM]))
    return scale * gen.standard_normal(mdp.dim)


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


@dataclass(eq=False)
class ExperimentResult:
    config: ExperimentConfig
    mdp: TabularMDP
    policy: SoftmaxPolicy
    tables: ValueTables
    oracle: ExactGradient | None
    stats: list[EstimatorStats]
    exact: dict = field(default_factory=dict)  # EstimatorId -> (mean, cov)
    combined_fit: cv.CombinedFit | None = None
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def stats_for(self, estimator) -> EstimatorStats:
        key = EstimatorId.parse(str(estimator))
        for s in self.stats:
            if s.estimator is key:
                return s
        raise MissingEstimator(f"no statistics for {key.value}")

    def failed_checks(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def to_report(self) -> dict:
        exact_block = None
        if self.oracle is not None:
            exact_block = {
                "gradient": self.oracle.grad.tolist(),
                "j": self.oracle.j,
                "moments": {
                    e.value: {"mean": m.tolist(), "per_coord_variance": np.diag(c).tolist(), "total_variance": float(np.trace(c))}
                    for e, (m, c) in self.exact.items()
                },
            }
        combined = None
        if self.combined_fit is not None:
            combined = {
                "basis": list(self.config.basis_spec),
                "n_pilot": self.combined_fit.n_pilot,
                "degraded": list(self.combined_fit.degraded),
                "solutions": [
                    {"coord": j, **(sol.to_dict() if sol is not None else {"lambda": None})}
                    for j, sol in enumerate(self.combined_fit.solutions)
                ],
            }
        return {
            "config": self.config.to_dict(),
            "config_hash": config_hash(self.config),
            "mdp": {
                "n_states": self.mdp.n_states,
                "n_actions": self.mdp.n_actions,
                "gamma": self.mdp.gamma,
                "horizon": self.mdp.horizon,
                "enumerable": self.oracle is not None,
            },
            "theta": self.policy.theta.tolist(),
            "value_tables": self.tables.to_dict(),
            "exact": exact_block,
            "estimators": [s.to_dict() for s in self.stats],
            "combined": combined,
            "checks": [c.to_dict() for c in self.checks],
            "passed": self.passed,
        }

    def csv_rows(self) -> list[tuple]:
        rows = []
        for s in self.stats:
            z = z_scores(s, self.oracle) if self.oracle is not None else None
            for j in range(s.mean.size):
                rows.append(
                    (s.estimator.value, j, repr(float(s.mean[j])), repr(float(s.per_coord_variance[j])),
                     "" if z is None else repr(float(z[j])))
                )
        return rows


def _merge(stat: CheckResult, exact: CheckResult | None) -> CheckResult:
    """Exact-mode escalation: a check passes only if every available mode passes."""
    if exact is None:
        return stat
    return CheckResult(
        stat.name, stat.passed and exact.passed, "both", {"statistical": stat.to_dict()["details"], "exact": exact.to_dict()["details"],
                                                         "statistical_passed": stat.passed, "exact_passed": exact.passed},
    )


def load_experiment_mdp(config: ExperimentConfig) -> TabularMDP:
    mdp = load_mdp(config.mdp_path, config.base_dir)
    if config.horizon is not None and config.horizon != mdp.horizon:
        mdp = mdp.with_horizon(config.horizon)
    return mdp


def run_experiment(config: ExperimentConfig, checks: Iterable[str] = ("unbiased", "ordering", "null", "dominance")) -> ExperimentResult:
    """Sample, compute statistics for every configured estimator and run the requested checks.

    ``checks`` selects among ``unbiased``, ``ordering``, ``null`` and
    ``dominance``; checks whose estimators are not configured are skipped.
    With ``config.exact`` the MDP must be enumerable (else :class:`BudgetExceeded`).
    """
    checks = set(checks)
    mdp = load_experiment_mdp(config)
    policy = SoftmaxPolicy.for_mdp(mdp, initial_theta(config, mdp))
    tables = exact_values(mdp, policy)
    enumerable = is_enumerable(mdp)
    if config.exact and not enumerable:
        raise BudgetExceeded(
            f"{trajectory_space_size(mdp)} trajectories exceed enumeration budget {enumeration_budget()}"
        )
    oracle = exact_policy_gradient(mdp, policy) if enumerable else None

    ids = config.estimator_ids
    batch = sample_batch(mdp, policy, config.master_seed, config.n_samples, stream=EVAL_STREAM)
    draw_fns = {}
    fit = None
    for e in ids:
        if e is EstimatorId.COMBINED:
            basis = cv.make_basis(config.basis_spec, tables, mdp, policy)
            fit = cv.fit_combined(mdp, policy, tables, basis, config.n_pilot, config.master_seed)
            draw_fns[e] = lambda b, basis=basis, lam=fit.lam: cv.combined_draws(b, policy, basis, lam)
        else:
            draw_fns[e] = lambda b, e=e: est.estimator_draws(e, b, policy, tables)

    stats = [EstimatorStats.from_draws(e, draw_fns[e](batch), oracle) for e in ids]
    exact = {e: exact_moments(mdp, policy, draw_fns[e]) for e in ids} if enumerable else {}
    result = ExperimentResult(config, mdp, policy, tables, oracle, stats, exact, fit)

    if "unbiased" in checks and oracle is not None:
        for s in stats:
            stat = unbiasedness_check(s, oracle, config.z_threshold)
            result.checks.append(_merge(stat, exact_unbiasedness_check(s.estimator, exact[s.estimator][0], oracle)))
    have = set(ids)
    if "ordering" in checks and {e for pair in ORDERED_PAIRS for e in pair} <= have:
        stat = variance_ordering_check(stats, margin=config.margin)
        ex = None
        if enumerable:
            ex = variance_ordering_check(
                {e: float(np.trace(exact[e][1])) for e in ids}, margin=EXACT_TOL, atol=EXACT_TOL, mode="exact"
            )
        result.checks.append(_merge(stat, ex))
    if "null" in checks and enumerable:
        result.checks.append(null_term_check(mdp, policy, ("const", "value"), tables))
    if "dominance" in checks and {EstimatorId.COMBINED, EstimatorId.AAC} <= have:
        tc, ta = result.stats_for(EstimatorId.COMBINED).total_variance, result.stats_for(EstimatorId.AAC).total_variance
        result.checks.append(
            CheckResult(
                "combined_dominance",
                # the absolute slack absorbs round-off when AAC is exactly zero-variance
                bool(tc <= ta * (1 + config.margin) + EXACT_TOL),
                "statistical",
                {"combined_variance": tc, "aac_variance": ta, "margin": config.margin, "atol": EXACT_TOL},
            )
        )
    return result


def exact_only_result(config: ExperimentConfig, checks: Iterable[str]) -> ExperimentResult:
    """Exact-mode checks from enumeration alone (no sampling); requires an enumerable MDP."""
    checks = set(checks)
    mdp = load_experiment_mdp(config)
    if not is_enumerable(mdp):
        raise BudgetExceeded(
            f"{trajectory_space_size(mdp)} trajectories exceed enumeration budget {enumeration_budget()}"
        )
    policy = SoftmaxPolicy.for_mdp(mdp, initial_theta(config, mdp))
    tables = exact_values(mdp, policy)
    oracle = exact_policy_gradient(mdp, policy)
    ids = [e for e in config.estimator_ids if e is not EstimatorId.COMBINED]
    exact = {e: exact_moments(mdp, policy, lambda b, e=e: est.estimator_draws(e, b, policy, tables)) for e in ids}
    result = ExperimentResult(config, mdp, policy, tables, oracle, [], exact)
    if "unbiased" in checks:
        result.checks += [exact_unbiasedness_check(e, exact[e][0], oracle) for e in ids]
    if "ordering" in checks:
        result.checks.append(
            variance_ordering_check({e: float(np.trace(c)) for e, (_, c) in exact.items()}, EXACT_TOL, EXACT_TOL, "exact")
        )
    if "null" in checks:
        result.checks.append(null_term_check(mdp, policy, ("const", "value"), tables))
    return result


def render_csv(result: ExperimentResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    writer.writerows(result.csv_rows())
    return buf.getvalue()


def render_report(result: ExperimentResult) -> str:
    return json.dumps(result.to_report(), indent=2, sort_keys=False, allow_nan=False) + "\n"


def write_reports(result: ExperimentResult, out_dir: str | Path, prefix: str = "report") -> tuple[Path, Path]:
    """Write ``<prefix>-<hash>.json`` and ``<prefix>-<hash>.csv`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = config_hash(result.config)
    report_path = out / f"{prefix}-{h}.json"
    csv_path = out / f"{prefix}-{h}.csv"
    report_path.write_text(render_report(result), encoding="utf-8")
    csv_path.write_text(render_csv(result), encoding="utf-8")
    return report_path, csv_path
