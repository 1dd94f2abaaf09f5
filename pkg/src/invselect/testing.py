"""Discrepancy measures, inverse reference intervals and thresholded decisions.

For each model ``k`` the null hypothesis says the observed covariates look
like a draw from the model's inverse cross-validation posteriors.  Its
posterior probability is ``P(zeta = k) * coverage_k`` and the alternative's
is ``v_k = 1 - P(zeta = k) * coverage_k``.  A decision rejects the null of
model ``k`` iff ``v_k > beta``.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .models import Dataset, ModelSpec
from .streams import InvalidParameterError, empirical_quantile

__all__ = [
    "DiscrepancyReport", "DecisionTable", "discrepancy_t1", "discrepancy_t2", "discrepancy_t3",
    "discrepancy_kinds", "build_discrepancy_report", "compute_v", "decide",
    "conditional_error_rates", "beta_sweep", "default_beta_grid", "build_decision_table",
]


def default_beta_grid() -> np.ndarray:
    return np.round(np.arange(1, 100) / 100.0, 2)


def _check_lengths(*arrs):
    n = len(arrs[0])
    if any(len(a) != n for a in arrs):
        raise InvalidParameterError("values, means and variances must have equal length")


def _standardized(values, means, variances, c):
    if not c > 0:
        raise InvalidParameterError("c must be positive")
    values = np.asarray(values, dtype=float)
    means = np.asarray(means, dtype=float)
    variances = np.asarray(variances, dtype=float)
    if values.shape[-1] != means.shape[-1] or means.shape != variances.shape:
        raise InvalidParameterError("values, means and variances must have equal length")
    return values - means, variances + c


def discrepancy_t1(values, means, variances, c: float = 1.0):
    """Mean absolute standardized deviation; ``values`` may carry leading draw axes."""
    dev, scale = _standardized(values, means, variances, c)
    return np.mean(np.abs(dev) / np.sqrt(scale), axis=-1)


def discrepancy_t2(values, means, variances, c: float = 1.0):
    """Mean squared standardized deviation; ``values`` may carry leading draw axes."""
    dev, scale = _standardized(values, means, variances, c)
    return np.mean(dev ** 2 / scale, axis=-1)


def discrepancy_t3(value_pairs, mean_pairs, cov_matrices, c: float = 1.0):
    """Mean quadratic form ``(v - E)' (Var + cI)^{-1} (v - E)`` over sites.

    ``value_pairs`` is ``(..., n, 2)``, ``mean_pairs`` ``(n, 2)`` and
    ``cov_matrices`` ``(n, 2, 2)``.
    """
    if not c > 0:
        raise InvalidParameterError("c must be positive")
    v = np.asarray(value_pairs, dtype=float)
    E = np.asarray(mean_pairs, dtype=float)
    S = np.asarray(cov_matrices, dtype=float)
    if v.shape[-2:] != E.shape or S.shape != E.shape[:1] + (2, 2):
        raise InvalidParameterError("pairs, means and covariances must agree in shape")
    if not np.allclose(S, np.swapaxes(S, -1, -2)) or np.any(np.linalg.eigvalsh(S) < -1e-10):
        raise InvalidParameterError("covariance matrices must be symmetric positive semi-definite")
    P = np.linalg.inv(S + c * np.eye(2))
    dev = v - E
    return np.mean(np.einsum("...ni,nij,...nj->...n", dev, P, dev), axis=-1)


def discrepancy_kinds(model: ModelSpec) -> tuple[str, str]:
    """Kinds used for the two decision columns (T3 in both for two-covariate models)."""
    return ("T3", "T3") if len(model.covariates) == 2 else ("T1", "T2")


@dataclass
class DiscrepancyReport:
    model: int
    kind: str
    c: float
    observed: float
    draws: np.ndarray
    interval: tuple[float, float]
    alpha_level: float
    coverage: float

    def to_dict(self, include_draws: bool = False) -> dict:
        d = {"model": self.model, "kind": self.kind, "c": self.c, "observed": self.observed,
             "interval": list(self.interval), "alpha_level": self.alpha_level,
             "coverage": self.coverage, "n_draws": int(len(self.draws))}
        if include_draws:
            d["draws"] = [float(x) for x in self.draws]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DiscrepancyReport":
        return cls(int(d["model"]), d["kind"], float(d["c"]), float(d["observed"]),
                   np.asarray(d.get("draws", []), dtype=float), tuple(d["interval"]),
                   float(d["alpha_level"]), float(d["coverage"]))


def interval_coverage(draws: np.ndarray, observed: float, alpha_level: float) -> tuple[tuple[float, float], float]:
    """Equal-tailed interval of ``draws`` and the fraction of ``draws - observed`` inside it."""
    draws = np.asarray(draws, dtype=float)
    lo = empirical_quantile(draws, alpha_level / 2)
    hi = empirical_quantile(draws, 1 - alpha_level / 2)
    diff = draws - observed
    coverage = float(np.mean((diff >= lo) & (diff <= hi)))
    return (lo, hi), coverage


def build_discrepancy_report(model: ModelSpec, data: Dataset, cv_posteriors: Sequence, kind: str,
                             c: float = 1.0, alpha_level: float = 0.05, stream=None) -> DiscrepancyReport:
    """Reference distribution of ``T(X~)`` and the coverage of the observed ``T(X)``.

    Joint draws of ``X~`` pair the j-th retained draw of every site.
    ``stream`` is accepted for interface symmetry; the pairing is fixed.
    """
    kind = kind.upper()
    two = len(model.covariates) == 2
    if (kind == "T3") != two:
        raise InvalidParameterError(f"{kind} does not apply to {model.name}")
    if not 0 < alpha_level < 1:
        raise InvalidParameterError("alpha_level must lie in (0, 1)")
    lengths = {len(p.samples) for p in cv_posteriors}
    if len(lengths) != 1:
        raise RuntimeError("CV posterior sample lengths differ across sites")
    if len(cv_posteriors) != data.n:
        raise InvalidParameterError("need one CV posterior per site")
    S = np.stack([np.asarray(p.samples, dtype=float) for p in cv_posteriors], axis=1)  # (L, n[, 2])
    means = np.array([p.mean for p in cv_posteriors], dtype=float)
    if two:
        covs = np.array([p.variance for p in cv_posteriors], dtype=float)
        observed_x = data.covariate_matrix(model)
        draws = discrepancy_t3(S, means, covs, c)
        observed = float(discrepancy_t3(observed_x, means, covs, c))
    else:
        var = np.array([p.variance for p in cv_posteriors], dtype=float)
        observed_x = data.covariate_matrix(model)[:, 0]
        fn = discrepancy_t1 if kind == "T1" else discrepancy_t2
        if kind not in ("T1", "T2"):
            raise InvalidParameterError(f"unknown discrepancy kind {kind}")
        draws = fn(S, means, var, c)
        observed = float(fn(observed_x, means, var, c))
    interval, coverage = interval_coverage(draws, observed, alpha_level)
    return DiscrepancyReport(model.id, kind, float(c), observed, draws, interval, alpha_level, coverage)


def compute_v(model_posterior_prob: float, coverage: float) -> float:
    """Posterior probability of the alternative: ``1 - P(zeta=k) * coverage``."""
    for val in (model_posterior_prob, coverage):
        if not 0.0 <= val <= 1.0:
            raise InvalidParameterError("probabilities must lie in [0, 1]")
    return 1.0 - model_posterior_prob * coverage


def decide(v, beta: float) -> np.ndarray:
    """``d_k = 1`` (reject the null of model k) iff ``v_k > beta``."""
    vals = np.asarray(list(v.values()) if isinstance(v, Mapping) else v, dtype=float)
    return (vals > beta).astype(np.int64)


def conditional_error_rates(d, v) -> tuple[float, float]:
    """Conditional FDR and FNR of decision ``d`` given alternative probabilities ``v``."""
    d = np.asarray(d, dtype=float)
    vals = np.asarray(list(v.values()) if isinstance(v, Mapping) else v, dtype=float)
    if d.shape != vals.shape:
        raise InvalidParameterError("decision and v lengths differ")
    cfdr = float((d * (1 - vals)).sum() / max(d.sum(), 1.0))
    cfnr = float(((1 - d) * vals).sum() / max((1 - d).sum(), 1.0))
    return cfdr, cfnr


@dataclass
class Sweep:
    v: dict[int, float]
    decisions: np.ndarray  # (G, K)
    cfdr: np.ndarray
    cfnr: np.ndarray
    change_points: list[float] = field(default_factory=list)


def beta_sweep(v: Mapping[int, float], grid: Sequence[float] | None = None) -> Sweep:
    grid = default_beta_grid() if grid is None else np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0) or np.any((grid <= 0) | (grid >= 1)):
        raise InvalidParameterError("beta grid must be increasing within (0, 1)")
    dec = np.array([decide(v, b) for b in grid])
    rates = np.array([conditional_error_rates(d, v) for d in dec]).reshape(len(grid), 2)
    changes = [float(grid[g]) for g in range(1, len(grid)) if np.any(dec[g] != dec[g - 1])]
    return Sweep(dict(v), dec, rates[:, 0], rates[:, 1], changes)


@dataclass
class DecisionTable:
    """Per-column sweeps (``t1``, ``t2``) over a shared beta grid."""
    beta_grid: np.ndarray
    model_ids: list[int]
    sweeps: dict[str, Sweep]

    @property
    def v(self) -> dict[str, dict[int, float]]:
        return {col: s.v for col, s in self.sweeps.items()}

    def accepted(self, col: str, g: int) -> list[int]:
        """Model ids whose null is accepted at grid index ``g``."""
        return [k for k, d in zip(self.model_ids, self.sweeps[col].decisions[g]) if d == 0]

    def acceptance_order(self, col: str) -> list[int]:
        """Model ids in the order their nulls become accepted as beta rises (ties by id)."""
        v = self.sweeps[col].v
        return sorted(self.model_ids, key=lambda k: (v[k], k))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["beta", "cfdr_t1", "cfnr_t1", "cfdr_t2", "cfnr_t2"])
        s1, s2 = self.sweeps["t1"], self.sweeps["t2"]
        for g, b in enumerate(self.beta_grid):
            w.writerow([f"{b:.2f}", f"{s1.cfdr[g]:.10f}", f"{s1.cfnr[g]:.10f}",
                        f"{s2.cfdr[g]:.10f}", f"{s2.cfnr[g]:.10f}"])
        return buf.getvalue()

    def to_dict(self) -> dict:
        out = {"beta_grid": [float(b) for b in self.beta_grid], "model_ids": self.model_ids}
        for col, s in self.sweeps.items():
            out[col] = {
                "v": {str(k): s.v[k] for k in self.model_ids},
                "change_points": s.change_points,
                "decisions": s.decisions.tolist(),
            }
        return out


def build_decision_table(model_posterior: Mapping[int, float], coverage: Mapping[str, Mapping[int, float]],
                         grid: Sequence[float] | None = None) -> DecisionTable:
    """Sweep beta for both decision columns.

    ``coverage`` maps ``"t1"``/``"t2"`` to per-model coverage probabilities.
    """
    grid = default_beta_grid() if grid is None else np.asarray(grid, dtype=float)
    ids = sorted(model_posterior)
    sweeps = {}
    for col in ("t1", "t2"):
        v = {k: compute_v(min(max(model_posterior[k], 0.0), 1.0), coverage[col][k]) for k in ids}
        sweeps[col] = beta_sweep(v, grid)
    return DecisionTable(grid, ids, sweeps)
