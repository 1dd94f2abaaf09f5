"""Competing inverse regression models.

Each model is a count regression (Poisson with log link, or geometric with
logit/probit link) whose linear predictor is either linear in the covariates
or a Gaussian process with a linear mean.  Held-out covariates get a uniform
prior on the set of covariate values whose implied mean response lies in
``[ybar - c1*s/sqrt(m), ybar + c2*s/sqrt(m)]``.

The geometric mean response is ``(1 - p)/p``.  With ``logit(p) = lp`` that
mean is ``exp(-lp)``; with ``p = Phi(lp)`` it is ``1/Phi(lp) - 1``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np
from scipy import linalg, special

from .streams import InvalidParameterError, std_normal_cdf, std_normal_inverse_cdf

log = logging.getLogger(__name__)

__all__ = [
    "Family", "Link", "RegressionForm", "CovariateSet",
    "ModelSpec", "ParamVector", "Dataset",
    "DegenerateCoefficientError", "PriorInterval",
    "mean_response", "log_likelihood", "log_param_prior", "gp_cov_matrix",
    "x_prior_interval", "log_x_prior_density",
    "InverseModel", "ThetaDraws",
    "default_roster",
]

COEF_TOL = 1e-10
GP_JITTER = 1e-8
DEFAULT_OMEGA_BOUNDS = (-10.0, 10.0)


class Family(str, Enum):
    POISSON = "poisson"
    GEOMETRIC = "geometric"


class Link(str, Enum):
    LOG = "log"
    LOGIT = "logit"
    PROBIT = "probit"


class RegressionForm(str, Enum):
    LINEAR = "linear"
    GP = "gp"


class CovariateSet(str, Enum):
    X = "x"
    Z = "z"
    XZ = "xz"

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.value)


_ALLOWED_LINKS = {
    Family.POISSON: {Link.LOG},
    Family.GEOMETRIC: {Link.LOGIT, Link.PROBIT},
}


class DegenerateCoefficientError(ValueError):
    """The coefficient of a held-out covariate is numerically zero."""


@dataclass(frozen=True)
class ModelSpec:
    id: int
    family: Family
    link: Link
    regression_form: RegressionForm = RegressionForm.LINEAR
    covariate_set: CovariateSet = CovariateSet.X

    def __post_init__(self):
        for name, enum in (("family", Family), ("link", Link),
                           ("regression_form", RegressionForm),
                           ("covariate_set", CovariateSet)):
            object.__setattr__(self, name, enum(getattr(self, name)))
        if self.link not in _ALLOWED_LINKS[self.family]:
            raise InvalidParameterError(
                f"{self.family.value} regression does not pair with the {self.link.value} link")

    @property
    def is_gp(self) -> bool:
        return self.regression_form is RegressionForm.GP

    @property
    def covariates(self) -> tuple[str, ...]:
        return self.covariate_set.names

    @property
    def name(self) -> str:
        return (f"{self.family.value}-{self.link.value}-"
                f"{self.regression_form.value}-{self.covariate_set.value}")

    def to_dict(self) -> dict:
        return {"id": self.id, "family": self.family.value, "link": self.link.value,
                "regression_form": self.regression_form.value,
                "covariate_set": self.covariate_set.value}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(id=int(d["id"]), family=d["family"], link=d["link"],
                   regression_form=d.get("regression_form", "linear"),
                   covariate_set=d.get("covariate_set", "x"))


def default_roster(scenario: str = "single_covariate", *, linear_only: bool = False) -> list[ModelSpec]:
    """The competing models of the two simulation studies, true model first."""
    combos = [(Family.POISSON, Link.LOG), (Family.GEOMETRIC, Link.LOGIT),
              (Family.GEOMETRIC, Link.PROBIT)]
    forms = [RegressionForm.LINEAR] if linear_only else [RegressionForm.LINEAR, RegressionForm.GP]
    if scenario == "single_covariate":
        cov_sets = [CovariateSet.X]
    elif scenario == "two_covariate":
        cov_sets = [CovariateSet.XZ, CovariateSet.X, CovariateSet.Z]
    else:
        raise InvalidParameterError(f"unknown scenario {scenario!r}")
    roster = []
    for cs in cov_sets:
        for fam, link in combos:
            for form in forms:
                roster.append(ModelSpec(len(roster) + 1, fam, link, form, cs))
    return roster


@dataclass
class ParamVector:
    """Parameters of one model: intercept, slopes, GP log-variance and latent values."""

    alpha: float
    beta: float | None = None
    gamma: float | None = None
    omega: float | None = None
    eta: np.ndarray | None = None

    def coefs(self, model: ModelSpec) -> np.ndarray:
        out = []
        for name in model.covariates:
            val = self.beta if name == "x" else self.gamma
            if val is None:
                raise InvalidParameterError(f"model {model.name} needs a coefficient for {name}")
            out.append(float(val))
        return np.array(out)

    def check(self, model: ModelSpec, n: int | None = None) -> None:
        cs = model.covariates
        if ("x" in cs) != (self.beta is not None) or ("z" in cs) != (self.gamma is not None):
            raise InvalidParameterError(f"coefficient set does not match {model.name}")
        if model.is_gp != (self.omega is not None and self.eta is not None):
            raise InvalidParameterError(f"GP parameters do not match {model.name}")
        if model.is_gp and n is not None and len(self.eta) != n:
            raise InvalidParameterError(f"eta has length {len(self.eta)}, expected {n}")


@dataclass
class Dataset:
    """Covariates and an ``n x m`` table of replicated counts (row = site)."""

    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray | None = None
    ybar: np.ndarray = field(init=False, repr=False)
    s: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.Y = np.asarray(self.Y)
        if self.Z is not None:
            self.Z = np.asarray(self.Z, dtype=float)
        if self.Y.ndim != 2 or self.Y.shape[0] != self.X.shape[0]:
            raise InvalidParameterError("Y must be an n x m table matching X")
        if np.any(self.Y < 0) or not np.all(np.equal(np.mod(self.Y, 1), 0)):
            raise InvalidParameterError("Y must hold nonnegative integer counts")
        self.Y = self.Y.astype(np.int64)
        if self.Z is not None and self.Z.shape != self.X.shape:
            raise InvalidParameterError("Z must have the same length as X")
        if self.n < 2 or self.m < 2:
            raise InvalidParameterError("need n >= 2 sites and m >= 2 replicates")
        self.ybar = self.Y.mean(axis=1)
        self.s = self.Y.std(axis=1, ddof=1)

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def m(self) -> int:
        return self.Y.shape[1]

    def covariate_matrix(self, model: ModelSpec) -> np.ndarray:
        cols = []
        for name in model.covariates:
            if name == "x":
                cols.append(self.X)
            else:
                if self.Z is None:
                    raise InvalidParameterError(f"model {model.name} needs covariate z")
                cols.append(self.Z)
        return np.column_stack(cols)

    def to_dict(self) -> dict:
        d = {"n": self.n, "m": self.m, "x": self.X.tolist(), "y": self.Y.tolist()}
        if self.Z is not None:
            d["z"] = self.Z.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Dataset":
        ds = cls(X=d["x"], Y=d["y"], Z=d.get("z"))
        if "n" in d and int(d["n"]) != ds.n or "m" in d and int(d["m"]) != ds.m:
            raise InvalidParameterError("declared n/m do not match the data arrays")
        return ds


# ---------------------------------------------------------------------------
# link and family primitives (vectorized over linear predictors)

def _inverse_link(link: Link, lp):
    if link is Link.LOG:
        return np.exp(lp)
    if link is Link.LOGIT:
        return special.expit(lp)
    return std_normal_cdf(lp)


def block_loglik(model: ModelSpec, lp, total, count, logfact):
    """Log density of a block of iid counts given their linear predictor.

    ``total`` is the sum of the counts, ``count`` how many there are and
    ``logfact`` the sum of ``log(y!)`` (Poisson only).
    """
    lp = np.asarray(lp, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        if model.family is Family.POISSON:
            out = total * lp - count * np.exp(lp) - logfact
        else:
            if model.link is Link.LOGIT:
                log_p = -np.logaddexp(0.0, -lp)
                log_q = -np.logaddexp(0.0, lp)
            else:
                log_p = special.log_ndtr(lp)
                log_q = special.log_ndtr(-lp)
            # 0 * log(0) for a zero-count block is 0
            out = np.where(total > 0, total * log_q, 0.0) + count * log_p
    return np.where(np.isnan(out), -np.inf, out)


def _mean_to_lp_interval(link: Link, lo: float, hi: float) -> tuple[float, float]:
    """Range of the linear predictor whose mean response lies in [lo, hi]."""
    if link is Link.LOG:
        return math.log(lo), math.log(hi)
    if link is Link.LOGIT:
        return -math.log(hi), -math.log(lo)
    return _probit_lp(hi), _probit_lp(lo)


def _probit_lp(mean: float) -> float:
    """``Phi^{-1}(1/(mean+1))``; the symmetric form keeps small means accurate."""
    if mean < 1.0:
        return -float(std_normal_inverse_cdf(mean / (mean + 1.0)))
    return float(std_normal_inverse_cdf(1.0 / (mean + 1.0)))


def _lp_at_mean(link: Link, mean: float) -> float:
    return _mean_to_lp_interval(link, mean, mean)[0]


class MeanBounds(NamedTuple):
    lower: float
    upper: float
    clamped: bool


def mean_bounds(data: Dataset, site: int, c1: float, c2: float) -> MeanBounds:
    """``[ybar - c1*s/sqrt(m), ybar + c2*s/sqrt(m)]`` made strictly positive."""
    ybar = float(data.ybar[site])
    se = float(data.s[site]) / math.sqrt(data.m)
    lo, hi = ybar - c1 * se, ybar + c2 * se
    base = ybar if ybar > 0 else 0.5 / data.m
    clamped = False
    # an exact cancellation (e.g. a single 1 among m-1 zeros with c1 = 1) leaves rounding noise
    if lo <= 1e-12 * max(ybar, c1 * se):
        lo = base * 1e-3
        clamped = True
    if hi <= 0:
        hi = base
    if clamped:
        log.debug("site %d: lower mean bound clamped to %.3g", site, lo)
    return MeanBounds(lo, hi, clamped)


# ---------------------------------------------------------------------------
# scalar operations

def _linear_part(model: ModelSpec, theta: ParamVector, x, z) -> float:
    lp = theta.alpha
    for name, val in zip(model.covariates, theta.coefs(model)):
        cov = x if name == "x" else z
        if cov is None:
            raise InvalidParameterError(f"model {model.name} needs covariate {name}")
        lp += val * cov
    return lp


def mean_response(model: ModelSpec, theta: ParamVector, x: float | None = None,
                  z: float | None = None, site: int | None = None) -> float:
    """Poisson mean, or geometric success probability, at a covariate value.

    For GP models at an observed site, pass ``site`` so the latent value is
    used as the linear predictor.
    """
    if model.is_gp and site is not None:
        lp = float(theta.eta[site])
    else:
        lp = _linear_part(model, theta, x, z)
    return float(_inverse_link(model.link, lp))


def _site_predictors(model: ModelSpec, theta: ParamVector, data: Dataset) -> np.ndarray:
    if model.is_gp:
        return np.asarray(theta.eta, dtype=float)
    W = data.covariate_matrix(model)
    return theta.alpha + W @ theta.coefs(model)


def log_likelihood(model: ModelSpec, theta: ParamVector, data: Dataset,
                   site_mask: Sequence[int] | None = None,
                   replicate_mask: dict[int, Sequence[int]] | None = None) -> float:
    """Sum of per-count log densities over the included (site, replicate) pairs."""
    sites = range(data.n) if site_mask is None else sorted(set(site_mask))
    lp = _site_predictors(model, theta, data)
    total = 0.0
    for i in sites:
        if not 0 <= i < data.n:
            raise InvalidParameterError(f"site index {i} out of range")
        reps = range(data.m) if replicate_mask is None or i not in replicate_mask \
            else sorted(set(replicate_mask[i]))
        y = data.Y[i, list(reps)]
        if y.size == 0:
            continue
        total += float(block_loglik(model, lp[i], y.sum(), y.size,
                                    special.gammaln(y + 1.0).sum()))
    return total


def gp_cov_matrix(points, omega: float, jitter: float = 0.0) -> np.ndarray:
    """Squared-exponential covariance ``exp(omega) * exp(-|p_i - p_j|^2) + jitter * I``."""
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    if P.shape[0] == 0:
        raise InvalidParameterError("need at least one point")
    d2 = ((P[:, None, :] - P[None, :, :]) ** 2).sum(-1)
    return math.exp(omega) * np.exp(-d2) + jitter * np.eye(P.shape[0])


def log_param_prior(model: ModelSpec, theta: ParamVector, data: Dataset,
                    omega_bounds: tuple[float, float] = DEFAULT_OMEGA_BOUNDS) -> float:
    """Flat prior on the regression parameters; GP models add the latent-value density."""
    if not model.is_gp:
        return 0.0
    lo, hi = omega_bounds
    if not lo <= theta.omega <= hi:
        return -math.inf
    W = data.covariate_matrix(model)
    mu = theta.alpha + W @ theta.coefs(model)
    K = gp_cov_matrix(W, theta.omega, GP_JITTER * math.exp(theta.omega))
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        return -math.inf
    r = linalg.solve_triangular(L, np.asarray(theta.eta) - mu, lower=True)
    n = len(mu)
    return float(-0.5 * r @ r - np.log(np.diag(L)).sum() - 0.5 * n * math.log(2 * math.pi))


class PriorInterval(NamedTuple):
    a: float
    b: float
    clamped: bool


def x_prior_interval(model: ModelSpec, theta: ParamVector, data: Dataset, site: int,
                     which_covariate: str = "x", c1: float = 1.0, c2: float = 100.0) -> PriorInterval:
    """Support ``(a, b)`` of the uniform prior for a held-out covariate.

    The other covariate of a two-covariate model is held at its observed
    value.  GP models use their linear mean function.
    """
    which = which_covariate.lower() if isinstance(which_covariate, str) else CovariateSet(which_covariate).value
    if which not in model.covariates:
        raise InvalidParameterError(f"model {model.name} has no covariate {which}")
    coefs = theta.coefs(model)
    j = model.covariates.index(which)
    coef = coefs[j]
    if abs(coef) < COEF_TOL:
        raise DegenerateCoefficientError(f"coefficient of {which} is {coef:g}")
    other = theta.alpha
    W = data.covariate_matrix(model)
    for l, c in enumerate(coefs):
        if l != j:
            other += c * W[site, l]
    bounds = mean_bounds(data, site, c1, c2)
    if bounds.clamped:
        log.warning("site %d: lower mean bound was not positive and is clamped to %.3g",
                    site + 1, bounds.lower)
    L, U = _mean_to_lp_interval(model.link, bounds.lower, bounds.upper)
    e1, e2 = (L - other) / coef, (U - other) / coef
    return PriorInterval(min(e1, e2), max(e1, e2), bounds.clamped)


def log_x_prior_density(model: ModelSpec, theta: ParamVector, data: Dataset, site: int,
                        which_covariate: str, value: float, c1: float = 1.0,
                        c2: float = 100.0) -> float:
    a, b, _ = x_prior_interval(model, theta, data, site, which_covariate, c1, c2)
    if a < value < b:
        return -math.log(b - a)
    return -math.inf


# ---------------------------------------------------------------------------
# vectorized machinery used by the samplers

@dataclass
class ThetaDraws:
    """A batch of parameter draws; ``coef`` columns follow ``model.covariates``."""

    alpha: np.ndarray
    coef: np.ndarray
    omega: np.ndarray | None = None
    eta: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.alpha)

    def take(self, idx) -> "ThetaDraws":
        return ThetaDraws(self.alpha[idx], self.coef[idx],
                          None if self.omega is None else self.omega[idx],
                          None if self.eta is None else self.eta[idx])

    def param_vector(self, k: int, model: ModelSpec) -> ParamVector:
        kw = {}
        for j, name in enumerate(model.covariates):
            kw["beta" if name == "x" else "gamma"] = float(self.coef[k, j])
        if self.omega is not None:
            kw["omega"] = float(self.omega[k])
            kw["eta"] = self.eta[k].copy()
        return ParamVector(alpha=float(self.alpha[k]), **kw)

    def mean(self) -> dict:
        d = {"alpha": float(self.alpha.mean())}
        for j in range(self.coef.shape[1]):
            d[f"coef{j}"] = float(self.coef[:, j].mean())
        if self.omega is not None:
            d["omega"] = float(self.omega.mean())
        return d


_GH_T, _GH_W = np.polynomial.hermite.hermgauss(32)
_GH_LOGW = np.log(_GH_W) - 0.5 * math.log(math.pi)


class InverseModel:
    """A model bound to a dataset, exposing the densities the samplers need.

    Sampler coordinates are ``alpha``, the slopes, and for GP models
    ``omega`` followed by whitened latent values ``u`` with
    ``eta = mu(W) + exp(omega/2) * chol(K0) @ u``.

    For GP models the held-out block at site ``i`` is scored with its
    GP-predictive likelihood: the latent value at the candidate covariate is
    integrated over its Gaussian-process conditional given the latent values
    at the other sites (Gauss-Hermite quadrature).  The latent value stored
    at site ``i`` itself is then a nuisance coordinate that carries no data.
    """

    def __init__(self, model: ModelSpec, data: Dataset, c1: float = 1.0, c2: float = 100.0,
                 omega_bounds: tuple[float, float] = DEFAULT_OMEGA_BOUNDS):
        self.model = model
        self.data = data
        self.c1, self.c2 = c1, c2
        self.omega_bounds = omega_bounds
        self.W = data.covariate_matrix(model)
        self.n, self.q = self.W.shape
        self.m = data.m
        self.total = data.Y.sum(axis=1).astype(float)
        self.logfact = special.gammaln(data.Y + 1.0).sum(axis=1)
        self.first = data.Y[:, 0].astype(float)
        self.first_logfact = special.gammaln(self.first + 1.0)

        lo_hi = [mean_bounds(data, i, c1, c2) for i in range(self.n)]
        self.clamped = np.array([b.clamped for b in lo_hi])
        lp_bounds = np.array([_mean_to_lp_interval(model.link, b.lower, b.upper) for b in lo_hi])
        self.lp_lo, self.lp_hi = lp_bounds[:, 0], lp_bounds[:, 1]
        self.pinned = self.lp_lo == self.lp_hi
        ybar_eff = np.where(data.ybar > 0, data.ybar, 0.5 / data.m)
        self.lp_center = np.array([_lp_at_mean(model.link, v) for v in ybar_eff])

        self.labels = ["alpha"] + [("beta" if c == "x" else "gamma") for c in model.covariates]
        if model.is_gp:
            self.labels += ["omega"] + [f"u{i + 1}" for i in range(self.n)]
            d2 = ((self.W[:, None, :] - self.W[None, :, :]) ** 2).sum(-1)
            self.K0 = np.exp(-d2) + GP_JITTER * np.eye(self.n)
            self.L0 = np.linalg.cholesky(self.K0)
            others = np.array([np.delete(np.arange(self.n), i) for i in range(self.n)])
            self.others = others                                   # (n, n-1)
            self.W_others = self.W[others]                         # (n, n-1, q)
            self.K_others_inv = np.array(
                [np.linalg.inv(self.K0[np.ix_(o, o)]) for o in others])  # (n, n-1, n-1)
        self.dim = len(self.labels)

    # -- coordinates ---------------------------------------------------------
    def draws_from_coords(self, C) -> ThetaDraws:
        C = np.atleast_2d(np.asarray(C, dtype=float))
        q = self.q
        alpha, coef = C[:, 0], C[:, 1:1 + q]
        if not self.model.is_gp:
            return ThetaDraws(alpha.copy(), coef.copy())
        omega = C[:, 1 + q]
        u = C[:, 2 + q:2 + q + self.n]
        eta = alpha[:, None] + coef @ self.W.T + np.exp(0.5 * omega)[:, None] * (u @ self.L0.T)
        return ThetaDraws(alpha.copy(), coef.copy(), omega.copy(), eta)

    def coords_from_theta(self, theta: ParamVector) -> np.ndarray:
        c = [theta.alpha, *theta.coefs(self.model)]
        if self.model.is_gp:
            mu = theta.alpha + self.W @ theta.coefs(self.model)
            u = linalg.solve_triangular(self.L0, (np.asarray(theta.eta) - mu) * math.exp(-0.5 * theta.omega),
                                        lower=True)
            c += [theta.omega, *u]
        return np.array(c, dtype=float)

    def theta_from_coords(self, c) -> ParamVector:
        return self.draws_from_coords(c).param_vector(0, self.model)

    # -- scalar targets for chains -------------------------------------------
    def _unpack(self, c):
        q = self.q
        alpha = c[0]
        coef = c[1:1 + q]
        lin = alpha + self.W @ coef
        if not self.model.is_gp:
            return alpha, coef, lin, None, 0.0
        omega = c[1 + q]
        lo, hi = self.omega_bounds
        if not lo <= omega <= hi:
            return alpha, coef, None, omega, -math.inf
        u = c[2 + q:]
        eta = lin + math.exp(0.5 * omega) * (self.L0 @ u)
        return alpha, coef, eta, omega, -0.5 * float(u @ u)

    def log_forward(self, c) -> float:
        """Full-data log posterior (up to a constant) in sampler coordinates."""
        c = np.asarray(c, dtype=float)
        alpha, coef, lp, omega, lprior = self._unpack(c)
        if lprior == -math.inf:
            return -math.inf
        ll = block_loglik(self.model, lp, self.total, self.m, self.logfact).sum()
        return float(ll + lprior)

    def prior_bounds(self, alpha, coef, site) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Endpoints of every held-out covariate's prior, vectorized over draws.

        Returns ``(a, b, ok)`` with ``a, b`` of shape ``(N, q)`` and ``ok``
        false where a coefficient is degenerate.
        """
        alpha = np.atleast_1d(alpha)
        coef = np.atleast_2d(coef)
        site = np.asarray(site)
        Wsite = self.W[site]                                       # (q,) or (N, q)
        lin_all = alpha + (coef * Wsite).sum(-1)                   # (N,)
        other = lin_all[:, None] - coef * Wsite                    # (N, q)
        ok = np.all(np.abs(coef) >= COEF_TOL, axis=-1)
        safe = np.where(np.abs(coef) >= COEF_TOL, coef, 1.0)
        e1 = (self.lp_lo[site][..., None] - other) / safe
        e2 = (self.lp_hi[site][..., None] - other) / safe
        return np.minimum(e1, e2), np.maximum(e1, e2), ok

    def log_heldout(self, c, site: int) -> float:
        """Joint log density of parameters and the held-out covariate(s) at ``site``.

        ``c`` is the sampler coordinate vector followed by the ``q`` held-out
        values.  Pinned sites (degenerate prior interval) ignore the trailing
        values and place the covariate at the interval end.
        """
        c = np.asarray(c, dtype=float)
        theta_c, v = c[:self.dim], c[self.dim:]
        alpha, coef, lp, omega, lprior = self._unpack(theta_c)
        if lprior == -math.inf:
            return -math.inf
        a, b, ok = self.prior_bounds(alpha, coef, site)
        if not ok[0]:
            return -math.inf
        a, b = a[0], b[0]
        if self.pinned[site]:
            v = a
            lprior_x = 0.0
        else:
            if np.any(v <= a) or np.any(v >= b):
                return -math.inf
            lprior_x = -float(np.log(b - a).sum())
        keep = np.ones(self.n, dtype=bool)
        keep[site] = False
        ll = block_loglik(self.model, lp[keep], self.total[keep], self.m, self.logfact[keep]).sum()
        if self.model.is_gp:
            draws = ThetaDraws(np.array([alpha]), coef[None, :], np.array([omega]), lp[None, :])
            held = self.site_loglik_at(draws, site, v[None, None, :])[0, 0]
        else:
            held = block_loglik(self.model, alpha + v @ coef, self.total[site], self.m, self.logfact[site])
        return float(ll + held + lprior + lprior_x)

    def pinned_value(self, c, site: int) -> np.ndarray:
        alpha, coef = c[0], c[1:1 + self.q]
        a, _, _ = self.prior_bounds(alpha, coef, site)
        return a[0]

    # -- batched site quantities ---------------------------------------------
    def _gp_terms(self, draws: ThetaDraws, site):
        """Kriging weights for the latent value at ``site`` given the other sites."""
        site = np.asarray(site)
        others = self.others[site]                                 # (n-1,) or (B, n-1)
        eta_o = np.take_along_axis(draws.eta, np.broadcast_to(others, (len(draws), self.n - 1)), axis=1)
        mu_o = draws.alpha[:, None] + np.einsum("bkq,bq->bk",
                                                np.broadcast_to(self.W_others[site], (len(draws), self.n - 1, self.q)),
                                                draws.coef)
        Ainv = self.K_others_inv[site]
        if Ainv.ndim == 2:
            weights = (eta_o - mu_o) @ Ainv
        else:
            weights = np.einsum("bk,bkl->bl", eta_o - mu_o, Ainv)
        return weights, self.W_others[site], Ainv

    def site_loglik_at(self, draws: ThetaDraws, site, values, *, first_only: bool = False,
                       gp_weights: np.ndarray | None = None) -> np.ndarray:
        """Log likelihood of site block(s) with the covariate set to ``values``.

        ``values`` has shape ``(B, Q, q)``; ``site`` is a scalar or a length-B
        array.  Returns ``(B, Q)``.  With ``first_only`` only the first
        replicate is scored.  ``gp_weights`` reuses precomputed kriging
        weights for GP models.
        """
        values = np.asarray(values, dtype=float)
        site = np.asarray(site)
        if first_only:
            total, count, lf = self.first[site], 1, self.first_logfact[site]
        else:
            total, count, lf = self.total[site], self.m, self.logfact[site]
        total = np.asarray(total, dtype=float)
        lf = np.asarray(lf, dtype=float)
        if total.ndim:
            total, lf = total[:, None], lf[:, None]
        lin = draws.alpha[:, None] + np.einsum("bQq,bq->bQ", values, draws.coef)
        if not self.model.is_gp:
            return block_loglik(self.model, lin, total, count, lf)
        if gp_weights is None:
            weights, Wo, Ainv = self._gp_terms(draws, site)
        else:
            weights, Wo, Ainv = gp_weights, self.W_others[site], self.K_others_inv[site]
        if Wo.ndim == 2:
            Wo = Wo[None]
            Ainv = Ainv[None]
        d2 = ((values[:, :, None, :] - Wo[:, None, :, :]) ** 2).sum(-1)     # (B, Q, n-1)
        k = np.exp(-d2)
        mean = lin + np.einsum("bQk,bk->bQ", k, weights)
        quad = np.einsum("bQk,bkl,bQl->bQ", k, Ainv, k)
        var = np.exp(draws.omega)[:, None] * np.clip(1.0 + GP_JITTER - quad, 0.0, None)
        return self._gh_loglik(mean, var, total, count, lf)

    def _gh_loglik(self, mean, var, total, count, lf):
        nodes = mean[..., None] + np.sqrt(2.0 * var)[..., None] * _GH_T
        t = total[..., None] if np.ndim(total) else total
        f = lf[..., None] if np.ndim(lf) else lf
        ll = block_loglik(self.model, nodes, t, count, f) + _GH_LOGW
        mx = ll.max(axis=-1)
        safe = np.where(np.isfinite(mx), mx, 0.0)
        with np.errstate(under="ignore"):
            tot = np.exp(ll - safe[..., None]).sum(axis=-1)
        with np.errstate(divide="ignore"):
            return np.where(np.isfinite(mx), safe + np.log(tot), mx)

    def site_loglik_observed(self, draws: ThetaDraws, site: int) -> np.ndarray:
        """``log f(y_site | theta, x_site)``: the block at its observed covariate."""
        if self.model.is_gp:
            return block_loglik(self.model, draws.eta[:, site], self.total[site], self.m, self.logfact[site])
        lin = draws.alpha + draws.coef @ self.W[site]
        return block_loglik(self.model, lin, self.total[site], self.m, self.logfact[site])

    def site_predictive_logliks(self, draws: ThetaDraws, site: int) -> tuple[np.ndarray, np.ndarray]:
        """Log densities of ``y_{site,1}`` and of the whole block at the observed covariate.

        GP models integrate the site's latent value over its conditional
        given the other sites, so the pair refers to parameters with that
        latent value removed.
        """
        if not self.model.is_gp:
            lin = draws.alpha + draws.coef @ self.W[site]
            return (block_loglik(self.model, lin, self.first[site], 1, self.first_logfact[site]),
                    block_loglik(self.model, lin, self.total[site], self.m, self.logfact[site]))
        v = np.broadcast_to(self.W[site], (len(draws), 1, self.q))
        first = self.site_loglik_at(draws, site, v, first_only=True)[:, 0]
        block = self.site_loglik_at(draws, site, v)[:, 0]
        return first, block

    def heldout_start(self, alpha, coef, site: int) -> np.ndarray:
        """Covariate value(s) whose mean response equals the site average, clipped into the prior."""
        a, b, ok = self.prior_bounds(alpha, coef, site)
        a, b = a[0], b[0]
        other = alpha + coef @ self.W[site] - coef * self.W[site]
        with np.errstate(divide="ignore", invalid="ignore"):
            v = (self.lp_center[site] - other) / coef
        mid = 0.5 * (a + b)
        inside = (v > a) & (v < b) & np.isfinite(v)
        lo_pad = a + 1e-6 * (b - a)
        return np.where(inside, v, np.clip(mid, lo_pad, b))
