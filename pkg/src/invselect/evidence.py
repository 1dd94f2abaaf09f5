"""Leave-one-site-out predictive ordinates, pseudo-Bayes factors and model posteriors."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import special

from .models import Dataset, InverseModel, ModelSpec, ParamVector, ThetaDraws, block_loglik
from .streams import InvalidParameterError, SeededStream

log = logging.getLogger(__name__)

__all__ = [
    "EvidenceReport", "CpoFailure", "log_cpo_from_logs", "estimate_log_cpo",
    "estimate_log_cpo_direct", "log_pbf", "all_log_pbf", "gibbs_model_posterior",
    "model_posterior_exact", "build_evidence_report",
]

DEFAULT_TRIM = 1e-3


class CpoFailure(RuntimeError):
    def __init__(self, site: int, message: str):
        super().__init__(f"site {site + 1}: {message}")
        self.site = site


def _trimmed_log_mean(log_w: np.ndarray, keep: np.ndarray) -> float:
    lw = log_w[keep]
    return float(special.logsumexp(lw) - math.log(lw.size))


def log_cpo_from_logs(log_first: np.ndarray, log_block: np.ndarray, trim: float = DEFAULT_TRIM) -> float:
    """``log`` of ``E[f(y1|theta)/f(y|theta)] / E[1/f(y|theta)]`` from posterior draws.

    The draws with the largest ``1/f(y|theta)`` (a fraction ``trim``) are
    dropped from both averages.
    """
    log_first = np.asarray(log_first, dtype=float)
    log_block = np.asarray(log_block, dtype=float)
    if log_first.shape != log_block.shape or log_first.ndim != 1 or log_first.size == 0:
        raise InvalidParameterError("need two equal-length nonempty 1-D arrays")
    neg = -log_block
    n_drop = int(math.floor(trim * neg.size))
    keep = np.ones(neg.size, dtype=bool)
    if n_drop:
        keep[np.argsort(neg, kind="stable")[-n_drop:]] = False
    with np.errstate(invalid="ignore"):
        num = _trimmed_log_mean(log_first + neg, keep)
    den = _trimmed_log_mean(neg, keep)
    if not np.isfinite(den) or not np.isfinite(num):
        return float("nan")
    return num - den


def _as_draws(im: InverseModel, posterior_draws) -> ThetaDraws:
    if isinstance(posterior_draws, ThetaDraws):
        return posterior_draws
    coords = np.array([im.coords_from_theta(t) for t in posterior_draws])
    draws = im.draws_from_coords(coords)
    if im.model.is_gp:
        draws.eta = np.array([np.asarray(t.eta, dtype=float) for t in posterior_draws])
    return draws


def estimate_log_cpo(model: ModelSpec | InverseModel, data: Dataset | None, posterior_draws,
                     trim: float = DEFAULT_TRIM, *, strict: bool = True, target: str = "first") -> np.ndarray:
    """Per-site ``log pi(y_{i1} | Y_{-i})`` from full-data posterior draws.

    ``posterior_draws`` is a :class:`ThetaDraws` or a sequence of
    :class:`ParamVector`.  With ``strict`` a non-finite site raises
    :class:`CpoFailure`; otherwise it is returned as NaN.  ``target="block"``
    predicts the whole replicate block ``y_i`` instead of its first count
    (a diagnostic; the selection pipeline uses ``"first"``).
    """
    if target not in ("first", "block"):
        raise InvalidParameterError("target must be 'first' or 'block'")
    im = model if isinstance(model, InverseModel) else InverseModel(model, data)
    draws = _as_draws(im, posterior_draws)
    out = np.empty(im.n)
    for i in range(im.n):
        lf, lb = im.site_predictive_logliks(draws, i)
        out[i] = log_cpo_from_logs(lb if target == "block" else lf, lb, trim)
        if not np.isfinite(out[i]):
            if strict:
                raise CpoFailure(i, f"CPO estimate is not finite under {im.model.name}")
            log.warning("site %d: CPO estimate not finite under %s", i + 1, im.model.name)
    return out


def estimate_log_cpo_direct(model: ModelSpec, data: Dataset, site: int, config, stream: SeededStream) -> float:
    """Reference CPO from a chain run with site ``site``'s block removed.

    Costs one chain per site; meant for checking :func:`estimate_log_cpo`.
    """
    from .samplers import sample_forward_posterior

    keep = np.delete(np.arange(data.n), site)
    reduced = Dataset(X=data.X[keep], Y=data.Y[keep], Z=None if data.Z is None else data.Z[keep])
    im = InverseModel(model, reduced)
    draws = sample_forward_posterior(im, config, stream)
    w_site = data.covariate_matrix(model)[site]
    y1 = float(data.Y[site, 0])
    lf1 = float(special.gammaln(y1 + 1.0))
    lin = draws.alpha + draws.coef @ w_site
    if not model.is_gp:
        ll = block_loglik(model, lin, y1, 1, lf1)
        return float(special.logsumexp(ll) - math.log(len(draws)))
    d2 = ((im.W - w_site) ** 2).sum(-1)
    k = np.exp(-d2)
    Kinv_k = np.linalg.solve(im.K0, k)
    mu = draws.alpha[:, None] + draws.coef @ im.W.T
    mean = lin + (draws.eta - mu) @ Kinv_k
    var = np.exp(draws.omega) * max(1.0 - k @ Kinv_k, 0.0)
    ll = im._gh_loglik(mean, var, np.full(len(draws), y1), 1, np.full(len(draws), lf1))
    return float(special.logsumexp(ll) - math.log(len(draws)))


def log_pbf(mean_log_cpo: Mapping[int, float], k: int, n: int) -> float:
    """``n * (mean_log_cpo[k] - max mean_log_cpo)``: log PBF of ``k`` against the best model."""
    if not mean_log_cpo:
        raise InvalidParameterError("mean_log_cpo is empty")
    if k not in mean_log_cpo:
        raise InvalidParameterError(f"unknown model id {k}")
    ref = max(mean_log_cpo.values())
    return float(n * (mean_log_cpo[k] - ref))


def all_log_pbf(mean_log_cpo: Mapping[int, float], n: int) -> tuple[dict[int, float], int]:
    ids = list(mean_log_cpo)
    vals = np.array([mean_log_cpo[k] for k in ids])
    ref = ids[int(np.argmax(vals))]
    return {k: log_pbf(mean_log_cpo, k, n) for k in ids}, ref


def gibbs_model_posterior(log_pbf_map: Mapping[int, float], dirichlet_alpha: Mapping[int, float],
                          n_iter: int = 100000, burn: int = 10000,
                          stream: SeededStream | None = None) -> dict[int, float]:
    """Relative frequencies of the model indicator from the (p, zeta) Gibbs sampler.

    Alternates ``p | zeta ~ Dirichlet(alpha + e_zeta)`` and
    ``P(zeta = k | p) ∝ p_k * PBF_k``.
    """
    ids = list(log_pbf_map)
    if set(ids) != set(dirichlet_alpha):
        raise InvalidParameterError("log_pbf and dirichlet_alpha must share model ids")
    if len(ids) < 1:
        raise InvalidParameterError("need at least one model")
    lp = np.array([log_pbf_map[k] for k in ids], dtype=float)
    alpha = np.array([dirichlet_alpha[k] for k in ids], dtype=float)
    if not np.all(np.isfinite(lp)):
        raise InvalidParameterError("log PBF values must be finite")
    if np.any(~(alpha > 0)):
        raise InvalidParameterError("Dirichlet parameters must be positive")
    if not 0 <= burn < n_iter:
        raise InvalidParameterError("burn must be smaller than n_iter")
    if stream is None:
        stream = SeededStream(0, ("gibbs",))
    K = len(ids)
    pbf = np.exp(lp - lp.max())
    rng = stream.generator
    counts = np.zeros(K, dtype=np.int64)
    z = int(np.argmax(lp))
    block = 8192
    t = 0
    while t < n_iter:
        nb = min(block, n_iter - t)
        # Gamma(alpha_k + 1) for the current indicator = Gamma(alpha_k) + Exp(1)
        G = rng.standard_gamma(alpha, size=(nb, K)) * pbf
        E = rng.standard_exponential(nb)
        U = rng.random(nb)
        for s in range(nb):
            cum = np.cumsum(G[s])
            cum[z:] += E[s] * pbf[z]
            z = int(np.searchsorted(cum, U[s] * cum[-1], side="right"))
            if z >= K:
                z = K - 1
            if t >= burn:
                counts[z] += 1
            t += 1
    freq = counts / counts.sum()
    return {k: float(f) for k, f in zip(ids, freq)}


def model_posterior_exact(log_pbf_map: Mapping[int, float], dirichlet_alpha: Mapping[int, float]) -> dict[int, float]:
    """Stationary indicator marginal of the Gibbs sampler, ``∝ alpha_k * PBF_k``."""
    ids = list(log_pbf_map)
    lw = np.array([math.log(dirichlet_alpha[k]) + log_pbf_map[k] for k in ids])
    p = np.exp(lw - special.logsumexp(lw))
    return {k: float(v) for k, v in zip(ids, p)}


@dataclass
class EvidenceReport:
    mean_log_cpo: dict[int, float]
    log_pbf: dict[int, float]
    reference: int
    model_posterior: dict[int, float]
    dirichlet_alpha: dict[int, float]
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "mean_log_cpo": {str(k): v for k, v in self.mean_log_cpo.items()},
            "log_pbf": {str(k): v for k, v in self.log_pbf.items()},
            "reference": self.reference,
            "model_posterior": {str(k): v for k, v in self.model_posterior.items()},
            "dirichlet_alpha": {str(k): v for k, v in self.dirichlet_alpha.items()},
        }
        d.update(self.extras)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvidenceReport":
        conv = lambda m: {int(k): float(v) for k, v in m.items()}  # noqa: E731
        known = {"mean_log_cpo", "log_pbf", "reference", "model_posterior", "dirichlet_alpha"}
        return cls(conv(d["mean_log_cpo"]), conv(d["log_pbf"]), int(d["reference"]),
                   conv(d["model_posterior"]), conv(d["dirichlet_alpha"]),
                   {k: v for k, v in d.items() if k not in known})


def build_evidence_report(mean_log_cpo: Mapping[int, float], n: int, dirichlet_alpha: Mapping[int, float],
                          stream: SeededStream, n_iter: int = 100000, burn: int = 10000) -> EvidenceReport:
    pbf, ref = all_log_pbf(mean_log_cpo, n)
    post = gibbs_model_posterior(pbf, dirichlet_alpha, n_iter, burn, stream)
    return EvidenceReport(dict(mean_log_cpo), pbf, ref, post, dict(dirichlet_alpha))
