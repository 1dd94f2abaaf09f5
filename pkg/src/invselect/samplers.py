"""Additive transformation-based MCMC and importance-resampling MCMC.

Additive TMCMC moves every coordinate at once by ``+/- scale_j * eps`` with a
single positive ``eps`` per step, so the proposal is symmetric with unit
Jacobian and the acceptance ratio is the plain target ratio.

IRMCMC produces all n leave-one-out inverse cross-validation posteriors of
one model from a single expensive chain at a pivot site ``i*``: the pivot
chain's parameter draws are importance-resampled towards each site's
leave-one-out posterior, and short conditional chains then draw the
held-out covariate given each resampled parameter.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import optimize, special

from .models import Dataset, InverseModel, ModelSpec, ParamVector, ThetaDraws
from .streams import InvalidParameterError, SeededStream

log = logging.getLogger(__name__)

__all__ = [
    "ChainConfig", "CvPosterior", "InvalidStateError", "SiteFailure",
    "tmcmc_step", "run_tmcmc", "select_istar", "importance_weight",
    "log_importance_weights", "irmcmc_cv_posteriors", "sample_forward_posterior",
    "direct_cv_chain", "find_mode",
]

_BLOCK = 4096


class InvalidStateError(RuntimeError):
    pass


class SiteFailure(RuntimeError):
    def __init__(self, site: int, message: str):
        super().__init__(f"site {site + 1}: {message}")
        self.site = site


@dataclass
class ChainConfig:
    n_first_stage: int = 30000
    first_burn: int = 10000
    n_resample: int = 1000
    n_second_stage_per_theta: int = 100
    second_stage_initial_burn: int = 10000
    step_scales: dict[str, float] = field(default_factory=dict)
    quadrature_points: int = 32
    istar: int | None = None  # 0-based override of the pivot site

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.first_burn < self.n_first_stage:
            raise InvalidParameterError("first_burn must be smaller than n_first_stage")
        if not 1 <= self.n_resample <= self.n_first_stage - self.first_burn:
            raise InvalidParameterError("n_resample must not exceed the retained first-stage draws")
        if self.n_second_stage_per_theta < 1 or self.second_stage_initial_burn < 0:
            raise InvalidParameterError("second-stage sizes must be positive")
        if self.quadrature_points < 1:
            raise InvalidParameterError("quadrature_points must be positive")
        if any(not v > 0 for v in self.step_scales.values()):
            raise InvalidParameterError("step scales must be positive")

    @classmethod
    def paper(cls, **kw) -> "ChainConfig":
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "ChainConfig":
        base = dict(n_first_stage=15000, first_burn=5000, n_resample=500,
                    n_second_stage_per_theta=50, second_stage_initial_burn=5000)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ChainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class CvPosterior:
    site: int
    samples: np.ndarray
    mean: np.ndarray | float
    variance: np.ndarray | float
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def from_samples(cls, site: int, samples: np.ndarray, **diag) -> "CvPosterior":
        samples = np.asarray(samples, dtype=float)
        if samples.ndim == 2 and samples.shape[1] == 1:
            samples = samples[:, 0]
        if samples.ndim == 1:
            return cls(site, samples, float(samples.mean()), float(samples.var()), diag)
        return cls(site, samples, samples.mean(axis=0), np.cov(samples.T, bias=True), diag)


class TmcmcStep(NamedTuple):
    state: np.ndarray
    accepted: bool
    log_target: float


def tmcmc_step(stream: SeededStream, current, log_target: Callable[[np.ndarray], float],
               scales, current_log_target: float | None = None) -> TmcmcStep:
    """One additive TMCMC move."""
    x = np.asarray(current, dtype=float)
    lp = log_target(x) if current_log_target is None else current_log_target
    if not np.isfinite(lp):
        raise InvalidStateError("log target is not finite at the current state")
    rng = stream.generator
    eps = abs(rng.standard_normal())
    signs = rng.integers(0, 2, size=x.shape) * 2 - 1
    prop = x + signs * np.asarray(scales, dtype=float) * eps
    lp_prop = log_target(prop)
    if math.log(rng.random()) < lp_prop - lp:
        return TmcmcStep(prop, True, float(lp_prop))
    return TmcmcStep(x, False, float(lp))


class ChainResult(NamedTuple):
    draws: np.ndarray
    log_target: np.ndarray
    acceptance: float
    scales: np.ndarray


def run_tmcmc(stream: SeededStream, init, log_target: Callable[[np.ndarray], float], scales,
              n_iter: int, burn: int = 0, adapt: bool = True) -> ChainResult:
    """Run an additive TMCMC chain, returning the post-burn-in draws.

    With ``adapt``, step scales are tuned during burn-in only: a global
    multiplier follows the acceptance rate (target 0.15 to 0.5) and halfway
    through burn-in the per-coordinate scales are reset from the draws so far.
    """
    x = np.array(init, dtype=float)
    d = x.size
    base = np.array(scales, dtype=float)
    if base.shape != x.shape or np.any(base <= 0):
        raise InvalidParameterError("scales must be positive and match the state")
    lp = log_target(x)
    if not np.isfinite(lp):
        raise InvalidStateError("log target is not finite at the initial state")
    rng = stream.generator
    mult = 1.0
    window = max(20, min(100, burn // 20)) if burn else 0
    reset_at = burn // 2 if adapt and burn >= 400 else -1
    keep = n_iter - burn
    draws = np.empty((keep, d))
    lps = np.empty(keep)
    history = np.empty((burn, d)) if reset_at > 0 else None
    acc_window = 0
    acc_total = 0
    step_scale = base * mult
    t = 0
    while t < n_iter:
        # fixed block size keeps a longer chain an extension of a shorter one
        eps = np.abs(rng.standard_normal(_BLOCK))
        signs = rng.integers(0, 2, size=(_BLOCK, d)) * 2 - 1
        logu = np.log(rng.random(_BLOCK))
        for k in range(min(_BLOCK, n_iter - t)):
            prop = x + signs[k] * step_scale * eps[k]
            lp_prop = log_target(prop)
            if logu[k] < lp_prop - lp:
                x, lp = prop, lp_prop
                acc_window += 1
                if t >= burn:
                    acc_total += 1
            if t < burn:
                if history is not None:
                    history[t] = x
                if adapt and window and (t + 1) % window == 0:
                    rate = acc_window / window
                    if rate < 0.15:
                        mult *= 0.7
                    elif rate > 0.5:
                        mult *= 1.4
                    acc_window = 0
                if t + 1 == reset_at:
                    sd = history[burn // 4:reset_at].std(axis=0)
                    good = sd > 0
                    base = np.where(good, 2.38 / math.sqrt(d) * sd, base * mult)
                    mult = 1.0
                step_scale = base * mult
            else:
                draws[t - burn] = x
                lps[t - burn] = lp
            t += 1
    acc = acc_total / keep if keep else float("nan")
    return ChainResult(draws, lps, acc, step_scale)


# ---------------------------------------------------------------------------

def select_istar(data: Dataset) -> int:
    """Pivot site: ``ybar`` closest to the median ``ybar``, lowest index on ties (0-based)."""
    ybar = np.asarray(data.ybar if isinstance(data, Dataset) else data, dtype=float)
    med = np.median(ybar)
    return int(np.argmin(np.abs(ybar - med)))


def _midpoint_nodes(a: np.ndarray, b: np.ndarray, Q: int) -> np.ndarray:
    """Midpoint-rule nodes of the prior box: ``(N, Q**q, q)``."""
    frac = (np.arange(Q) + 0.5) / Q
    axes = a[:, None, :] + (b - a)[:, None, :] * frac[None, :, None]     # (N, Q, q)
    q = a.shape[1]
    if q == 1:
        return axes
    gx, gz = np.meshgrid(np.arange(Q), np.arange(Q), indexing="ij")
    return np.stack([axes[:, gx.ravel(), 0], axes[:, gz.ravel(), 1]], axis=-1)


def log_heldout_integral(im: InverseModel, draws: ThetaDraws, site: int, Q: int,
                         chunk: int = 2048) -> np.ndarray:
    """``log`` of the block likelihood averaged over the held-out covariate prior."""
    # rejected TMCMC moves repeat draws; integrate each distinct draw once
    cols = [draws.alpha[:, None], draws.coef]
    if draws.omega is not None:
        cols += [draws.omega[:, None], draws.eta]
    _, first, inverse = np.unique(np.hstack(cols), axis=0, return_index=True, return_inverse=True)
    uniq = draws.take(first)
    out = np.empty(len(uniq))
    for start in range(0, len(uniq), chunk):
        sl = slice(start, start + chunk)
        sub = uniq.take(sl)
        a, b, ok = im.prior_bounds(sub.alpha, sub.coef, site)
        nodes = _midpoint_nodes(a, b, Q)
        ll = im.site_loglik_at(sub, site, nodes)
        val = special.logsumexp(ll, axis=1) - math.log(nodes.shape[1])
        out[sl] = np.where(ok, val, -np.inf)
    return out[inverse.ravel()]


def log_importance_weights(im: InverseModel, draws: ThetaDraws, site: int, istar: int,
                           quadrature_points: int = 32,
                           cache: dict | None = None) -> np.ndarray:
    """Log IRMCMC weights moving pivot-chain draws to site ``site``'s leave-one-out posterior."""
    if site == istar:
        return np.zeros(len(draws))
    cache = {} if cache is None else cache

    def integral(j):
        if j not in cache:
            cache[j] = log_heldout_integral(im, draws, j, quadrature_points)
        return cache[j]

    num = im.site_loglik_observed(draws, istar) + integral(site)
    den = im.site_loglik_observed(draws, site) + integral(istar)
    with np.errstate(invalid="ignore"):
        lw = num - den
    both_zero = np.isneginf(num) & np.isneginf(den)
    if both_zero.any():
        log.warning("site %d: %d draws with zero numerator and denominator get weight 0",
                    site + 1, int(both_zero.sum()))
    return np.where(np.isnan(lw), -np.inf, lw)


def importance_weight(theta: ParamVector, i: int, istar: int, model: ModelSpec, data: Dataset,
                      quadrature_points: int = 32, **model_kw) -> float:
    """Unnormalized IRMCMC weight of one parameter value (1 when ``i == istar``)."""
    im = InverseModel(model, data, **model_kw)
    draws = im.draws_from_coords(im.coords_from_theta(theta))
    if model.is_gp:
        draws.eta = np.asarray(theta.eta, dtype=float)[None, :]
    return float(np.exp(log_importance_weights(im, draws, i, istar, quadrature_points)[0]))


# ---------------------------------------------------------------------------

def find_mode(im: InverseModel) -> np.ndarray:
    """Posterior mode of the regression parameters (latent GP values at the mean)."""
    q = im.q
    lin_model = im if not im.model.is_gp else None

    def negpost(p):
        if lin_model is not None:
            val = im.log_forward(p)
        else:
            c = np.concatenate([p, [0.0], np.zeros(im.n)])
            val = im.log_forward(c)
        return -val if np.isfinite(val) else 1e300

    x0 = np.zeros(1 + q)
    x0[0] = float(np.mean(im.lp_center))
    res = optimize.minimize(negpost, x0, method="Nelder-Mead",
                            options={"xatol": 1e-6, "fatol": 1e-8, "maxiter": 4000})
    p = res.x
    if im.model.is_gp:
        return np.concatenate([p, [-2.0], np.zeros(im.n)])
    return p


def _laplace_scales(im: InverseModel, mode: np.ndarray) -> np.ndarray:
    q = im.q
    k = 1 + q
    f = (lambda p: im.log_forward(p)) if not im.model.is_gp else \
        (lambda p: im.log_forward(np.concatenate([p, mode[k:]])))
    p0 = mode[:k]
    h = 1e-3
    H = np.empty((k, k))
    f0 = f(p0)
    for a in range(k):
        for b in range(a, k):
            ea, eb = np.eye(k)[a] * h, np.eye(k)[b] * h
            H[a, b] = H[b, a] = (f(p0 + ea + eb) - f(p0 + ea - eb) - f(p0 - ea + eb) + f(p0 - ea - eb)) / (4 * h * h)
    try:
        cov = np.linalg.inv(-H)
        sd = np.sqrt(np.clip(np.diag(cov), 1e-8, None))
    except np.linalg.LinAlgError:
        sd = np.full(k, 0.1)
    sd = np.where(np.isfinite(sd), sd, 0.1)
    scales = list(np.minimum(sd, 5.0))
    if im.model.is_gp:
        scales += [1.0] + [0.5] * im.n
    return np.array(scales)


def _initial_scales(im: InverseModel, mode: np.ndarray, overrides: dict[str, float],
                    extra_labels: Sequence[str] = (), extra_scales: Sequence[float] = ()) -> np.ndarray:
    labels = list(im.labels) + list(extra_labels)
    scales = np.concatenate([_laplace_scales(im, mode), np.asarray(extra_scales, dtype=float)])
    for j, lab in enumerate(labels):
        if lab in overrides:
            scales[j] = overrides[lab]
    return scales


def sample_forward_posterior(im: InverseModel, config: ChainConfig, stream: SeededStream) -> ThetaDraws:
    """Full-data (forward) posterior draws by adaptive TMCMC."""
    mode = find_mode(im)
    scales = _initial_scales(im, mode, config.step_scales)
    res = run_tmcmc(stream, mode, im.log_forward, scales, config.n_first_stage, config.first_burn)
    log.debug("%s forward chain acceptance %.3f", im.model.name, res.acceptance)
    draws = im.draws_from_coords(res.draws)
    return draws


def _grid_conditional(im: InverseModel, rows: ThetaDraws, sites: np.ndarray, a: np.ndarray,
                      b: np.ndarray, Q: int, gp_weights=None):
    """Discretized conditional of the held-out covariate(s) on the prior grid.

    Returns nodes ``(B, Q**q, q)``, normalized probabilities, and the cell widths.
    """
    nodes = _midpoint_nodes(a, b, Q)
    ll = im.site_loglik_at(rows, sites, nodes, gp_weights=gp_weights)
    ll = np.where(np.isfinite(ll), ll, -np.inf)
    mx = ll.max(axis=1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    w = np.exp(ll - mx)
    tot = w.sum(axis=1, keepdims=True)
    w = np.where(tot > 0, w / np.where(tot > 0, tot, 1.0), 1.0 / w.shape[1])
    return nodes, w, (b - a) / Q


def _theta_rows(draws: ThetaDraws, idx: np.ndarray) -> ThetaDraws:
    return draws.take(idx)


def irmcmc_cv_posteriors(model: ModelSpec | InverseModel, data: Dataset | None, config: ChainConfig,
                         stream: SeededStream, *, return_details: bool = False, **model_kw):
    """Leave-one-out inverse cross-validation posteriors of every site by IRMCMC.

    Returns a list of :class:`CvPosterior` (one per site, ``M*R`` draws each).
    """
    im = model if isinstance(model, InverseModel) else InverseModel(model, data, **model_kw)
    n, q = im.n, im.q
    M, R = config.n_resample, config.n_second_stage_per_theta
    Q = config.quadrature_points
    istar = select_istar(im.data) if config.istar is None else int(config.istar)

    # stage 1: pivot chain on (theta, held-out covariate at i*)
    mode = find_mode(im)
    v0 = im.heldout_start(mode[0], mode[1:1 + q], istar)
    mode_draw = im.draws_from_coords(mode)
    a0, b0, _ = im.prior_bounds(mode_draw.alpha, mode_draw.coef, istar)
    _, w0, cell0 = _grid_conditional(im, mode_draw, np.array([istar]), a0, b0, Q)
    nodes0 = _midpoint_nodes(a0, b0, Q)[0]
    sd0 = np.sqrt(np.maximum((w0[0][:, None] * (nodes0 - (w0[0][:, None] * nodes0).sum(0)) ** 2).sum(0), 0))
    sd0 = np.where(sd0 > 0, sd0, np.maximum(cell0[0], 1e-3))
    extra_labels = [f"{c}_tilde" for c in im.model.covariates]
    scales = _initial_scales(im, mode, config.step_scales, extra_labels, 0.5 * sd0)
    init = np.concatenate([mode, v0])
    target = lambda c: im.log_heldout(c, istar)  # noqa: E731
    s1 = stream.derive("stage=pivot")
    res = run_tmcmc(s1, init, target, scales, config.n_first_stage, config.first_burn)
    log.debug("%s pivot chain (site %d) acceptance %.3f", im.model.name, istar + 1, res.acceptance)
    draws = im.draws_from_coords(res.draws[:, :im.dim])
    pivot_values = res.draws[:, im.dim:]
    if im.pinned[istar]:
        a_p, _, _ = im.prior_bounds(draws.alpha, draws.coef, istar)
        pivot_values = a_p

    # resampling
    N = len(draws)
    cache: dict = {}
    selected = np.empty((n, M), dtype=np.int64)
    ess = np.empty(n)
    for i in range(n):
        lw = log_importance_weights(im, draws, i, istar, Q, cache)
        if not np.isfinite(lw).any():
            raise SiteFailure(i, f"all importance weights are zero under {im.model.name}")
        w = np.exp(lw - lw[np.isfinite(lw)].max())
        w = np.where(np.isfinite(w), w, 0.0)
        p = w / w.sum()
        ess[i] = 1.0 / float((p ** 2).sum())
        rng = stream.derive(f"site={i + 1}").derive("stage=resample").generator
        positive = int((p > 0).sum())
        if positive >= M:
            selected[i] = rng.choice(N, size=M, replace=False, p=p)
        else:
            log.warning("site %d: only %d positive weights for %d resamples; drawing with replacement",
                        i + 1, positive, M)
            selected[i] = rng.choice(N, size=M, replace=True, p=p)

    samples = _second_stage(im, draws, selected, config, stream)
    posts = [CvPosterior.from_samples(i, samples[i], weight_ess=float(ess[i]),
                                      pivot=istar, pivot_acceptance=res.acceptance)
             for i in range(n)]
    if return_details:
        return posts, {"istar": istar, "draws": draws, "selected": selected,
                       "pivot_values": pivot_values, "pivot_acceptance": res.acceptance}
    return posts


def _second_stage(im: InverseModel, draws: ThetaDraws, selected: np.ndarray,
                  config: ChainConfig, stream: SeededStream) -> np.ndarray:
    """Conditional TMCMC for every site at once; returns ``(n, M*R, q)`` draws."""
    n, q = im.n, im.q
    M, R = selected.shape[1], config.n_second_stage_per_theta
    burn = config.second_stage_initial_burn
    Q = config.quadrature_points
    T = burn + M * R
    sites = np.arange(n)

    # per (site, resample) parameter rows
    flat = draws.take(selected.ravel())
    site_rep = np.repeat(sites, M)
    a_all, b_all, ok_all = im.prior_bounds(flat.alpha, flat.coef, site_rep)
    a_all = a_all.reshape(n, M, q)
    b_all = b_all.reshape(n, M, q)
    gpw_all = None
    if im.model.is_gp:
        gpw_all = np.empty((n, M, n - 1))
        for i in range(n):
            rows = flat.take(slice(i * M, (i + 1) * M))
            gpw_all[i] = im._gp_terms(rows, i)[0]

    # per-site randomness, drawn up front
    eps = np.empty((n, T))
    signs = np.empty((n, T, q))
    logu = np.empty((n, T))
    unif = np.empty((n, T, 1 + q))
    for i in range(n):
        g = stream.derive(f"site={i + 1}").derive("stage=conditional").generator
        eps[i] = np.abs(g.standard_normal(T))
        signs[i] = g.integers(0, 2, size=(T, q)) * 2 - 1
        logu[i] = np.log(g.random(T))
        unif[i] = g.random((T, 1 + q))

    def rows_at(j: int) -> ThetaDraws:
        return flat.take(sites * M + j)

    def gpw_at(j: int):
        return None if gpw_all is None else gpw_all[:, j]

    def reseed(mask, j, rows, a, b, t):
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            return
        sub = rows.take(idx)
        gw = None if gpw_all is None else gpw_all[idx, j]
        nodes, w, cell = _grid_conditional(im, sub, idx, a[idx], b[idx], Q, gp_weights=gw)
        cdf = np.cumsum(w, axis=1)
        pick = np.minimum((cdf < unif[idx, t, :1]).sum(axis=1), w.shape[1] - 1)
        centre = nodes[np.arange(idx.size), pick]
        cur[idx] = np.clip(centre + (unif[idx, t, 1:] - 0.5) * cell,
                           a[idx] + 1e-12 * (b[idx] - a[idx]), b[idx])

    def logp(vals, rows, a, b, j):
        ll = im.site_loglik_at(rows, sites, vals[:, None, :], gp_weights=gpw_at(j))[:, 0]
        inside = np.all((vals > a) & (vals < b), axis=1)
        with np.errstate(divide="ignore"):
            lpr = -np.log(b - a).sum(axis=1)
        return np.where(inside, ll + lpr, -np.inf)

    pinned = im.pinned
    j = 0
    rows = rows_at(0)
    a, b = a_all[:, 0], b_all[:, 0]
    cur = 0.5 * (a + b)
    reseed(~pinned, 0, rows, a, b, 0)
    cur[pinned] = a[pinned]
    lp_cur = logp(cur, rows, a, b, 0)

    # initial per-site scales from the discretized conditional
    nodes, w, cell = _grid_conditional(im, rows, sites, a, b, Q, gp_weights=gpw_at(0))
    mean = (w[..., None] * nodes).sum(1)
    sd = np.sqrt((w[..., None] * (nodes - mean[:, None, :]) ** 2).sum(1))
    scale = np.where(sd > 0, 1.5 * sd, np.maximum(cell, 1e-6))
    mult = np.ones(n)
    window = 100
    acc = np.zeros(n)
    n_reseed = np.zeros(n, dtype=np.int64)

    out = np.empty((n, M * R, q))
    for t in range(T):
        if t >= burn:
            jj = (t - burn) // R
            if jj != j:
                j = jj
                rows = rows_at(j)
                a, b = a_all[:, j], b_all[:, j]
                bad = ~np.all((cur > a) & (cur < b), axis=1) & ~pinned
                n_reseed += bad
                reseed(bad, j, rows, a, b, t)
                cur[pinned] = a[pinned]
                lp_cur = logp(cur, rows, a, b, j)
        step = (scale * mult[:, None]) * signs[:, t] * eps[:, t, None]
        prop = cur + step
        lp_prop = logp(prop, rows, a, b, j)
        accept = (logu[:, t] < lp_prop - lp_cur) & ~pinned
        cur = np.where(accept[:, None], prop, cur)
        lp_cur = np.where(accept, lp_prop, lp_cur)
        if t < burn:
            acc += accept
            if (t + 1) % window == 0:
                rate = acc / window
                mult = np.where(rate < 0.15, mult * 0.7, np.where(rate > 0.5, mult * 1.4, mult))
                acc[:] = 0
        else:
            out[:, t - burn] = cur
    log.debug("%s second stage: reseeds per site %s", im.model.name, n_reseed.tolist())
    return out


def direct_cv_chain(im: InverseModel, site: int, n_iter: int, burn: int,
                    stream: SeededStream, step_scales: dict[str, float] | None = None) -> np.ndarray:
    """Single long TMCMC chain on (theta, held-out covariate) at one site.

    Used as the reference against which IRMCMC output is checked.
    """
    cfg = ChainConfig(n_first_stage=n_iter, first_burn=burn, n_resample=1,
                      step_scales=step_scales or {}, istar=site)
    mode = find_mode(im)
    q = im.q
    v0 = im.heldout_start(mode[0], mode[1:1 + q], site)
    md = im.draws_from_coords(mode)
    a0, b0, _ = im.prior_bounds(md.alpha, md.coef, site)
    extra = 0.05 * (b0[0] - a0[0])
    scales = _initial_scales(im, mode, cfg.step_scales,
                             [f"{c}_tilde" for c in im.model.covariates], np.maximum(extra, 1e-3))
    res = run_tmcmc(stream, np.concatenate([mode, v0]), lambda c: im.log_heldout(c, site),
                    scales, n_iter, burn)
    vals = res.draws[:, im.dim:]
    if im.pinned[site]:
        d = im.draws_from_coords(res.draws[:, :im.dim])
        vals = im.prior_bounds(d.alpha, d.coef, site)[0]
    return vals[:, 0] if q == 1 else vals
