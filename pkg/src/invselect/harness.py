"""Simulation scenarios, experiment configuration and the end-to-end pipeline."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
import traceback
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import evidence as ev
from . import testing as mt
from .models import CovariateSet, Dataset, Family, InverseModel, Link, ModelSpec, RegressionForm, default_roster
from .samplers import ChainConfig, irmcmc_cv_posteriors, sample_forward_posterior
from .streams import InvalidParameterError, SeededStream

log = logging.getLogger(__name__)

__all__ = [
    "ExperimentConfig", "TruthAssignment", "ExperimentResult", "generate_dataset", "run_experiment",
    "replicate_error_rates", "true_model_spec", "write_outputs", "resweep",
]

SCENARIOS = ("single_covariate", "two_covariate")


def true_model_spec(scenario: str) -> tuple:
    """(family, link, form, covariate set) of the data-generating model."""
    cs = CovariateSet.X if scenario == "single_covariate" else CovariateSet.XZ
    return (Family.POISSON, Link.LOG, RegressionForm.LINEAR, cs)


def _signature(spec: ModelSpec) -> tuple:
    return (spec.family, spec.link, spec.regression_form, spec.covariate_set)


@dataclass
class ExperimentConfig:
    scenario: str = "single_covariate"
    n: int = 10
    m: int = 10
    roster: list[ModelSpec] | None = None
    linear_only: bool = False
    misspecified: bool = False
    dirichlet_alpha: dict[int, float] | None = None
    dirichlet_alpha_xz: float = 5.0
    c: float = 1.0
    alpha_level: float = 0.05
    beta_grid: list[float] | None = None
    preset: str = "desk"
    chain: ChainConfig | None = None
    gibbs_iter: int = 100000
    gibbs_burn: int = 10000
    root_seed: int = 0
    replicates: int = 10
    true_params: dict[str, float] | None = None
    c1: float = 1.0
    c2: float = 100.0
    dump_chains: bool = False

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise InvalidParameterError(f"scenario must be one of {SCENARIOS}")
        if self.preset not in ("desk", "paper"):
            raise InvalidParameterError("preset must be 'desk' or 'paper'")
        if self.n < 2 or self.m < 2:
            raise InvalidParameterError("need n >= 2 and m >= 2")
        if self.chain is None:
            self.chain = ChainConfig.desk() if self.preset == "desk" else ChainConfig.paper()
        if self.roster is None:
            roster = default_roster(self.scenario, linear_only=self.linear_only)
            if self.misspecified:
                roster = [s for s in roster if _signature(s) != true_model_spec(self.scenario)]
            self.roster = roster
        elif self.misspecified:
            if any(_signature(s) == true_model_spec(self.scenario) for s in self.roster):
                raise InvalidParameterError("misspecified roster must not contain the true model")
        ids = [s.id for s in self.roster]
        if len(ids) < 2 or len(set(ids)) != len(ids):
            raise InvalidParameterError("roster needs at least two models with unique ids")

    @property
    def grid(self) -> np.ndarray:
        return mt.default_beta_grid() if self.beta_grid is None else np.asarray(self.beta_grid, dtype=float)

    def alpha_for(self, spec: ModelSpec) -> float:
        if self.dirichlet_alpha and spec.id in self.dirichlet_alpha:
            return float(self.dirichlet_alpha[spec.id])
        return self.dirichlet_alpha_xz if spec.covariate_set == CovariateSet.XZ else 1.0

    def true_model_id(self) -> int | None:
        for s in self.roster:
            if _signature(s) == true_model_spec(self.scenario):
                return s.id
        return None

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["roster"] = [s.to_dict() for s in self.roster]
        d["chain"] = self.chain.to_dict()
        if self.dirichlet_alpha is not None:
            d["dirichlet_alpha"] = {str(k): v for k, v in self.dirichlet_alpha.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidParameterError(f"unknown config fields: {sorted(unknown)}")
        preset = d.get("preset", "desk")
        if d.get("roster") is not None:
            d["roster"] = [ModelSpec.from_dict(s) for s in d["roster"]]
        if d.get("chain") is not None:
            base = ChainConfig.desk() if preset == "desk" else ChainConfig.paper()
            merged = base.to_dict()
            merged.update(d["chain"])
            d["chain"] = ChainConfig.from_dict(merged)
        if d.get("dirichlet_alpha") is not None:
            d["dirichlet_alpha"] = {int(k): float(v) for k, v in d["dirichlet_alpha"].items()}
        return cls(**d)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        d = self.to_dict()
        d["root_seed"] = int(seed)
        return ExperimentConfig.from_dict(d)


@dataclass
class TruthAssignment:
    alpha0: float
    beta0: float
    gamma0: float | None
    true_model_id: int | None

    def to_dict(self) -> dict:
        return asdict(self)


def generate_dataset(config: ExperimentConfig, stream: SeededStream | None = None) -> tuple[Dataset, TruthAssignment]:
    """Draw a dataset from the scenario's Poisson log-linear truth."""
    stream = SeededStream(config.root_seed, ("data",)) if stream is None else stream
    rng = stream.generator
    fixed = config.true_params or {}
    two = config.scenario == "two_covariate"
    a0 = float(fixed.get("alpha0", rng.uniform(-1, 1)))
    b0 = float(fixed.get("beta0", rng.uniform(-1, 1)))
    g0 = float(fixed.get("gamma0", rng.uniform(-1, 1))) if two else None
    X = rng.uniform(-1, 1, config.n)
    Z = rng.uniform(0, 2, config.n) if two else None
    lp = a0 + b0 * X + (g0 * Z if two else 0.0)
    Y = rng.poisson(np.exp(lp)[:, None], size=(config.n, config.m))
    return Dataset(X=X, Y=Y, Z=Z), TruthAssignment(a0, b0, g0, config.true_model_id())


@dataclass
class ModelOutcome:
    spec: ModelSpec
    mean_log_cpo: float | None = None
    log_cpo: np.ndarray | None = None
    log_cpo_block: np.ndarray | None = None
    reports: dict[str, mt.DiscrepancyReport] = field(default_factory=dict)
    error: str | None = None
    seconds: float = 0.0


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    dataset: Dataset
    truth: TruthAssignment | None
    evidence: ev.EvidenceReport | None
    outcomes: dict[int, ModelOutcome]
    table: mt.DecisionTable | None
    validation: dict | None
    failures: list[dict]

    @property
    def ok(self) -> bool:
        return not self.failures

    def summary(self) -> dict:
        cfg = self.config
        active = [k for k, o in self.outcomes.items() if o.error is None]
        out = {
            "scenario": cfg.scenario, "n": cfg.n, "m": cfg.m, "root_seed": cfg.root_seed,
            "misspecified": cfg.misspecified,
            "models": {str(k): self.outcomes[k].spec.name for k in sorted(self.outcomes)},
            "failures": self.failures,
        }
        if self.evidence is not None:
            post = self.evidence.model_posterior
            out["model_posterior"] = {str(k): post[k] for k in sorted(post)}
            out["max_posterior_model"] = max(sorted(post), key=lambda k: post[k])
            out["reference_model"] = self.evidence.reference
        if self.table is not None:
            tab = self.table
            out["coverage"] = {
                col: {str(k): self._coverage(k, col) for k in sorted(active)} for col in ("t1", "t2")}
            out["decisions"] = tab.to_dict()
            out["acceptance_order"] = {col: tab.acceptance_order(col) for col in ("t1", "t2")}
            out["cfdr_beta_min"] = {col: float(tab.sweeps[col].cfdr[0]) for col in ("t1", "t2")}
        out["validation"] = self.validation
        return _round_floats(out)

    def _coverage(self, k: int, col: str) -> float:
        kinds = mt.discrepancy_kinds(self.outcomes[k].spec)
        return self.outcomes[k].reports[kinds[0 if col == "t1" else 1]].coverage


def _round_floats(obj, digits: int = 12):
    if isinstance(obj, float):
        return float(f"{obj:.{digits}g}") if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _round_floats(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v, digits) for v in obj]
    if isinstance(obj, np.generic):
        return _round_floats(obj.item(), digits)
    return obj


def _run_model(spec: ModelSpec, data: Dataset, cfg: ExperimentConfig, root: SeededStream,
               dump_dir: Path | None) -> ModelOutcome:
    t0 = time.perf_counter()
    out = ModelOutcome(spec)
    base = root.derive(f"model={spec.id}")
    try:
        im = InverseModel(spec, data, c1=cfg.c1, c2=cfg.c2)
        draws = sample_forward_posterior(im, cfg.chain, base.derive("stage=forward"))
        if dump_dir is not None:
            _dump_chain(dump_dir / f"chain_{spec.id}_forward.csv", im, draws)
        out.log_cpo = ev.estimate_log_cpo(im, None, draws)
        out.mean_log_cpo = float(np.mean(out.log_cpo))
        out.log_cpo_block = ev.estimate_log_cpo(im, None, draws, strict=False, target="block")
        posts = irmcmc_cv_posteriors(im, None, cfg.chain, base.derive("stage=irmcmc"))
        for kind in sorted(set(mt.discrepancy_kinds(spec))):
            out.reports[kind] = mt.build_discrepancy_report(spec, data, posts, kind, cfg.c, cfg.alpha_level)
    except Exception as exc:  # surfaced through the failure manifest
        out.error = f"{type(exc).__name__}: {exc}"
        log.error("model %d (%s) failed: %s", spec.id, spec.name, out.error)
        log.debug("%s", traceback.format_exc())
    out.seconds = time.perf_counter() - t0
    return out


def _dump_chain(path: Path, im: InverseModel, draws) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = ["alpha"] + [("beta" if c == "x" else "gamma") for c in im.model.covariates]
    cols = [draws.alpha[:, None], draws.coef]
    if draws.omega is not None:
        labels += ["omega"] + [f"eta{i + 1}" for i in range(im.n)]
        cols += [draws.omega[:, None], draws.eta]
    np.savetxt(path, np.hstack(cols), delimiter=",", header=",".join(labels), comments="", fmt="%.10g")


def validation_summary(table: mt.DecisionTable, truth: TruthAssignment | None) -> dict | None:
    """Realized FDR/FNR of the decisions against the simulation truth (not a Bayesian quantity)."""
    if truth is None or truth.true_model_id is None:
        return None
    r = np.array([0 if k == truth.true_model_id else 1 for k in table.model_ids])
    res = {"true_model_id": truth.true_model_id, "note": "realized rates against the simulation truth"}
    for col, s in table.sweeps.items():
        d = s.decisions
        fdr = (d * (1 - r)).sum(1) / np.maximum(d.sum(1), 1)
        fnr = ((1 - d) * r).sum(1) / np.maximum((1 - d).sum(1), 1)
        res[col] = {"fdr": fdr.tolist(), "fnr": fnr.tolist()}
    return res


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None,
                   dataset: Dataset | None = None, truth: TruthAssignment | None = None) -> ExperimentResult:
    """Full pipeline: data, per-model evidence and CV posteriors, model posterior, beta sweep."""
    root = SeededStream(config.root_seed)
    if dataset is None:
        dataset, truth = generate_dataset(config, root.derive("data"))
    if dataset.n != config.n or dataset.m != config.m:
        config = ExperimentConfig.from_dict({**config.to_dict(), "n": dataset.n, "m": dataset.m})
    dump_dir = Path(out_dir) / "chains" if (out_dir is not None and config.dump_chains) else None
    outcomes = {s.id: _run_model(s, dataset, config, root, dump_dir) for s in config.roster}
    failures = [{"model": k, "name": o.spec.name, "error": o.error}
                for k, o in outcomes.items() if o.error is not None]
    active = [k for k, o in outcomes.items() if o.error is None]
    evidence = table = validation = None
    if len(active) >= 2:
        mlc = {k: outcomes[k].mean_log_cpo for k in active}
        alphas = {k: config.alpha_for(outcomes[k].spec) for k in active}
        evidence = ev.build_evidence_report(mlc, dataset.n, alphas, root.derive("gibbs"),
                                            config.gibbs_iter, config.gibbs_burn)
        evidence.extras["diagnostic_block_cpo"] = _block_cpo_diagnostic(outcomes, active, dataset.n, alphas)
        cov = {"t1": {}, "t2": {}}
        for k in active:
            k1, k2 = mt.discrepancy_kinds(outcomes[k].spec)
            cov["t1"][k] = outcomes[k].reports[k1].coverage
            cov["t2"][k] = outcomes[k].reports[k2].coverage
        table = mt.build_decision_table(evidence.model_posterior, cov, config.grid)
        validation = validation_summary(table, truth)
    elif active != list(outcomes):
        failures.append({"model": None, "name": None, "error": "fewer than two models succeeded"})
    result = ExperimentResult(config, dataset, truth, evidence, outcomes, table, validation, failures)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def _block_cpo_diagnostic(outcomes, active, n: int, alphas) -> dict:
    """Model posterior if whole blocks were predicted instead of first counts (not used for decisions)."""
    mlc = {k: float(np.mean(outcomes[k].log_cpo_block)) for k in active}
    if not all(math.isfinite(v) for v in mlc.values()):
        return {"note": "block CPO not finite for some model"}
    pbf, _ = ev.all_log_pbf(mlc, n)
    post = ev.model_posterior_exact(pbf, alphas)
    return {"mean_log_cpo": {str(k): mlc[k] for k in active},
            "model_posterior": {str(k): post[k] for k in active}}


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def write_outputs(result: ExperimentResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.json", result.config.to_json() + "\n")
    ds = result.dataset.to_dict()
    _write(out / "dataset.json", json.dumps(ds, indent=1) + "\n")
    if result.truth is not None:
        _write(out / "truth.json", json.dumps(result.truth.to_dict(), indent=2, sort_keys=True) + "\n")
    if result.evidence is not None:
        rep = result.evidence
        rep.extras["log_cpo"] = {str(k): _round_floats(o.log_cpo.tolist())
                                 for k, o in result.outcomes.items() if o.log_cpo is not None}
        _write(out / "evidence.json", json.dumps(_round_floats(rep.to_dict()), indent=2, sort_keys=True) + "\n")
    for k, o in result.outcomes.items():
        if o.reports:
            payload = {"model": k, "name": o.spec.name,
                       "reports": {kind: r.to_dict() for kind, r in o.reports.items()}}
            _write(out / f"discrepancy_{k}.json", json.dumps(_round_floats(payload), indent=2, sort_keys=True) + "\n")
    if result.table is not None:
        _write(out / "decisions.csv", result.table.to_csv())
    _write(out / "summary.json", json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
    timing = {str(k): round(o.seconds, 2) for k, o in result.outcomes.items()}
    _write(out / "timing.json", json.dumps(timing, indent=2) + "\n")
    if result.failures:
        _write(out / "failures.json", json.dumps(result.failures, indent=2) + "\n")


def resweep(run_dir: str | Path, grid: Sequence[float] | None = None) -> mt.DecisionTable:
    """Recompute the decision table of a finished run from its evidence and discrepancy files."""
    run_dir = Path(run_dir)
    rep = ev.EvidenceReport.from_dict(json.loads((run_dir / "evidence.json").read_text()))
    cfg = ExperimentConfig.from_dict(json.loads((run_dir / "config.json").read_text()))
    grid = cfg.grid if grid is None else grid
    specs = {s.id: s for s in cfg.roster}
    cov = {"t1": {}, "t2": {}}
    for k in rep.model_posterior:
        payload = json.loads((run_dir / f"discrepancy_{k}.json").read_text())
        k1, k2 = mt.discrepancy_kinds(specs[k])
        cov["t1"][k] = payload["reports"][k1]["coverage"]
        cov["t2"][k] = payload["reports"][k2]["coverage"]
    table = mt.build_decision_table(rep.model_posterior, cov, grid)
    _write(run_dir / "decisions.csv", table.to_csv())
    return table


@dataclass
class ReplicateEstimate:
    beta_grid: np.ndarray
    pbfdr: dict[str, np.ndarray]
    pbfnr: dict[str, np.ndarray]
    se_fdr: dict[str, np.ndarray]
    se_fnr: dict[str, np.ndarray]
    seeds: list[int]
    n_failed: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = []
        for c in ("t1", "t2"):
            cols += [f"pbfdr_{c}", f"se_fdr_{c}", f"pbfnr_{c}", f"se_fnr_{c}"]
        w.writerow(["beta"] + cols)
        for g, b in enumerate(self.beta_grid):
            row = [f"{b:.2f}"]
            for c in ("t1", "t2"):
                row += [f"{x:.10f}" for x in (self.pbfdr[c][g], self.se_fdr[c][g], self.pbfnr[c][g], self.se_fnr[c][g])]
            w.writerow(row)
        return buf.getvalue()


def replicate_seed(root_seed: int, s: int) -> int:
    h = hashlib.blake2b(f"{root_seed}/replicate={s}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 1


def replicate_error_rates(config: ExperimentConfig, S: int | None = None, *, identical: bool = False,
                          out_dir: str | Path | None = None) -> ReplicateEstimate:
    """Average cFDR/cFNR over ``S`` independently seeded datasets, with Monte Carlo SEs."""
    S = config.replicates if S is None else S
    if S < 2:
        raise InvalidParameterError("need S >= 2 replicates")
    seeds = [config.root_seed if identical else replicate_seed(config.root_seed, s) for s in range(S)]
    rows = {c: ([], []) for c in ("t1", "t2")}
    failed = 0
    for s, seed in enumerate(seeds):
        sub = None if out_dir is None else Path(out_dir) / f"replicate_{s:03d}"
        res = run_experiment(config.with_seed(seed), sub)
        if res.table is None:
            failed += 1
            continue
        for c in rows:
            rows[c][0].append(res.table.sweeps[c].cfdr)
            rows[c][1].append(res.table.sweeps[c].cfnr)
    if any(len(v[0]) < 1 for v in rows.values()):
        raise RuntimeError("every replicate failed")
    est = {c: tuple(np.array(v) for v in rows[c]) for c in rows}
    k = len(est["t1"][0])

    def se(a):
        return a.std(axis=0, ddof=1) / math.sqrt(k) if k > 1 else np.full(a.shape[1], np.nan)

    out = ReplicateEstimate(config.grid, {c: est[c][0].mean(0) for c in est}, {c: est[c][1].mean(0) for c in est},
                            {c: se(est[c][0]) for c in est}, {c: se(est[c][1]) for c in est}, seeds, failed)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        _write(Path(out_dir) / "replicates.csv", out.to_csv())
    return out
