import json
import math

import numpy as np
import pytest

from invselect import cli, harness
from invselect.harness import ExperimentConfig, generate_dataset, replicate_error_rates, resweep, run_experiment
from invselect.models import ModelSpec, default_roster
from invselect.samplers import ChainConfig
from invselect.streams import InvalidParameterError, SeededStream

TINY = dict(n_first_stage=1500, first_burn=500, n_resample=100, n_second_stage_per_theta=5,
            second_stage_initial_burn=200)
ROSTER = [ModelSpec(1, "poisson", "log"), ModelSpec(3, "geometric", "logit"), ModelSpec(5, "geometric", "probit")]


def tiny_config(**kw):
    base = dict(n=6, m=5, roster=[s.to_dict() for s in ROSTER], chain=TINY, gibbs_iter=4000, gibbs_burn=400)
    base.update(kw)
    return ExperimentConfig.from_dict(base)


def test_config_defaults_and_roster():
    cfg = ExperimentConfig()
    assert (cfg.n, cfg.m, len(cfg.roster)) == (10, 10, 6)
    assert cfg.chain == ChainConfig.desk()
    assert cfg.true_model_id() == 1
    mis = ExperimentConfig(misspecified=True)
    assert len(mis.roster) == 5 and mis.true_model_id() is None
    two = ExperimentConfig(scenario="two_covariate")
    assert len(two.roster) == 18
    xz = [s for s in two.roster if s.covariate_set.value == "xz"]
    assert all(two.alpha_for(s) == 5.0 for s in xz)
    assert ExperimentConfig(scenario="two_covariate", linear_only=True).roster == default_roster(
        "two_covariate", linear_only=True)


def test_config_validation_and_roundtrip():
    with pytest.raises(InvalidParameterError):
        ExperimentConfig(roster=[ROSTER[0]])
    with pytest.raises(InvalidParameterError):
        ExperimentConfig(roster=ROSTER, misspecified=True)
    with pytest.raises(InvalidParameterError):
        ExperimentConfig.from_dict({"bogus": 1})
    cfg = tiny_config(root_seed=17)
    assert ExperimentConfig.from_dict(json.loads(cfg.to_json())) == cfg
    assert cfg.with_seed(3).root_seed == 3 and cfg.with_seed(3).chain == cfg.chain


def test_generate_dataset_support_and_determinism():
    cfg = ExperimentConfig(scenario="two_covariate", n=200)
    d, truth = generate_dataset(cfg, SeededStream(4, ("data",)))
    assert np.all(np.abs(d.X) < 1) and np.all((d.Z > 0) & (d.Z < 2))
    assert -1 < truth.alpha0 < 1 and truth.gamma0 is not None
    d2, _ = generate_dataset(cfg, SeededStream(4, ("data",)))
    assert np.array_equal(d.Y, d2.Y) and np.array_equal(d.X, d2.X)


def test_generate_dataset_poisson_mean_oracle():
    cfg = ExperimentConfig(n=1000, m=100, true_params={"alpha0": 0.0, "beta0": 0.0})
    d, _ = generate_dataset(cfg, SeededStream(1))
    se = math.sqrt(1.0 / d.Y.size)
    assert abs(d.Y.mean() - 1.0) < 3 * se


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return run_experiment(tiny_config(root_seed=5), out), out


def test_run_outputs_layout(tiny_run):
    res, out = tiny_run
    assert res.ok
    for name in ("config.json", "dataset.json", "evidence.json", "decisions.csv", "summary.json",
                 "discrepancy_1.json", "discrepancy_3.json", "discrepancy_5.json"):
        assert (out / name).exists(), name
    assert not (out / "failures.json").exists()
    header = (out / "decisions.csv").read_text().splitlines()[0]
    assert header == "beta,cfdr_t1,cfnr_t1,cfdr_t2,cfnr_t2"
    summ = json.loads((out / "summary.json").read_text())
    assert abs(sum(summ["model_posterior"].values()) - 1) < 1e-9
    assert summ["validation"]["true_model_id"] == 1


def test_run_sweep_invariants(tiny_run):
    res, _ = tiny_run
    for s in res.table.sweeps.values():
        assert np.all(np.diff(s.cfdr) <= 1e-15) and np.all(np.diff(s.cfnr) >= -1e-15)


def test_run_deterministic(tiny_run, tmp_path):
    _, out = tiny_run
    run_experiment(tiny_config(root_seed=5), tmp_path)
    for name in ("decisions.csv", "summary.json", "evidence.json"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_resweep_reproduces_decisions(tiny_run, tmp_path):
    _, out = tiny_run
    for name in ("config.json", "evidence.json", "discrepancy_1.json", "discrepancy_3.json", "discrepancy_5.json"):
        (tmp_path / name).write_bytes((out / name).read_bytes())
    resweep(tmp_path)
    assert (tmp_path / "decisions.csv").read_bytes() == (out / "decisions.csv").read_bytes()


def test_forced_dominance(monkeypatch):
    # inject PBFs: model 3 dominates, the rest sit 1000 log units below
    def fake(mean_log_cpo, n):
        return {k: (0.0 if k == 3 else -1e3) for k in mean_log_cpo}, 3

    monkeypatch.setattr(harness.ev, "all_log_pbf", fake)
    res = run_experiment(tiny_config(root_seed=2))
    tab = res.table
    for col in ("t1", "t2"):
        v3 = tab.sweeps[col].v[3]
        assert all(tab.sweeps[col].v[k] == 1.0 for k in (1, 5))
        for g, b in enumerate(tab.beta_grid):
            acc = tab.accepted(col, g)
            assert acc == ([3] if b >= v3 else [])


def test_partial_failure_manifest(monkeypatch, tmp_path):
    real = harness.irmcmc_cv_posteriors

    def flaky(im, data, cfg, stream, **kw):
        if im.model.id == 5:
            raise RuntimeError("site 2: injected failure")
        return real(im, data, cfg, stream, **kw)

    monkeypatch.setattr(harness, "irmcmc_cv_posteriors", flaky)
    res = run_experiment(tiny_config(root_seed=1), tmp_path)
    assert not res.ok and res.table is not None
    manifest = json.loads((tmp_path / "failures.json").read_text())
    assert manifest[0]["model"] == 5 and "site 2" in manifest[0]["error"]
    assert sorted(res.table.model_ids) == [1, 3]


def _cfg_file(tmp_path, **kw):
    p = tmp_path / "cfg.json"
    d = tiny_config(**kw).to_dict()
    p.write_text(json.dumps(d))
    return str(p)


def test_cli_generate_run_sweep(tmp_path, capsys):
    cfg = _cfg_file(tmp_path)
    assert cli.main(["generate", "--config", cfg, "--seed", "9", "--out", str(tmp_path / "g")]) == 0
    ds = tmp_path / "g" / "dataset.json"
    assert ds.exists()
    assert cli.main(["run", "--config", cfg, "--seed", "9", "--out", str(tmp_path / "r"),
                     "--dataset", str(ds)]) == 0
    before = (tmp_path / "r" / "decisions.csv").read_bytes()
    (tmp_path / "r" / "decisions.csv").unlink()
    assert cli.main(["sweep", "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "decisions.csv").read_bytes() == before
    saved = json.loads((tmp_path / "r" / "config.json").read_text())
    assert saved["root_seed"] == 9


def test_cli_partial_failure_exit_code(tmp_path, monkeypatch):
    real = harness.irmcmc_cv_posteriors

    def flaky(im, data, cfg, stream, **kw):
        if im.model.id == 3:
            raise RuntimeError("injected")
        return real(im, data, cfg, stream, **kw)

    monkeypatch.setattr(harness, "irmcmc_cv_posteriors", flaky)
    code = cli.main(["run", "--config", _cfg_file(tmp_path), "--out", str(tmp_path / "r")])
    assert code == 2 and (tmp_path / "r" / "failures.json").exists()


def test_cli_usage_error(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 1


def test_cli_misspecified_flag(tmp_path):
    code = cli.main(["generate", "--misspecified", "--out", str(tmp_path)])
    assert code == 0
    saved = json.loads((tmp_path / "config.json").read_text())
    assert saved["misspecified"] and len(saved["roster"]) == 5


def test_replicates_identical_data_equal_single_run():
    cfg = tiny_config(root_seed=4, n=5)
    single = run_experiment(cfg)
    est = replicate_error_rates(cfg, 2, identical=True)
    for c in ("t1", "t2"):
        np.testing.assert_allclose(est.pbfdr[c], single.table.sweeps[c].cfdr)
        np.testing.assert_allclose(est.pbfnr[c], single.table.sweeps[c].cfnr)
        assert np.all(est.se_fdr[c] == 0)


def test_replicates_bounds_and_validation(tmp_path):
    cfg = tiny_config(n=5, m=4)
    with pytest.raises(InvalidParameterError):
        replicate_error_rates(cfg, 1)
    est = replicate_error_rates(cfg, 3, out_dir=tmp_path)
    for c in ("t1", "t2"):
        assert np.all((est.pbfdr[c] >= 0) & (est.pbfdr[c] <= 1))
        assert np.all((est.pbfnr[c] >= 0) & (est.pbfnr[c] <= 1))
    assert len(set(est.seeds)) == 3
    assert (tmp_path / "replicates.csv").exists()


def test_replicate_se_scaling_oracle(monkeypatch):
    # replace the pipeline with iid random rates so the SE scaling can be checked cheaply
    class FakeSweep:
        def __init__(self, rng):
            self.cfdr = rng.uniform(size=99)
            self.cfnr = rng.uniform(size=99)

    class FakeResult:
        def __init__(self, seed):
            rng = np.random.default_rng(seed)
            self.table = type("T", (), {"sweeps": {"t1": FakeSweep(rng), "t2": FakeSweep(rng)}})()

    monkeypatch.setattr(harness, "run_experiment", lambda cfg, out=None: FakeResult(cfg.root_seed))
    cfg = tiny_config()
    se4 = replicate_error_rates(cfg, 4).se_fdr["t1"].mean()
    se16 = replicate_error_rates(cfg, 16).se_fdr["t1"].mean()
    # SE of the mean of uniforms: sqrt(1/12 / S); ratio 2 up to sampling noise of the SD estimate
    assert 1.5 < se4 / se16 < 2.7
