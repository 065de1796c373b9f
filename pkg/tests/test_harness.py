import json
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from enkbf_nmpc.fbsde import read_csv
from enkbf_nmpc.harness import (ConfigError, ExperimentConfig, apply_overrides, config_from_string, config_to_string,
                                default_config, load_config, run_fixed_horizon_experiment, run_linear_consistency_check,
                                run_mpc_experiment, save_config)
from enkbf_nmpc.harness.cli import main
from enkbf_nmpc.harness.experiments import _order_free_stats

TINY_MPC = dict(horizon=0.1, replan_interval=0.05, dt=0.01, M=8, K=8, n_iter=2, duration=0.1, repetitions=3)


# -- configuration ------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**63), dt=st.sampled_from([1e-3, 2e-3, 5e-3]), weight=st.floats(0, 1e3),
       reps=st.integers(1, 10**4), kind=st.sampled_from(["fixed-horizon", "mpc", "riccati-check", "filter-check"]),
       warm=st.booleans(), mean=st.lists(st.floats(-10, 10), min_size=2, max_size=2))
def test_config_round_trip(seed, dt, weight, reps, kind, warm, mean):
    cfg = default_config(kind).replace(seed=seed, dt=dt, cost_weight=weight, repetitions=reps, warm_start=warm,
                                       init_mean=mean)
    assert config_from_string(config_to_string(cfg)) == cfg


def test_config_file_round_trip(tmp_path):
    cfg = default_config("mpc").replace(obs_cov=0.1, out_dir=str(tmp_path / "x"))
    save_config(cfg, tmp_path / "c.ini")
    assert load_config(tmp_path / "c.ini") == cfg


def test_partial_file_keeps_kind_defaults():
    cfg = config_from_string("[experiment]\nkind = mpc\n[model]\nobs_cov = 0.1  # smaller observation error\n")
    assert cfg.kind == "mpc" and cfg.obs_cov == 0.1 and cfg.horizon == 0.5 and cfg.repetitions == 100


def test_linear_filter_check_alias():
    assert config_from_string("[experiment]\nkind = linear-filter-check\n").kind == "filter-check"


@pytest.mark.parametrize("text", [
    "[experiment]\nkind = sideways\n",
    "[experiment]\nseeds = 3\n",
    "[nonsense]\nkind = mpc\n",
    "[solver]\nM = many\n",
    "[solver]\nM = 0\n",
    "[solver]\ndt = 0.3\nhorizon = 1.0\n",
    "[mpc]\nwarm_start = maybe\n",
    "[model]\ninit_mean = 3\n",
    "[experiment]\nkind = mpc\n[mpc]\nreplan_interval = 0.7\n",
    "[experiment\n",
])
def test_invalid_configs_are_rejected(text):
    with pytest.raises(ConfigError):
        config_from_string(text)


def test_overrides():
    cfg = apply_overrides(default_config("mpc"), {"seed": "9", "obs_cov": 0.1, "warm_start": "false"})
    assert (cfg.seed, cfg.obs_cov, cfg.warm_start) == (9, 0.1, False)
    with pytest.raises(ConfigError):
        apply_overrides(cfg, {"colour": "blue"})


def test_missing_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")


def test_checked_in_configs_load():
    from pathlib import Path
    for path in sorted((Path(__file__).parents[1] / "configs").glob("*.ini")):
        load_config(path)


# -- runners ------------------------------------------------------------------

def test_fixed_horizon_zero_cost_gives_flat_zero_gains(tmp_path):
    cfg = default_config("fixed-horizon").replace(cost_weight=0.0, terminal_weight=0.0, M=8, K=8, horizon=0.2,
                                                  dt=0.01, n_iter=2, out_dir=str(tmp_path))
    res = run_fixed_horizon_experiment(cfg)
    header, rows = read_csv(tmp_path / "feedback_iter2.csv")
    assert header == ["t", "GtLambda_0_0", "GtLambda_0_1"]
    assert np.all(rows[:, 1:] == 0.0)
    assert res.passed and res.metrics["final_rel_change"] == 0.0


def test_fixed_horizon_desk_scale_smoke(tmp_path):
    cfg = default_config("fixed-horizon").replace(M=16, K=16, horizon=1.0, out_dir=str(tmp_path))
    t0 = time.perf_counter()
    res = run_fixed_horizon_experiment(cfg)
    assert time.perf_counter() - t0 < 10.0
    assert res.metrics["gains_finite"]
    for i in (1, 2, 3):
        header, rows = read_csv(tmp_path / f"fan_iter{i}.csv")
        assert header[:3] == ["t", "mean_0", "q05_0"] and rows.shape == (1001, 13)
        assert np.all(np.isfinite(rows))
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["kind"] == "fixed-horizon" and "wall_time_s" in summary
    assert load_config(tmp_path / "config.ini") == cfg


def test_linear_check_zero_cost_is_exact(tmp_path):
    cfg = default_config("riccati-check").replace(cost_weight=0.0, terminal_weight=0.0, M=8, K=8, dt=0.01,
                                                  out_dir=str(tmp_path))
    res = run_linear_consistency_check(cfg)
    assert res.metrics["Lambda_sup_error"] == 0.0 and res.metrics["lambda_sup_error"] == 0.0
    assert res.passed


def test_linear_check_needs_a_linear_model(tmp_path):
    with pytest.raises(ConfigError):
        run_linear_consistency_check(default_config("riccati-check").replace(model="pendulum", out_dir=str(tmp_path)))


def test_runner_rejects_wrong_kind(tmp_path):
    with pytest.raises(ConfigError):
        run_mpc_experiment(default_config("fixed-horizon").replace(out_dir=str(tmp_path)))


def test_mpc_outputs_and_determinism(tmp_path):
    outs = []
    for name in ("a", "b"):
        cfg = default_config("mpc").replace(out_dir=str(tmp_path / name), batch_size=2, **TINY_MPC)
        res = run_mpc_experiment(cfg)
        outs.append(res)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    assert [str(f) for f in files_a] == ["aggregate.csv", "reps/rep_0000.csv", "reps/rep_0001.csv", "reps/rep_0002.csv"]
    for f in files_a:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    header, rows = read_csv(tmp_path / "a" / "aggregate.csv")
    assert header[:4] == ["t", "mean_0_avg", "mean_0_var", "abs_mean_0_avg"]
    reps = np.stack([read_csv(tmp_path / "a" / "reps" / f"rep_{r:04d}.csv")[1] for r in range(3)])
    np.testing.assert_allclose(rows[:, 1], reps[:, :, 3].mean(axis=0), rtol=1e-14)
    np.testing.assert_allclose(rows[:, 2], reps[:, :, 3].var(axis=0), rtol=1e-10, atol=1e-18)
    assert outs[0].metrics["final_abs_mean_0"] == rows[-1, 3]


def test_aggregate_is_invariant_under_repetition_order():
    v = np.random.default_rng(0).normal(size=(100, 50, 2)) * np.logspace(-8, 8, 100)[:, None, None]
    m1, s1 = _order_free_stats(v)
    p = np.random.default_rng(1).permutation(100)
    m2, s2 = _order_free_stats(v[p])
    np.testing.assert_array_equal(m1, m2)
    np.testing.assert_array_equal(s1, s2)


# -- command line -------------------------------------------------------------

def test_cli_exit_codes(tmp_path, capsys):
    assert main(["filter-check", "--out", str(tmp_path / "f"), "--quiet"]) == 0
    assert capsys.readouterr().out == ""
    small = ["--set", "M=8", "--set", "K=8", "--set", "dt=0.01"]
    assert main(["riccati-check", "--out", str(tmp_path / "r"), "--set", "gain_tol=1e-12", *small, "--quiet"]) == 1
    assert main(["riccati-check", "--out", str(tmp_path / "r"), "--set", "M=0"]) == 2
    assert "configuration error" in capsys.readouterr().err
    assert main(["mpc", "--config", str(tmp_path / "absent.ini")]) == 2
    cfg = tmp_path / "fh.ini"
    save_config(default_config("fixed-horizon"), cfg)
    assert main(["mpc", "--config", str(cfg)]) == 2


def test_cli_flags_reach_the_config(tmp_path):
    cfg_path = tmp_path / "m.ini"
    save_config(default_config("mpc").replace(**TINY_MPC), cfg_path)
    code = main(["mpc", "--config", str(cfg_path), "--seed", "11", "--reps", "2", "--out", str(tmp_path / "o"),
                 "--quiet"])
    assert code in (0, 1)
    used = load_config(tmp_path / "o" / "config.ini")
    assert (used.seed, used.repetitions) == (11, 2)
    assert len(list((tmp_path / "o" / "reps").glob("*.csv"))) == 2
