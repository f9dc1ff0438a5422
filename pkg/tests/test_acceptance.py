"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The end-to-end criteria (7-9) retrain the desk-scale reference model by
default. Set RADIOFLOW_REFERENCE=committed to reuse results/reference instead.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
from test_flow import two_point_closed_form, two_point_pairs
from test_metrics import conv_ssim

from radioflow import cli, flow as F, metrics as Mt, model as M, reference as R
from radioflow.metrics import read_report_csv
from radioflow.sample import SampleConfig, batch_sample, euler_integrate, initial_noise
from radioflow.scene import SceneGenParams, build_dataset
from radioflow.train import ema_update, loss_and_grads

ROOT = Path(__file__).resolve().parents[1]
COMMITTED = ROOT / "results" / "reference"


# -- 1 -----------------------------------------------------------------------


def test_c01_oracle_single_step(criterion):
    with criterion(1, "1-step Euler with the exact field reconstructs x1") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        worst = 0.0
        for k in range(100):
            x1 = rng.random((1, 1, 8, 8))
            x0 = initial_noise(x1.shape, k)
            res = euler_integrate(lambda x, t, c: x1 - x0, np.zeros((1, 2, 8, 8)), SampleConfig(1, 0.0, False, k))
            worst = max(worst, float(np.max(np.abs(res.raw[:, None] - x1))))
        elapsed = time.perf_counter() - t0
        info["detail"] = f"max_err={worst:.2e} runtime={elapsed:.2f}s"
        assert worst < 1e-12
        assert elapsed < 1.0


# -- 2 -----------------------------------------------------------------------


def test_c02_gradient_integrity(criterion):
    with criterion(2, "reverse-mode vs central differences, 8x8 Lite") as info:
        t0 = time.perf_counter()
        cfg = M.ModelConfig.lite(base_channels=4)
        params = M.init_params(cfg, seed=0, out_gain=1.0)
        rng = np.random.default_rng(1)
        sample = F.make_flow_sample(rng.random((2, 1, 8, 8)), rng.random((2, 2, 8, 8)), rng)
        _, grads = loss_and_grads(cfg, params, sample, sample.condition)

        def loss():
            return F.cfm_loss(lambda x, t, c: M.forward(cfg, params, x, t, c).data, sample)

        h, worst, n = 1e-5, 0.0, 0
        for name, p in params.items():
            flat = p.reshape(-1)
            g = grads[name].reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                up = loss()
                flat[i] = old - h
                down = loss()
                flat[i] = old
                fd = (up - down) / (2 * h)
                worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-7))
                n += 1
        elapsed = time.perf_counter() - t0
        info["detail"] = f"params={n} max_rel_err={worst:.2e} runtime={elapsed:.1f}s"
        assert worst < 1e-3
        assert elapsed < 120


# -- 3 -----------------------------------------------------------------------


def test_c03_flow_invariants(criterion):
    with criterion(3, "path endpoints, affinity, t-independent target, loss zero iff match") as info:
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(200):
            x0, x1 = rng.normal(size=(2, 3, 1, 4, 4))
            s, t, lam = rng.random(3)
            worst = max(worst, np.max(np.abs(F.interpolate(x0, x1, 0.0) - x0)), np.max(np.abs(F.interpolate(x0, x1, 1.0) - x1)))
            mix = F.interpolate(x0, x1, lam * s + (1 - lam) * t)
            worst = max(worst, np.max(np.abs(mix - lam * F.interpolate(x0, x1, s) - (1 - lam) * F.interpolate(x0, x1, t))))
            a = F.make_flow_sample(x1, None, np.random.default_rng(int(rng.integers(1 << 30))))
            worst = max(worst, np.max(np.abs(a.u_t - (a.x1 - a.x0))))
            assert F.cfm_loss(lambda x, tt, c: a.x1 - a.x0, a) <= 1e-12
            assert F.cfm_loss(lambda x, tt, c: a.x1 - a.x0 + 1e-4, a) > 1e-12
        info["detail"] = f"max_err={worst:.2e}"
        assert worst <= 1e-12


# -- 4 -----------------------------------------------------------------------


def test_c04_marginal_field_oracle(criterion):
    with criterion(4, "MC marginal field within 3 s.e. of the mixture posterior") as info:
        t0 = time.perf_counter()
        schedule, z = F.PathSchedule(0.1), []
        for x in (-0.7, 0.0, 0.3, 1.1):
            for t in (0.25, 0.5, 0.75):
                est, se = F.marginal_field_mc(two_point_pairs, x, t, schedule, 100_000, np.random.default_rng(0), True)
                z.append(abs(est[0] - two_point_closed_form(x, t, 0.1)) / se[0])
        elapsed = time.perf_counter() - t0
        info["detail"] = f"max_z={max(z):.2f} runtime={elapsed:.1f}s"
        assert max(z) <= 3.0
        assert elapsed < 30


# -- 5 -----------------------------------------------------------------------


def _residual(path, fn, h, dim):
    axis = np.arange(-4.0, 4.0 + h / 2, h)
    return float(np.sqrt(np.mean(F.continuity_residual(fn, path, [axis] * dim, 0.5, h) ** 2)))


def test_c05_continuity_residual(criterion):
    with criterion(5, "continuity residual second order; wrong field rejected") as info:
        notes = []
        for dim in (1, 2):
            path = F.GaussianPath([0.2] * dim, [0.8] * dim, 0.7)
            ratio = _residual(path, path.field, 0.1, dim) / _residual(path, path.field, 0.05, dim)
            wrong = _residual(path, lambda g, t: [np.full_like(g[0], -0.8) for _ in g], 0.05, dim)
            sep = wrong / _residual(path, path.field, 0.05, dim)
            notes.append(f"{dim}d: ratio={ratio:.2f} wrong/right={sep:.0f}")
            assert ratio >= 3.5 and sep >= 10
        info["detail"] = "; ".join(notes)


# -- 6 -----------------------------------------------------------------------


def test_c06_metric_oracles(criterion):
    with criterion(6, "metrics match from-definition references") as info:
        rng = np.random.default_rng(6)
        worst = 0.0
        for _ in range(100):
            p, y = rng.random((2, 16, 16))
            mse = sum((a - b) ** 2 for a, b in zip(p.ravel(), y.ravel())) / 256
            ref = {
                "nmse": mse * 256 / sum(b * b for b in y.ravel()),
                "rmse": np.sqrt(mse),
                "psnr": 10 * np.log10(1.0 / mse),
                "ssim": conv_ssim(p, y),
            }
            got = {"nmse": Mt.nmse(p, y), "rmse": Mt.rmse(p, y), "psnr": Mt.psnr(p, y), "ssim": Mt.ssim(p, y)}
            worst = max([worst] + [abs(got[k] - ref[k]) for k in ref])
            assert abs(got["psnr"] + 20 * np.log10(got["rmse"])) <= 1e-9
        info["detail"] = f"max_abs_err={worst:.2e}"
        assert worst <= 1e-9


# -- 7, 8, 9 -----------------------------------------------------------------


@pytest.fixture(scope="module")
def reference():
    if os.environ.get("RADIOFLOW_REFERENCE") == "committed":
        result = R.load(COMMITTED)
    else:
        result = R.run()
        if (COMMITTED / "train_log.csv").exists():
            committed = R.load(COMMITTED)
            assert result.losses == committed.losses, "retrained loss trace differs from the committed run"
    result.tables = R.sweeps(result)
    return result


def test_c07_desk_scale_end_to_end(criterion, reference):
    with criterion(7, "desk-scale SRM 32x32, Lite, 1 step, w=1.5") as info:
        summary = R.summarize(reference)
        got, base = summary["test"]["nmse"], summary["mean_predictor_nmse"]
        info["detail"] = (
            f"nmse={got:.4f} (need <= 0.05) baseline={base:.4f} ratio={got / base:.3f} (need <= 0.5)"
            f" train={summary['train_seconds'] / 60:.1f}min"
        )
        assert got <= 0.5 * base
        assert got <= 0.05


def test_c08_timestep_ablation(criterion, reference):
    with criterion(8, "steps=1 within 10% of steps=50") as info:
        rows = {r["steps"]: r["nmse"] for r in reference.tables["steps"]}
        info["detail"] = " ".join(f"{k}:{v:.4f}" for k, v in rows.items())
        assert set(rows) == {1, 5, 10, 20, 50}
        assert rows[1] <= 1.1 * rows[50]


def test_c09_cfg_sweep(criterion, reference, tmp_path):
    with criterion(9, "CFG sweep table complete (ordering recorded, not asserted)") as info:
        R.write_table(tmp_path / "cfg_sweep.csv", "w", reference.tables["cfg"])
        lines = (tmp_path / "cfg_sweep.csv").read_text().splitlines()
        rows = {r["w"]: r["nmse"] for r in reference.tables["cfg"]}
        ordered = all(rows[w] <= rows[6.0] for w in (1.0, 1.5, 2.0))
        info["detail"] = f"qualitative w in {{1,1.5,2}} <= w=6: {ordered}; " + " ".join(f"{k}:{v:.4f}" for k, v in rows.items())
        assert [float(l.split(",")[0]) for l in lines[1:]] == cli.CFG_SWEEP
        assert all(np.isfinite(v) for v in rows.values())


# -- 10 ----------------------------------------------------------------------


def test_c10_ema_contraction(criterion):
    gamma = 0.999
    with criterion(10, "EMA contracts with ratio gamma; gamma=0 copies") as info:
        rng = np.random.default_rng(10)
        theta = {"a": rng.normal(size=(4, 5)), "b": rng.normal(size=7)}
        ema = {k: v + rng.normal(size=v.shape) for k, v in theta.items()}

        def dist():
            return np.sqrt(sum(np.sum((ema[k] - theta[k]) ** 2) for k in theta))

        worst, prev = 0.0, dist()
        for _ in range(50):
            ema_update(ema, theta, gamma)
            cur = dist()
            worst = max(worst, abs(cur / prev - gamma))
            prev = cur
        copy = {k: v + 1.0 for k, v in theta.items()}
        ema_update(copy, theta, 0.0)
        info["detail"] = f"max |ratio - gamma|={worst:.1e}"
        assert worst <= 1e-9
        assert all(np.array_equal(copy[k], theta[k]) for k in theta)


# -- 11 ----------------------------------------------------------------------


def test_c11_lite_full_ordering(criterion):
    with criterion(11, "Lite has fewer parameters and lower latency than Full") as info:
        lite = M.ModelState.create(M.ModelConfig.lite())
        full = M.ModelState.create(M.ModelConfig.full())
        conds = build_dataset(SceneGenParams(size=32), 1, 50, "srm", seed=11)[1].conditions
        sc = SampleConfig(1, 1.5, True, 0)
        lat = {}
        for name, state in (("lite", lite), ("full", full)):
            lat[name] = float(np.mean(batch_sample(state, conds, sc).latencies))
        n_lite, n_full = M.count_parameters(lite.params), M.count_parameters(full.params)
        info["detail"] = f"params {n_lite} < {n_full}; latency {lat['lite'] * 1e3:.1f}ms < {lat['full'] * 1e3:.1f}ms"
        assert n_lite < n_full
        assert lat["lite"] < lat["full"]


# -- 12 ----------------------------------------------------------------------


def test_c12_reproducibility(criterion, tmp_path):
    with criterion(12, "identical manifests give bitwise-identical loss traces and metrics") as info:
        data = tmp_path / "data"
        gen = ["--train", "8", "--test", "4", "--size", "16", "--buildings", "3", "--building-min", "2", "--building-max", "4"]
        assert cli.main(["gen-data", "--out", str(data), "--seed", "12", *gen]) == 0
        train = ["--data", str(data), "--epochs", "2", "--batch-size", "4", "--base-channels", "4", "--seed", "5"]
        assert cli.main(["train", "--out", str(tmp_path / "a"), *train]) == 0
        # second run replays the first run's manifest
        assert cli.main(["train", "--config", str(tmp_path / "a" / cli.MANIFEST), "--out", str(tmp_path / "b")]) == 0
        cfg_a = json.loads((tmp_path / "a" / cli.MANIFEST).read_text())["config"]
        cfg_b = json.loads((tmp_path / "b" / cli.MANIFEST).read_text())["config"]
        assert {k: v for k, v in cfg_a.items() if k != "out"} == {k: v for k, v in cfg_b.items() if k != "out"}
        for run in ("a", "b"):
            ckpt = tmp_path / run / "checkpoint.rfck"
            assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(tmp_path / f"e{run}")]) == 0
        logs = [(tmp_path / r / "train_log.csv").read_bytes() for r in ("a", "b")]
        csvs = [(tmp_path / r / "metrics.csv").read_bytes() for r in ("ea", "eb")]
        info["detail"] = f"loss rows={len(logs[0].splitlines()) - 1} metric rows={len(read_report_csv(tmp_path / 'ea' / 'metrics.csv'))}"
        assert logs[0] == logs[1]
        assert csvs[0] == csvs[1]
